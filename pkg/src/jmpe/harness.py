"""Experiment orchestration: configs, folds, hyper-parameter search, ablation.

A single global seed derives the per-stage seeds (weight init, shuffling,
augmentation) by fixed offsets, so one integer replays a whole run. The
`JMPE_SEED` environment variable overrides the config seed at load time.

`run_ablation` trains the required prior codecs per fold, trains one
segmenter per (variant, fold), evaluates every fold's held-out samples,
and writes a CSV plus a formatted table of mean +/- std per metric.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .augment import AugmentSpec
from .data import load_manifest, load_pair
from .metrics import MetricsReport, evaluate_all
from .prior_nets import (
    LossWeights,
    PriorCodec,
    PriorNetSpec,
    PriorTrainConfig,
    reference_weights,
    train_prior,
)
from .seg_core import (
    SegModelSpec,
    SegTrainConfig,
    VariantSpec,
    VARIANT_NAMES,
    segment,
    train_segmenter,
)

__all__ = [
    "StageSeeds",
    "derive_seeds",
    "FoldIds",
    "FoldSplit",
    "make_folds",
    "search_lambda",
    "PriorStageConfig",
    "SegStageConfig",
    "SearchConfig",
    "ExperimentConfig",
    "AblationResult",
    "run_ablation",
]

log = logging.getLogger(__name__)

SEED_ENV_VAR = "JMPE_SEED"

_VARIANT_CODEC_HEADS = {
    "baseline": {},
    "shape": {"shape": ("shape",)},
    "topo": {"topo": ("topo",)},
    "shape+topo": {"shape": ("shape",), "topo": ("topo",)},
    "jmpe": {"jmpe": ("shape", "topo")},
}

_ACTIVE_LAMBDAS = {
    "baseline": (),
    "shape": ("lam_s",),
    "topo": ("lam_t",),
    "shape+topo": ("lam_s", "lam_t"),
    "jmpe": ("lam",),
}


@dataclass(frozen=True)
class StageSeeds:
    weights: int
    shuffle: int
    augment: int


def derive_seeds(global_seed: int) -> StageSeeds:
    """Fixed offsets: weights=+1, shuffle=+2, augmentation=+3."""
    return StageSeeds(weights=global_seed + 1, shuffle=global_seed + 2,
                      augment=global_seed + 3)


@dataclass(frozen=True)
class FoldIds:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[FoldIds, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def make_folds(sample_ids, k: int, seed: int) -> FoldSplit:
    """Deterministic shuffled k-fold partition with an 80/20 train/val split.

    Test sets partition the dataset; within each fold 20 percent of the
    remaining samples (at least one) become the validation set.
    """
    ids = list(sample_ids)
    if k < 1:
        raise ValueError(f"fold count must be >= 1, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} samples")
    order = list(np.random.default_rng(seed).permutation(ids))
    chunks = np.array_split(np.asarray(order, dtype=object), k)
    folds = []
    for chunk in chunks:
        test = tuple(str(s) for s in chunk)
        rest = [s for s in order if s not in set(test)]
        n_val = max(1, int(round(0.2 * len(rest))))
        n_val = min(n_val, len(rest) - 1) if len(rest) > 1 else 0
        folds.append(FoldIds(
            train=tuple(rest[n_val:]),
            val=tuple(rest[:n_val]),
            test=test,
        ))
    return FoldSplit(tuple(folds))


def search_lambda(param_names, trials: int, seed: int, objective,
                  low: float = 0.1, high: float = 100.0):
    """Random log-uniform search over regularization strengths.

    `objective` maps a params dict to a score (higher is better, e.g. mean
    validation Dice). Returns (best params, trial log).
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not param_names:
        raise ValueError("nothing to search: no active strengths for this variant")
    rng = np.random.default_rng(seed)
    log_rows = []
    best_params, best_score = None, -np.inf
    for trial in range(trials):
        params = {
            name: float(np.exp(rng.uniform(np.log(low), np.log(high))))
            for name in param_names
        }
        score = float(objective(params))
        log_rows.append({"trial": trial, **params, "objective": score})
        if score > best_score:
            best_params, best_score = params, score
    return best_params, log_rows


@dataclass(frozen=True)
class PriorStageConfig:
    levels: int = 5
    base_features: int = 8
    latent_feature_maps: int = 32
    projection_out_maps: int = 8
    projection_seed: int = 0
    epochs: int = 1000
    lr: float = 1e-4
    batch_size: int = 2
    val_fraction: float = 0.2
    alpha_s: float = 1.0
    alpha_t: float = 1.0
    topo_weight_source: str = "mask"

    def net_spec(self, heads) -> PriorNetSpec:
        return PriorNetSpec(
            levels=self.levels,
            base_features=self.base_features,
            latent_feature_maps=self.latent_feature_maps,
            projection_out_maps=self.projection_out_maps,
            projection_seed=self.projection_seed,
            heads=tuple(heads),
        )

    def train_config(self, seed: int, sample_ids=None) -> PriorTrainConfig:
        return PriorTrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=seed,
            val_fraction=self.val_fraction,
            alpha_s=self.alpha_s,
            alpha_t=self.alpha_t,
            topo_weight_source=self.topo_weight_source,
            sample_ids=tuple(sample_ids) if sample_ids is not None else None,
        )


@dataclass(frozen=True)
class SegStageConfig:
    levels: int = 4
    base_features: int = 16
    residual_blocks_per_level: int = 2
    epochs: int = 1500
    lr: float = 3e-4
    batch_size: int = 2
    threshold: float = 0.5

    def model_spec(self) -> SegModelSpec:
        return SegModelSpec(
            levels=self.levels,
            base_features=self.base_features,
            residual_blocks_per_level=self.residual_blocks_per_level,
        )

    def train_config(self, seeds: StageSeeds, augment: AugmentSpec | None) -> SegTrainConfig:
        return SegTrainConfig(
            model=self.model_spec(),
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            weights_seed=seeds.weights,
            shuffle_seed=seeds.shuffle,
            augment_seed=seeds.augment,
            threshold=self.threshold,
            augment=augment,
        )


@dataclass(frozen=True)
class SearchConfig:
    enabled: bool = False
    trials: int = 20
    low: float = 0.1
    high: float = 100.0


def _build_section(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key in ("gamma_range",):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    return cls(**data)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full declarative description of one ablation run."""

    manifest: str
    variants: tuple[str, ...] = VARIANT_NAMES
    folds: int = 5
    seed: int = 0
    prior: PriorStageConfig = field(default_factory=PriorStageConfig)
    seg: SegStageConfig = field(default_factory=SegStageConfig)
    augment_enabled: bool = False
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    weight_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"fold count must be >= 2, got {self.folds}")
        bad = [v for v in self.variants if v not in VARIANT_NAMES]
        if bad or not self.variants:
            raise ValueError(f"variants must be a nonempty subset of {VARIANT_NAMES}, got {self.variants}")
        if not Path(self.manifest).exists():
            raise FileNotFoundError(f"dataset manifest not found: {self.manifest}")
        for variant in self.weight_overrides:
            if variant not in VARIANT_NAMES:
                raise ValueError(f"weight override for unknown variant {variant!r}")

    def weights_for(self, variant: str) -> LossWeights:
        base = asdict(reference_weights(variant))
        base.update(self.weight_overrides.get(variant, {}))
        return LossWeights(**base)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"config {path} must be a mapping")
        if SEED_ENV_VAR in os.environ:
            data["seed"] = int(os.environ[SEED_ENV_VAR])
        manifest = data.get("manifest")
        if manifest is None:
            raise ValueError("config must name a dataset manifest")
        manifest_path = Path(manifest)
        if not manifest_path.is_absolute():
            manifest_path = path.parent / manifest_path
        return cls(
            manifest=str(manifest_path),
            variants=tuple(data.get("variants", VARIANT_NAMES)),
            folds=int(data.get("folds", 5)),
            seed=int(data.get("seed", 0)),
            prior=_build_section(PriorStageConfig, data.get("prior")),
            seg=_build_section(SegStageConfig, data.get("seg")),
            augment_enabled=bool(data.get("augment", {}).get("enabled", False)),
            augment=_build_section(
                AugmentSpec,
                {k: v for k, v in data.get("augment", {}).items() if k != "enabled"},
            ),
            search=_build_section(SearchConfig, data.get("search")),
            weight_overrides={k: dict(v) for k, v in data.get("weights", {}).items()},
        )

    def to_dict(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "variants": list(self.variants),
            "folds": self.folds,
            "seed": self.seed,
            "prior": asdict(self.prior),
            "seg": asdict(self.seg),
            "augment": {"enabled": self.augment_enabled,
                        **{k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(self.augment).items()}},
            "search": asdict(self.search),
            "weights": {k: dict(v) for k, v in self.weight_overrides.items()},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _lambda_label(variant: str, weights: LossWeights) -> str:
    parts = [f"{name}={getattr(weights, name):g}" for name in _ACTIVE_LAMBDAS[variant]]
    return ", ".join(parts) if parts else "-"


@dataclass
class AblationResult:
    variant_stats: dict
    variant_cases: dict
    reports: dict
    failures: list
    csv_path: Path | None = None
    table_path: Path | None = None

    @property
    def completed(self) -> bool:
        return not self.failures and all(n > 0 for n in self.variant_cases.values())


class _CodecPool:
    """Per-(fold, head-set) codec cache so variants share single-prior codecs."""

    def __init__(self, config: ExperimentConfig, seeds: StageSeeds, out_dir: Path):
        self.config = config
        self.seeds = seeds
        self.out_dir = out_dir
        self._cache: dict = {}

    def get(self, fold_index: int, fold: FoldIds, heads: tuple[str, ...]) -> PriorCodec:
        key = (fold_index, heads)
        if key not in self._cache:
            spec = self.config.prior.net_spec(heads)
            train_cfg = self.config.prior.train_config(
                seed=self.seeds.weights, sample_ids=(*fold.train, *fold.val)
            )
            codec, rows = train_prior(self.config.manifest, spec, train_cfg)
            codec_dir = self.out_dir / "codecs" / f"fold{fold_index}" / "+".join(heads)
            codec.save(codec_dir)
            _write_csv(codec_dir / "losses.csv", rows)
            self._cache[key] = codec
        return self._cache[key]


def _write_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    names = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _aggregate(reports) -> dict:
    stats = {}
    for name in MetricsReport.fieldnames():
        values = np.asarray([getattr(r, name) for r in reports], dtype=float)
        stats[name] = (float(values.mean()), float(values.std()))
    return stats


def _format_table(config: ExperimentConfig, result: AblationResult) -> str:
    columns = [
        ("DSC", "dsc"), ("Jacc", "jacc"), ("clDSC", "cldsc"),
        ("HD (mm)", "hd_mm"), ("AVD (rel)", "rvd"), ("ASSD (mm)", "assd_mm"),
    ]
    header = ["Model".ljust(12), "lambda".ljust(24)] + [label.ljust(16) for label, _ in columns]
    lines = ["".join(header).rstrip()]
    for variant in config.variants:
        cells = [variant.ljust(12), _lambda_label(variant, config.weights_for(variant)).ljust(24)]
        if result.variant_cases.get(variant, 0) == 0:
            cells.append("FAILED")
        else:
            for _, name in columns:
                mean, std = result.variant_stats[variant][name]
                cells.append(f"{mean:.4f}+/-{std:.4f}".ljust(16))
        lines.append("".join(cells).rstrip())
    lines.append("")
    lines.append("cases per variant: " + ", ".join(
        f"{v}={result.variant_cases.get(v, 0)}" for v in config.variants))
    if result.failures:
        lines.append("failures:")
        lines.extend(f"  - {msg}" for msg in result.failures)
    return "\n".join(lines) + "\n"


def run_ablation(config: ExperimentConfig, out_dir) -> AblationResult:
    """Train and evaluate every requested variant across every fold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.yaml").write_text(config.to_yaml())
    seeds = derive_seeds(config.seed)
    entries = load_manifest(config.manifest)
    split = make_folds([e.id for e in entries], config.folds, seeds.shuffle)
    entries_by_id = {e.id: e for e in entries}
    pool = _CodecPool(config, seeds, out)

    reports: dict = {v: [] for v in config.variants}
    failures: list = []
    for variant in config.variants:
        for fold_index, fold in enumerate(split):
            try:
                codecs = {
                    key: pool.get(fold_index, fold, heads)
                    for key, heads in _VARIANT_CODEC_HEADS[variant].items()
                }
                vspec = VariantSpec(variant, codecs, config.weights_for(variant))
                seg_cfg = config.seg.train_config(
                    seeds, config.augment if config.augment_enabled else None
                )
                model, rows = train_segmenter(
                    vspec, config.manifest, fold.train, fold.val, seg_cfg
                )
                run_dir = out / "runs" / variant.replace("+", "_") / f"fold{fold_index}"
                run_dir.mkdir(parents=True, exist_ok=True)
                _write_csv(run_dir / "losses.csv", rows)
                torch.save(model.state_dict(), run_dir / "checkpoint.pt")
                (run_dir / "config_echo.yaml").write_text(config.to_yaml())
            except Exception as exc:  # noqa: BLE001 - cell failures must not kill the table
                failures.append(f"{variant}/fold{fold_index}: training failed: {exc}")
                log.exception("training failed for %s fold %d", variant, fold_index)
                continue
            for sample_id in fold.test:
                try:
                    image, mask = load_pair(entries_by_id[sample_id])
                    soft = segment(model, image)
                    reports[variant].append(
                        evaluate_all(soft, mask, config.seg.threshold)
                    )
                except Exception as exc:  # noqa: BLE001
                    failures.append(f"{variant}/fold{fold_index}/{sample_id}: evaluation failed: {exc}")
                    log.exception("evaluation failed for %s", sample_id)

    variant_stats = {v: _aggregate(r) for v, r in reports.items() if r}
    variant_cases = {v: len(r) for v, r in reports.items()}
    result = AblationResult(variant_stats, variant_cases, reports, failures)

    csv_rows = []
    for variant in config.variants:
        row: dict = {"variant": variant, "cases": variant_cases.get(variant, 0)}
        for name in MetricsReport.fieldnames():
            if variant in variant_stats:
                mean, std = variant_stats[variant][name]
                row[f"{name}_mean"] = mean
                row[f"{name}_std"] = std
            else:
                row[f"{name}_mean"] = ""
                row[f"{name}_std"] = ""
        csv_rows.append(row)
    result.csv_path = out / "ablation.csv"
    _write_csv(result.csv_path, csv_rows)
    result.table_path = out / "table.txt"
    result.table_path.write_text(_format_table(config, result))
    return result
