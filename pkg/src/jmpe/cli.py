"""Command-line entry points: `jmpe <phantom|ingest|topo|prior|seg|metrics|ablate|hpo>`."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import harness
from .data import load_manifest, load_pair
from .grids import BinaryMask, load_grid, save_grid
from .ingest import PreprocessSpec, clip_intensities, crop_to_roi, resample
from .metrics import MetricsReport, evaluate_all
from .phantoms import TreeSpec, make_dataset
from .prior_nets import (
    LossWeights,
    PriorCodec,
    PriorNetSpec,
    PriorTrainConfig,
    eval_prior,
    make_prior_sample,
    train_prior,
)
from .seg_core import SegTrainConfig, VariantSpec, segment, train_segmenter
from .topology import compute_edt, skeletonize


def _load_yaml(path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    return data


def _dataclass_from(cls, data: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**data, **overrides}
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    return cls(**merged)


def _cmd_phantom_generate(args) -> int:
    data = _load_yaml(args.spec) if args.spec else {}
    data.pop("seed", None)
    spec = _dataclass_from(TreeSpec, data, seed=0)
    manifest = make_dataset(spec, n=args.n, seed=args.seed, out_dir=args.out)
    print(manifest)
    return 0


def _cmd_ingest_preprocess(args) -> int:
    data = _load_yaml(args.spec) if args.spec else {}
    spec = _dataclass_from(PreprocessSpec, data)
    if isinstance(spec.target_spacing, str):
        raise SystemExit(
            "the median-spacing policy needs the whole training fold; pass an "
            "explicit target_spacing triple in the preprocessing config"
        )
    image = load_grid(args.image)
    liver = load_grid(args.liver_mask)
    vessels = load_grid(args.vessel_mask)
    image = resample(image, spec.target_spacing)
    liver = resample(liver, spec.target_spacing)
    vessels = resample(vessels, spec.target_spacing)
    image = crop_to_roi(image, liver, spec.crop_margin_vox)
    vessels = crop_to_roi(vessels, liver, spec.crop_margin_vox)
    liver = crop_to_roi(liver, liver, spec.crop_margin_vox)
    image = clip_intensities(image, *spec.clip_window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(image, out / "image.raw")
    save_grid(liver, out / "liver_mask.raw")
    save_grid(vessels, out / "vessel_mask.raw")
    print(out)
    return 0


def _require_mask(path) -> BinaryMask:
    grid = load_grid(path)
    if not isinstance(grid, BinaryMask):
        raise SystemExit(f"{path} is not a binary (u8) volume")
    return grid


def _cmd_topo_edt(args) -> int:
    save_grid(compute_edt(_require_mask(args.mask)), args.out)
    return 0


def _cmd_topo_skeleton(args) -> int:
    save_grid(skeletonize(_require_mask(args.mask)), args.out)
    return 0


def _cmd_prior_train(args) -> int:
    data = _load_yaml(args.spec) if args.spec else {}
    seed = int(data.pop("seed", 0))
    heads = tuple(data.pop("heads", ("shape", "topo")))
    train_keys = {f.name for f in fields(PriorTrainConfig)}
    train_data = {k: data.pop(k) for k in list(data) if k in train_keys}
    spec = _dataclass_from(PriorNetSpec, data, heads=heads)
    config = _dataclass_from(PriorTrainConfig, train_data, seed=seed)
    codec, rows = train_prior(args.data, spec, config)
    out = codec.save(args.out)
    harness._write_csv(out / "losses.csv", rows)
    print(out)
    return 0


def _cmd_prior_eval(args) -> int:
    codec = PriorCodec.load(args.codec)
    samples = [make_prior_sample(load_pair(e)[1]) for e in load_manifest(args.data)]
    scores = eval_prior(codec, samples)
    print(json.dumps(scores, sort_keys=True))
    return 0


def _codec_key(codec: PriorCodec) -> str:
    return "jmpe" if codec.spec.is_joint else codec.spec.heads[0]


def _cmd_seg_train(args) -> int:
    data = _load_yaml(args.config) if args.config else {}
    seed = int(data.pop("seed", 0))
    val_fraction = float(data.pop("val_fraction", 0.2))
    weight_data = data.pop("weights", {})
    weights = _dataclass_from(LossWeights, weight_data)
    seeds = harness.derive_seeds(seed)
    stage = harness._build_section(harness.SegStageConfig, data)
    config: SegTrainConfig = stage.train_config(seeds, None)

    codecs = {}
    for codec_dir in args.codec or []:
        codec = PriorCodec.load(codec_dir)
        codecs[_codec_key(codec)] = codec
    variant = VariantSpec(args.variant, codecs, weights)

    ids = [e.id for e in load_manifest(args.data)]
    order = list(np.random.default_rng(seeds.shuffle).permutation(ids))
    n_val = max(1, int(round(val_fraction * len(order))))
    if len(order) < 2:
        raise SystemExit("need at least 2 samples to train a segmenter")
    val_ids, train_ids = order[:n_val], order[n_val:]

    model, rows = train_segmenter(variant, args.data, train_ids, val_ids, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "checkpoint.pt")
    harness._write_csv(out / "losses.csv", rows)
    (out / "config_echo.yaml").write_text(yaml.safe_dump({
        "variant": args.variant,
        "seed": seed,
        "val_fraction": val_fraction,
        "weights": {f.name: getattr(weights, f.name) for f in fields(LossWeights)},
        "stage": {f.name: getattr(stage, f.name) for f in fields(harness.SegStageConfig)},
        "codecs": list(args.codec or []),
    }, sort_keys=True))
    print(out)
    return 0


def _cmd_metrics_eval(args) -> int:
    pred = load_grid(args.pred)
    gt = _require_mask(args.gt)
    report = evaluate_all(pred, gt, args.threshold)
    print(MetricsReport.csv_header())
    print(report.csv_row())
    return 0


def _cmd_metrics_batch(args) -> int:
    items = json.loads(Path(args.manifest).read_text())
    if not isinstance(items, list):
        raise SystemExit(f"{args.manifest} must be a JSON list of {{pred, gt}} pairs")
    print("pred,gt," + MetricsReport.csv_header())
    for item in items:
        report = evaluate_all(load_grid(item["pred"]), _require_mask(item["gt"]),
                              args.threshold)
        print(f"{item['pred']},{item['gt']}," + report.csv_row())
    return 0


def _cmd_ablate(args) -> int:
    config = harness.ExperimentConfig.from_yaml(args.config)
    result = harness.run_ablation(config, args.out)
    print(Path(args.out) / "table.txt")
    print((Path(args.out) / "table.txt").read_text())
    return 0 if result.completed else 1


def _cmd_hpo(args) -> int:
    config = harness.ExperimentConfig.from_yaml(args.config)
    variant = args.variant
    param_names = harness._ACTIVE_LAMBDAS[variant]
    if not param_names:
        raise SystemExit(f"variant {variant!r} has no strengths to tune")
    seeds = harness.derive_seeds(config.seed)
    entries = load_manifest(config.manifest)
    split = harness.make_folds([e.id for e in entries], config.folds, seeds.shuffle)
    pool = harness._CodecPool(config, seeds, Path(args.out))

    def objective(params: dict) -> float:
        scores = []
        for fold_index, fold in enumerate(split):
            codecs = {
                key: pool.get(fold_index, fold, heads)
                for key, heads in harness._VARIANT_CODEC_HEADS[variant].items()
            }
            base = {f.name: getattr(config.weights_for(variant), f.name)
                    for f in fields(LossWeights)}
            base.update(params)
            vspec = VariantSpec(variant, codecs, LossWeights(**base))
            seg_cfg = config.seg.train_config(
                seeds, config.augment if config.augment_enabled else None)
            _, rows = train_segmenter(vspec, config.manifest, fold.train, fold.val, seg_cfg)
            scores.append(max(row["val_dsc"] for row in rows))
        return float(np.mean(scores))

    best, rows = harness.search_lambda(
        param_names, config.search.trials, config.seed, objective,
        low=config.search.low, high=config.search.high,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness._write_csv(out / "trials.csv", rows)
    (out / "best.yaml").write_text(yaml.safe_dump({"variant": variant, "best": best}))
    print(yaml.safe_dump({"variant": variant, "best": best}).strip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jmpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic vascular phantoms")
    phantom_sub = phantom.add_subparsers(dest="subcommand", required=True)
    gen = phantom_sub.add_parser("generate", help="write a phantom dataset + manifest")
    gen.add_argument("--spec", help="YAML tree spec (optional; defaults used otherwise)")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_phantom_generate)

    ingest = sub.add_parser("ingest", help="CT preprocessing")
    ingest_sub = ingest.add_subparsers(dest="subcommand", required=True)
    prep = ingest_sub.add_parser("preprocess")
    prep.add_argument("--image", required=True)
    prep.add_argument("--liver-mask", required=True)
    prep.add_argument("--vessel-mask", required=True)
    prep.add_argument("--spec")
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=_cmd_ingest_preprocess)

    topo = sub.add_parser("topo", help="distance transform and skeleton")
    topo_sub = topo.add_subparsers(dest="subcommand", required=True)
    edt = topo_sub.add_parser("edt")
    edt.add_argument("--mask", required=True)
    edt.add_argument("--out", required=True)
    edt.set_defaults(func=_cmd_topo_edt)
    skel = topo_sub.add_parser("skeleton")
    skel.add_argument("--mask", required=True)
    skel.add_argument("--out", required=True)
    skel.set_defaults(func=_cmd_topo_skeleton)

    prior = sub.add_parser("prior", help="prior codec training and evaluation")
    prior_sub = prior.add_subparsers(dest="subcommand", required=True)
    ptrain = prior_sub.add_parser("train")
    ptrain.add_argument("--data", required=True, help="dataset manifest")
    ptrain.add_argument("--spec", help="YAML codec spec / training config")
    ptrain.add_argument("--out", required=True, help="codec directory")
    ptrain.set_defaults(func=_cmd_prior_train)
    peval = prior_sub.add_parser("eval")
    peval.add_argument("--codec", required=True)
    peval.add_argument("--data", required=True)
    peval.set_defaults(func=_cmd_prior_eval)

    seg = sub.add_parser("seg", help="segmenter training")
    seg_sub = seg.add_subparsers(dest="subcommand", required=True)
    strain = seg_sub.add_parser("train")
    strain.add_argument("--variant", required=True)
    strain.add_argument("--data", required=True)
    strain.add_argument("--codec", action="append", help="codec directory (repeatable)")
    strain.add_argument("--config", help="YAML training config")
    strain.add_argument("--out", required=True, help="run directory")
    strain.set_defaults(func=_cmd_seg_train)

    met = sub.add_parser("metrics", help="evaluation metrics")
    met_sub = met.add_subparsers(dest="subcommand", required=True)
    meval = met_sub.add_parser("eval")
    meval.add_argument("--pred", required=True)
    meval.add_argument("--gt", required=True)
    meval.add_argument("--threshold", type=float, default=0.5)
    meval.set_defaults(func=_cmd_metrics_eval)
    mbatch = met_sub.add_parser("batch")
    mbatch.add_argument("--manifest", required=True)
    mbatch.add_argument("--threshold", type=float, default=0.5)
    mbatch.set_defaults(func=_cmd_metrics_batch)

    ablate = sub.add_parser("ablate", help="run the full variant ablation")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(func=_cmd_ablate)

    hpo = sub.add_parser("hpo", help="search regularization strengths")
    hpo.add_argument("--config", required=True)
    hpo.add_argument("--variant", required=True)
    hpo.add_argument("--out", required=True)
    hpo.set_defaults(func=_cmd_hpo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
