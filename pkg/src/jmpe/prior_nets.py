"""Prior encoders: single-prior auto-encoders and the joint multi-prior network.

One convolutional encoder compresses a binary vessel mask into a latent
code; per-prior decoder heads reconstruct the mask (shape head) or regress
its normalized distance map (topology head). A codec with both heads
shares the latent space between the two priors. A fixed, seeded 1x1x1
projection shrinks the latent channel count; it is never trained and is
what the segmentation-time regularizer compares.

Training minimizes a class-balanced smooth-L1 objective per head, with
per-voxel weights inversely proportional to class frequency in the mask.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import load_manifest, load_pair
from .grids import BinaryMask, DistanceMap, VoxelGrid, binarize
from .topology import compute_edt

__all__ = [
    "PriorNetSpec",
    "PriorCodec",
    "PriorSample",
    "LossWeights",
    "reference_weights",
    "make_prior_sample",
    "voxel_weights",
    "weighted_smooth_l1",
    "jmpe_loss",
    "PriorTrainConfig",
    "train_prior",
    "eval_prior",
]

log = logging.getLogger(__name__)

VALID_HEADS = ("shape", "topo")
_CHANNEL_CAP = 64


@dataclass(frozen=True)
class PriorNetSpec:
    """Architecture of a prior codec; `heads` decides single- vs dual-prior."""

    levels: int = 5
    base_features: int = 8
    latent_feature_maps: int = 32
    projection_out_maps: int = 8
    projection_seed: int = 0
    heads: tuple[str, ...] = ("shape", "topo")

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if not self.latent_feature_maps >= self.projection_out_maps >= 1:
            raise ValueError(
                f"need latent_feature_maps >= projection_out_maps >= 1, got "
                f"{self.latent_feature_maps} / {self.projection_out_maps}"
            )
        heads = tuple(h for h in VALID_HEADS if h in self.heads)
        if not heads or set(self.heads) - set(VALID_HEADS):
            raise ValueError(f"heads must be a nonempty subset of {VALID_HEADS}, got {self.heads}")
        object.__setattr__(self, "heads", heads)

    @property
    def is_joint(self) -> bool:
        return self.heads == ("shape", "topo")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def level_channels(self) -> list[int]:
        return [min(self.base_features * 2**i, _CHANNEL_CAP) for i in range(self.levels)]


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.1, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1, inplace=True),
    )


class PriorEncoder(nn.Module):
    def __init__(self, spec: PriorNetSpec):
        super().__init__()
        chans = spec.level_channels()
        stages = [_double_conv(1, chans[0])]
        for i in range(1, spec.levels):
            stages.append(nn.Sequential(
                nn.Conv3d(chans[i - 1], chans[i], 3, stride=2, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
                _double_conv(chans[i], chans[i]),
            ))
        self.stages = nn.Sequential(*stages)
        self.to_latent = nn.Conv3d(chans[-1], spec.latent_feature_maps, 1)

    def forward(self, x):
        return self.to_latent(self.stages(x))


class PriorDecoder(nn.Module):
    def __init__(self, spec: PriorNetSpec, head: str):
        super().__init__()
        chans = spec.level_channels()
        self.from_latent = nn.Conv3d(spec.latent_feature_maps, chans[-1], 1)
        stages = []
        for i in range(spec.levels - 1, 0, -1):
            stages.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                _double_conv(chans[i], chans[i - 1]),
            ))
        self.stages = nn.Sequential(*stages)
        self.head_conv = nn.Conv3d(chans[0], 1, 1)
        # shape head is probability-like, topo head regresses a nonnegative map
        self.bounded = head == "shape"

    def forward(self, z):
        h = self.head_conv(self.stages(self.from_latent(z)))
        return torch.sigmoid(h) if self.bounded else F.softplus(h)


def _as_batch(x, name: str = "input") -> torch.Tensor:
    """Normalize VoxelGrid / array / tensor input to a (B, 1, D, H, W) tensor."""
    if isinstance(x, VoxelGrid):
        x = torch.as_tensor(x.values.copy())
    elif isinstance(x, np.ndarray):
        x = torch.as_tensor(np.ascontiguousarray(x))  # keeps the caller's dtype
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a VoxelGrid, ndarray or tensor, got {type(x)!r}")
    if x.ndim == 3:
        return x.unsqueeze(0).unsqueeze(0)
    if x.ndim == 5:
        return x
    raise ValueError(f"{name} must be 3D or batched 5D, got shape {tuple(x.shape)}")


class PriorCodec(nn.Module):
    """Encoder, per-head decoders, and the frozen latent projection."""

    def __init__(self, spec: PriorNetSpec):
        super().__init__()
        self.spec = spec
        self.encoder = PriorEncoder(spec)
        self.decoders = nn.ModuleDict({h: PriorDecoder(spec, h) for h in spec.heads})
        projection = nn.Conv3d(
            spec.latent_feature_maps, spec.projection_out_maps, 1, bias=False
        )
        gen = torch.Generator().manual_seed(spec.projection_seed)
        weight = torch.randn(projection.weight.shape, generator=gen)
        weight /= math.sqrt(spec.latent_feature_maps)
        with torch.no_grad():
            projection.weight.copy_(weight)
        projection.weight.requires_grad_(False)
        self.projection = projection

    def check_divisible(self, spatial_shape) -> None:
        factor = self.spec.downsample_factor
        for axis, size in enumerate(spatial_shape):
            if size % factor:
                raise ValueError(
                    f"axis {axis} has size {size}, not divisible by {factor} as "
                    f"required by a {self.spec.levels}-level encoder"
                )

    def encode(self, x) -> torch.Tensor:
        batch = _as_batch(x)
        self.check_divisible(batch.shape[2:])
        return self.encoder(batch.to(self.projection.weight.dtype))

    def _decode(self, head: str, z: torch.Tensor) -> torch.Tensor:
        if head not in self.decoders:
            raise ValueError(f"codec has no {head!r} head (heads: {self.spec.heads})")
        return self.decoders[head](z)

    def decode_shape(self, z: torch.Tensor) -> torch.Tensor:
        return self._decode("shape", z)

    def decode_topo(self, z: torch.Tensor) -> torch.Tensor:
        return self._decode("topo", z)

    def project_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 5 or z.shape[1] != self.spec.latent_feature_maps:
            raise ValueError(
                f"latent code must have {self.spec.latent_feature_maps} channels, "
                f"got shape {tuple(z.shape)}"
            )
        return self.projection(z)

    def forward(self, x) -> dict[str, torch.Tensor]:
        z = self.encode(x)
        return {head: self.decoders[head](z) for head in self.spec.heads}

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        state = self.state_dict()
        for name in sorted(state):
            digest.update(name.encode())
            digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def projection_checksum(self) -> str:
        blob = self.projection.weight.detach().cpu().contiguous().numpy().tobytes()
        return hashlib.sha256(blob).hexdigest()

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        spec_dict = asdict(self.spec)
        spec_dict["heads"] = list(self.spec.heads)
        (out / "spec.json").write_text(json.dumps(spec_dict, indent=1) + "\n")
        torch.save(self.state_dict(), out / "weights.pt")
        return out

    @classmethod
    def load(cls, codec_dir) -> "PriorCodec":
        codec_dir = Path(codec_dir)
        spec_dict = json.loads((codec_dir / "spec.json").read_text())
        spec_dict["heads"] = tuple(spec_dict["heads"])
        codec = cls(PriorNetSpec(**spec_dict))
        codec.load_state_dict(torch.load(codec_dir / "weights.pt", weights_only=True))
        codec.eval()
        return codec


@dataclass(frozen=True)
class PriorSample:
    """Training item: mask input, mask target, normalized distance target."""

    input: BinaryMask
    shape_target: BinaryMask
    topo_target: DistanceMap
    topo_scale: float = 1.0

    def __post_init__(self):
        if self.shape_target.shape != self.topo_target.shape:
            raise ValueError("shape and topo targets must share geometry")
        mismatched = (self.topo_target.values == 0) != (self.shape_target.values == 0)
        if mismatched.any():
            raise ValueError(
                "topo target must be zero exactly at the shape target's background"
            )


def make_prior_sample(mask: BinaryMask) -> PriorSample:
    """Build the per-mask training item; the distance map is max-normalized."""
    dmap = compute_edt(mask)
    scale = float(dmap.values.max())
    if scale > 0:
        normalized = DistanceMap(dmap.values / scale, mask.spacing)
    else:
        scale = 1.0
        normalized = dmap
    return PriorSample(input=mask, shape_target=mask, topo_target=normalized, topo_scale=scale)


@dataclass(frozen=True)
class LossWeights:
    """Task weights for joint training plus regularization strengths."""

    alpha_s: float = 1.0
    alpha_t: float = 1.0
    lam: float = 65.10
    lam_s: float = 63.33
    lam_t: float = 14.53

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


# tuned regularization strengths per variant, from the reference experiments
_REFERENCE_LAMBDAS = {
    "baseline": {},
    "shape": {"lam_s": 26.21},
    "topo": {"lam_t": 32.01},
    "shape+topo": {"lam_s": 63.33, "lam_t": 14.53},
    "jmpe": {"lam": 65.10},
}


def reference_weights(variant: str) -> LossWeights:
    """Tuned LossWeights for one ablation variant; unused strengths are zeroed."""
    if variant not in _REFERENCE_LAMBDAS:
        raise ValueError(f"unknown variant {variant!r}")
    values = {"lam": 0.0, "lam_s": 0.0, "lam_t": 0.0}
    values.update(_REFERENCE_LAMBDAS[variant])
    return LossWeights(**values)


def voxel_weights(target):
    """Class-balancing weights: N/N_pos at positive voxels, N/N_neg at negatives.

    Accepts a BinaryMask, a numpy array, or a tensor of {0, 1} values and
    returns float64 weights of the matching kind. Raises if either class
    is empty, since the balancing ratio is then undefined.
    """
    if isinstance(target, torch.Tensor):
        values = target
        is_pos = values == 1
        is_neg = values == 0
        if not bool((is_pos | is_neg).all()):
            raise ValueError("weight target must be binary (0/1 values)")
        n = values.numel()
        n_pos = int(is_pos.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            raise ValueError(
                f"class weights undefined for a single-class target "
                f"(positives={n_pos}, negatives={n_neg})"
            )
        weights = torch.empty(values.shape, dtype=torch.float64, device=values.device)
        weights[is_pos] = n / n_pos
        weights[is_neg] = n / n_neg
        return weights
    values = target.values if isinstance(target, BinaryMask) else np.asarray(target)
    is_pos = values == 1
    is_neg = values == 0
    if not (is_pos | is_neg).all():
        raise ValueError("weight target must be binary (0/1 values)")
    n = values.size
    n_pos = int(is_pos.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"class weights undefined for a single-class target "
            f"(positives={n_pos}, negatives={n_neg})"
        )
    weights = np.empty(values.shape, dtype=np.float64)
    weights[is_pos] = n / n_pos
    weights[is_neg] = n / n_neg
    return weights


def weighted_smooth_l1(pred, target, weights, beta: float = 1.0) -> torch.Tensor:
    """(1/N) * sum(w * smoothL1(pred - target)); quadratic below `beta`, linear above."""
    pred_t = _as_batch(pred, "pred")
    target_t = _as_batch(target, "target")
    weights_t = _as_batch(weights, "weights")
    if pred_t.shape != target_t.shape or weights_t.shape != pred_t.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred_t.shape)}, target {tuple(target_t.shape)}, "
            f"weights {tuple(weights_t.shape)}"
        )
    per_voxel = F.smooth_l1_loss(pred_t, target_t.to(pred_t.dtype), reduction="none", beta=beta)
    return (per_voxel * weights_t).sum() / pred_t.numel()


def jmpe_loss(outputs, sample: PriorSample, alpha_s: float = 1.0, alpha_t: float = 1.0,
              topo_weight_source: str = "mask") -> torch.Tensor:
    """Joint reconstruction + regression loss over both decoder heads.

    Both per-head terms are class-balanced by the binary mask's voxel
    weights (`topo_weight_source="distance"` balances the regression head
    by the distance target's own support instead).
    """
    if "shape" not in outputs or "topo" not in outputs:
        raise ValueError(f"joint loss needs both heads, got {sorted(outputs)}")
    mask_weights = voxel_weights(torch.as_tensor(sample.input.values.copy()))
    if topo_weight_source == "mask":
        topo_weights = mask_weights
    elif topo_weight_source == "distance":
        topo_weights = voxel_weights((torch.as_tensor(sample.topo_target.values.copy()) > 0).to(torch.float32))
    else:
        raise ValueError(f"unknown topo_weight_source {topo_weight_source!r}")
    shape_term = weighted_smooth_l1(outputs["shape"], sample.shape_target, mask_weights)
    topo_term = weighted_smooth_l1(outputs["topo"], sample.topo_target, topo_weights)
    return alpha_s * shape_term + alpha_t * topo_term


@dataclass
class PriorTrainConfig:
    epochs: int = 1000
    lr: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    val_fraction: float = 0.2
    alpha_s: float = 1.0
    alpha_t: float = 1.0
    topo_weight_source: str = "mask"
    sample_ids: tuple[str, ...] | None = None


def _head_targets(sample: PriorSample, head: str) -> VoxelGrid:
    return sample.shape_target if head == "shape" else sample.topo_target


def _stack(grids) -> torch.Tensor:
    return torch.stack([torch.as_tensor(g.values.copy()) for g in grids]).unsqueeze(1)


def _epoch_pass(codec, inputs, targets, weights, indices, batch_size, alphas,
                optimizer=None) -> dict[str, float]:
    head_sums = {h: 0.0 for h in codec.spec.heads}
    total_sum = 0.0
    for lo in range(0, len(indices), batch_size):
        batch_idx = indices[lo:lo + batch_size]
        x = inputs[batch_idx]
        outputs = codec(x)
        head_losses = {
            h: weighted_smooth_l1(outputs[h], targets[h][batch_idx], weights[h][batch_idx])
            for h in codec.spec.heads
        }
        loss = sum(alphas[h] * head_losses[h] for h in codec.spec.heads)
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        for h, value in head_losses.items():
            head_sums[h] += float(value.detach()) * len(batch_idx)
        total_sum += float(loss.detach()) * len(batch_idx)
    n = len(indices)
    out = {f"{h}_loss": head_sums[h] / n for h in head_sums}
    out["total"] = total_sum / n
    return out


def train_prior(manifest_path, spec: PriorNetSpec, config: PriorTrainConfig):
    """Train a prior codec on the masks of a dataset manifest.

    Returns the codec restored to its best-validation-loss parameters and
    a per-epoch log (one dict per epoch with train/val losses per head).
    """
    entries = load_manifest(manifest_path)
    if config.sample_ids is not None:
        wanted = set(config.sample_ids)
        entries = [e for e in entries if e.id in wanted]
    if len(entries) < 2:
        raise ValueError(f"need at least 2 samples to train, got {len(entries)}")

    masks = [load_pair(entry)[1] for entry in entries]
    factor = spec.downsample_factor
    for axis, size in enumerate(masks[0].shape):
        if size % factor:
            raise ValueError(
                f"axis {axis} has size {size}, not divisible by {factor} as "
                f"required by a {spec.levels}-level encoder"
            )
    samples = [make_prior_sample(mask) for mask in masks]

    torch.manual_seed(config.seed)
    codec = PriorCodec(spec)  # seeded parameter init

    order = np.random.default_rng(config.seed + 1).permutation(len(samples))
    n_val = max(1, int(round(config.val_fraction * len(samples))))
    n_val = min(n_val, len(samples) - 1)
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    inputs = _stack([s.input for s in samples])
    targets = {h: _stack([_head_targets(s, h) for s in samples]) for h in codec.spec.heads}
    weight_of = {
        "shape": lambda s: voxel_weights(torch.as_tensor(s.input.values.copy())),
        "topo": lambda s: (
            voxel_weights(torch.as_tensor(s.input.values.copy()))
            if config.topo_weight_source == "mask"
            else voxel_weights((torch.as_tensor(s.topo_target.values.copy()) > 0).to(torch.float32))
        ),
    }
    weights = {
        h: torch.stack([weight_of[h](s) for s in samples]).unsqueeze(1)
        for h in codec.spec.heads
    }
    alphas = {"shape": config.alpha_s, "topo": config.alpha_t}

    optimizer = torch.optim.Adam(
        [p for p in codec.parameters() if p.requires_grad], lr=config.lr
    )
    shuffle_rng = np.random.default_rng(config.seed + 2)
    best_val = math.inf
    best_state = copy.deepcopy(codec.state_dict())
    rows = []
    for epoch in range(config.epochs):
        codec.train()
        perm = train_idx[shuffle_rng.permutation(len(train_idx))]
        train_stats = _epoch_pass(codec, inputs, targets, weights, perm,
                                  config.batch_size, alphas, optimizer)
        codec.eval()
        with torch.no_grad():
            val_stats = _epoch_pass(codec, inputs, targets, weights, val_idx,
                                    config.batch_size, alphas)
        row = {"epoch": epoch}
        row.update({f"train_{k}": v for k, v in train_stats.items()})
        row.update({f"val_{k}": v for k, v in val_stats.items()})
        rows.append(row)
        if not all(math.isfinite(v) for k, v in row.items() if k != "epoch"):
            raise RuntimeError(f"prior training diverged (non-finite loss) at epoch {epoch}")
        if val_stats["total"] < best_val:
            best_val = val_stats["total"]
            best_state = copy.deepcopy(codec.state_dict())
    codec.load_state_dict(best_state)
    codec.eval()
    return codec, rows


def eval_prior(codec: PriorCodec, samples, threshold: float = 0.5) -> dict[str, float]:
    """Reconstruction quality: shape-head Dice and topo-head Pearson r.

    The correlation is computed on foreground voxels only, against the
    sample's normalized distance target; per-sample values are averaged.
    """
    codec.eval()
    dscs, pearsons = [], []
    with torch.no_grad():
        for sample in samples:
            z = codec.encode(sample.input)
            if "shape" in codec.spec.heads:
                recon = codec.decode_shape(z)[0, 0].numpy()
                pred = binarize(
                    VoxelGrid(np.clip(recon, 0.0, 1.0), sample.input.spacing), threshold
                )
                gt = sample.shape_target
                inter = float(np.logical_and(pred.astype_bool(), gt.astype_bool()).sum())
                denom = pred.foreground_count + gt.foreground_count
                dscs.append(2.0 * inter / denom if denom else 1.0)
            if "topo" in codec.spec.heads:
                pred_map = codec.decode_topo(z)[0, 0].numpy()
                fg = sample.shape_target.astype_bool()
                if fg.sum() >= 2:
                    truth = sample.topo_target.values[fg]
                    if truth.std() > 0 and pred_map[fg].std() > 0:
                        pearsons.append(float(np.corrcoef(pred_map[fg], truth)[0, 1]))
                    else:
                        pearsons.append(0.0)
    out = {}
    if dscs:
        out["shape_dsc"] = float(np.mean(dscs))
    if pearsons:
        out["topo_pearson"] = float(np.mean(pearsons))
    return out
