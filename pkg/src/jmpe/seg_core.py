"""Residual-UNet segmenter, the segmentation loss, and prior regularization.

The training objective is a class-balanced binary cross-entropy plus a
Dice loss. Prior variants add one or more latent-alignment penalties: the
prediction and the ground-truth mask are pushed toward the same projected
latent code of a frozen prior codec, measured by cosine distance. The
five ablation variants differ only in which codecs and strengths apply:

  baseline     no penalty
  shape        single shape codec, strength lam_s
  topo         single topo codec, strength lam_t
  shape+topo   both single-prior codecs, strengths lam_s and lam_t
  jmpe         one dual-head codec, strength lam
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentSpec, augment
from .data import load_manifest, load_pair
from .grids import BinaryMask, SoftMask, VoxelGrid
from .prior_nets import LossWeights, PriorCodec, _as_batch, voxel_weights

__all__ = [
    "SegModelSpec",
    "ResUNet",
    "VariantSpec",
    "VARIANT_NAMES",
    "segment",
    "seg_loss",
    "reg_term",
    "loss_terms",
    "total_loss",
    "SegTrainConfig",
    "train_segmenter",
]

log = logging.getLogger(__name__)

VARIANT_NAMES = ("baseline", "shape", "topo", "shape+topo", "jmpe")

_BCE_CLAMP = 1e-7
_DICE_EPS = 1e-5
_COSINE_EPS = 1e-8


@dataclass(frozen=True)
class SegModelSpec:
    levels: int = 4
    base_features: int = 16
    residual_blocks_per_level: int = 2

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_features < 1 or self.residual_blocks_per_level < 1:
            raise ValueError("base_features and residual_blocks_per_level must be >= 1")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(channels, affine=True)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(channels, affine=True)
        self.act = nn.LeakyReLU(0.1, inplace=True)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(x + h)


class ResUNet(nn.Module):
    """Residual encoder-decoder with additive skip connections; emits logits."""

    def __init__(self, spec: SegModelSpec = SegModelSpec()):
        super().__init__()
        self.spec = spec
        chans = [spec.base_features * 2**i for i in range(spec.levels)]
        blocks = spec.residual_blocks_per_level
        self.stem = nn.Conv3d(1, chans[0], 3, padding=1)
        self.enc = nn.ModuleList(
            nn.Sequential(*[_ResBlock(c) for _ in range(blocks)]) for c in chans
        )
        self.down = nn.ModuleList(
            nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(spec.levels - 1)
        )
        self.up = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv3d(chans[i], chans[i - 1], 3, padding=1),
            )
            for i in range(spec.levels - 1, 0, -1)
        )
        self.dec = nn.ModuleList(
            nn.Sequential(*[_ResBlock(chans[i - 1]) for _ in range(blocks)])
            for i in range(spec.levels - 1, 0, -1)
        )
        self.head = nn.Conv3d(chans[0], 1, 1)

    def check_divisible(self, spatial_shape) -> None:
        factor = self.spec.downsample_factor
        for axis, size in enumerate(spatial_shape):
            if size % factor:
                raise ValueError(
                    f"axis {axis} has size {size}, not divisible by {factor} as "
                    f"required by a {self.spec.levels}-level segmenter"
                )

    def forward(self, x):
        self.check_divisible(x.shape[2:])
        h = self.stem(x)
        skips = []
        for i, enc in enumerate(self.enc):
            h = enc(h)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(up(h) + skip)
        return self.head(h)


def segment(model: ResUNet, image: VoxelGrid) -> SoftMask:
    """Probability volume with the input's geometry."""
    model.eval()
    with torch.no_grad():
        logits = model(_as_batch(image))
        probs = torch.sigmoid(logits)[0, 0].numpy()
    return SoftMask(np.clip(probs, 0.0, 1.0).astype(np.float32), image.spacing)


def seg_loss(pred, target) -> torch.Tensor:
    """Class-balanced BCE plus Dice loss, averaged over batch elements."""
    pred_t = _as_batch(pred, "pred")
    target_t = _as_batch(target, "target").to(pred_t.dtype)
    if pred_t.shape != target_t.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_t.shape)} vs {tuple(target_t.shape)}")
    losses = []
    for b in range(pred_t.shape[0]):
        p = pred_t[b].clamp(_BCE_CLAMP, 1.0 - _BCE_CLAMP)
        y = target_t[b]
        w = voxel_weights(y)
        bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
        wbce = (w * bce).sum() / y.numel()
        inter = (pred_t[b] * y).sum()
        dice = 1.0 - (2.0 * inter + _DICE_EPS) / (pred_t[b].sum() + y.sum() + _DICE_EPS)
        losses.append(wbce + dice)
    return torch.stack([loss.reshape(()) for loss in losses]).mean()


def _flat_codes(codec: PriorCodec, x) -> torch.Tensor:
    """Projected latent codes flattened per batch element, in float64."""
    z = codec.encode(x)
    proj = codec.project_latent(z)
    return proj.reshape(proj.shape[0], -1).double()


def _cosine_penalty(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """1 - cos(u, v) per row, averaged; the epsilon guards zero norms."""
    norms = u.norm(dim=1) * v.norm(dim=1)
    if bool((norms == 0).any()):
        log.warning("zero-norm projected code in regularization term; epsilon guard active")
    cos = (u * v).sum(dim=1) / (norms + _COSINE_EPS)
    return (1.0 - cos).mean()


def reg_term(codec: PriorCodec, y, y_hat) -> torch.Tensor:
    """Cosine distance between the projected codes of target and prediction.

    Differentiable in the prediction; the codec never receives gradient
    updates (its parameters are frozen by the variant container).
    """
    with torch.no_grad():
        u = _flat_codes(codec, y)
    v = _flat_codes(codec, y_hat)
    return _cosine_penalty(u, v)


@dataclass(frozen=True)
class VariantSpec:
    """One ablation arm: which codecs regularize the segmenter, how strongly."""

    name: str
    codecs: Mapping[str, PriorCodec] = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {self.name!r}, expected one of {VARIANT_NAMES}")
        expected = {
            "baseline": {},
            "shape": {"shape": ("shape",)},
            "topo": {"topo": ("topo",)},
            "shape+topo": {"shape": ("shape",), "topo": ("topo",)},
            "jmpe": {"jmpe": ("shape", "topo")},
        }[self.name]
        if set(self.codecs) != set(expected):
            raise ValueError(
                f"variant {self.name!r} needs codecs {sorted(expected)}, "
                f"got {sorted(self.codecs)}"
            )
        for key, heads in expected.items():
            if self.codecs[key].spec.heads != heads:
                raise ValueError(
                    f"codec {key!r} must have heads {heads}, "
                    f"got {self.codecs[key].spec.heads}"
                )
        for codec in self.codecs.values():
            codec.eval()
            for p in codec.parameters():
                p.requires_grad_(False)


def loss_terms(variant: VariantSpec, y, y_hat) -> dict:
    """All loss components for one batch; inactive penalties are 0.0."""
    terms: dict = {"l_phi": seg_loss(y_hat, y), "l_reg_s": 0.0, "l_reg_t": 0.0,
                   "l_reg_jmpe": 0.0}
    w = variant.weights
    total = terms["l_phi"]
    if variant.name in ("shape", "shape+topo"):
        terms["l_reg_s"] = reg_term(variant.codecs["shape"], y, y_hat)
        total = total + w.lam_s * terms["l_reg_s"]
    if variant.name in ("topo", "shape+topo"):
        terms["l_reg_t"] = reg_term(variant.codecs["topo"], y, y_hat)
        total = total + w.lam_t * terms["l_reg_t"]
    if variant.name == "jmpe":
        terms["l_reg_jmpe"] = reg_term(variant.codecs["jmpe"], y, y_hat)
        total = total + w.lam * terms["l_reg_jmpe"]
    terms["l_t"] = total
    return terms


def total_loss(variant: VariantSpec, y, y_hat) -> torch.Tensor:
    """Segmentation loss plus the variant's weighted regularization penalties."""
    return loss_terms(variant, y, y_hat)["l_t"]


@dataclass
class SegTrainConfig:
    model: SegModelSpec = field(default_factory=SegModelSpec)
    epochs: int = 1500
    lr: float = 3e-4
    batch_size: int = 2
    weights_seed: int = 1
    shuffle_seed: int = 2
    augment_seed: int = 3
    threshold: float = 0.5
    augment: AugmentSpec | None = None


def _binary_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = float(np.logical_and(pred, gt).sum())
    denom = float(pred.sum() + gt.sum())
    return 2.0 * inter / denom if denom else 1.0


def train_segmenter(variant: VariantSpec, manifest_path, train_ids, val_ids,
                    config: SegTrainConfig):
    """Train one segmenter for a variant; returns (model, per-epoch log rows).

    The returned model carries the parameters of the epoch with the best
    validation Dice. Codec parameters are frozen throughout; with
    augmentation disabled, ground-truth latent codes are precomputed once.
    """
    entries = {e.id: e for e in load_manifest(manifest_path)}
    missing = [i for i in (*train_ids, *val_ids) if i not in entries]
    if missing:
        raise ValueError(f"sample ids not in manifest: {missing}")
    train_pairs = [load_pair(entries[i]) for i in train_ids]
    val_pairs = [load_pair(entries[i]) for i in val_ids]
    if not train_pairs or not val_pairs:
        raise ValueError("both train and validation splits must be nonempty")

    torch.manual_seed(config.weights_seed)
    model = ResUNet(config.model)
    model.check_divisible(train_pairs[0][0].shape)
    for codec in variant.codecs.values():
        codec.check_divisible(train_pairs[0][0].shape)

    images = torch.stack([torch.as_tensor(img.values.copy()) for img, _ in train_pairs]).unsqueeze(1)
    masks = torch.stack([torch.as_tensor(msk.values.copy()) for _, msk in train_pairs]).unsqueeze(1)

    gt_codes: dict[str, torch.Tensor] | None = None
    if config.augment is None and variant.codecs:
        with torch.no_grad():
            gt_codes = {key: _flat_codes(codec, masks)
                        for key, codec in variant.codecs.items()}

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng(config.shuffle_seed)
    best_dsc = -1.0
    best_state = copy.deepcopy(model.state_dict())
    rows = []
    term_keys = ("l_phi", "l_reg_s", "l_reg_t", "l_reg_jmpe", "l_t")
    for epoch in range(config.epochs):
        model.train()
        perm = shuffle_rng.permutation(len(train_pairs))
        sums = dict.fromkeys(term_keys, 0.0)
        seen = 0
        for lo in range(0, len(perm), config.batch_size):
            batch_idx = perm[lo:lo + config.batch_size]
            if config.augment is not None:
                x_list, y_list = [], []
                for idx in batch_idx:
                    img, msk = train_pairs[idx]
                    rng = np.random.default_rng([config.augment_seed, epoch, int(idx)])
                    img_a, msk_a = augment(img, msk, rng, config.augment)
                    if msk_a.foreground_count in (0, msk_a.values.size):
                        img_a, msk_a = img, msk  # keep both classes present
                    x_list.append(torch.as_tensor(img_a.values.copy()))
                    y_list.append(torch.as_tensor(msk_a.values.copy()))
                x = torch.stack(x_list).unsqueeze(1)
                y = torch.stack(y_list).unsqueeze(1)
            else:
                x = images[batch_idx]
                y = masks[batch_idx]
            y_hat = torch.sigmoid(model(x))
            terms: dict = {"l_phi": seg_loss(y_hat, y), "l_reg_s": 0.0, "l_reg_t": 0.0,
                           "l_reg_jmpe": 0.0}
            total = terms["l_phi"]
            for key, codec in variant.codecs.items():
                if gt_codes is not None:
                    u = gt_codes[key][batch_idx]
                    penalty = _cosine_penalty(u, _flat_codes(codec, y_hat))
                else:
                    penalty = reg_term(codec, y, y_hat)
                slot = {"shape": "l_reg_s", "topo": "l_reg_t", "jmpe": "l_reg_jmpe"}[key]
                terms[slot] = penalty
                lam = {"shape": variant.weights.lam_s, "topo": variant.weights.lam_t,
                       "jmpe": variant.weights.lam}[key]
                total = total + lam * penalty
            terms["l_t"] = total
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for key in term_keys:
                value = terms[key]
                sums[key] += float(value.detach() if isinstance(value, torch.Tensor) else value) * len(batch_idx)
            seen += len(batch_idx)
        means = {key: sums[key] / seen for key in term_keys}
        if not all(math.isfinite(v) for v in means.values()):
            raise RuntimeError(f"segmentation training diverged (non-finite loss) at epoch {epoch}")

        model.eval()
        with torch.no_grad():
            dscs = []
            for img, msk in val_pairs:
                probs = torch.sigmoid(model(_as_batch(img)))[0, 0].numpy()
                dscs.append(_binary_dice(probs >= config.threshold, msk.astype_bool()))
        val_dsc = float(np.mean(dscs))
        rows.append({"epoch": epoch, **means, "val_dsc": val_dsc})
        if val_dsc > best_dsc:
            best_dsc = val_dsc
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, rows
