"""Image classifier with an energy-density head.

A small from-scratch CNN trunk (stride-2 conv, instance norm, relu blocks and
a global average pool) feeds two heads: class logits, turned into
probabilities with a softmax, and a softplus density in kCal/ml.  The same
trunk with an energy head instead of a density head is the direct-regression
baseline used in the ablation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .gan import NumericError
from .nn import Conv2d, Linear, Module, dihedral
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    resolution: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    global_pool: bool = True
    feature_width: int = 64
    num_classes: int = 4
    norm_first: bool = False  # instance norm on block 1 would erase global colour

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.feature_width < self.num_classes:
            raise ValueError(f"feature width {self.feature_width} < class count {self.num_classes}")
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        if min(self.strides) < 1:
            raise ValueError("strides must be positive")
        if self.spatial_sizes[-1] < 1:
            raise ValueError(f"resolution {self.resolution} too small for strides {self.strides}")

    @property
    def spatial_sizes(self) -> list[int]:
        sizes, s = [], self.resolution
        for st in self.strides:
            s = (s - 1) // st + 1  # k3 p1 convolution
            sizes.append(s)
        return sizes

    @property
    def trunk_width(self) -> int:
        s = self.spatial_sizes[-1]
        return self.channels[-1] * (1 if self.global_pool else s * s)


@dataclass
class RegressorOutput:
    p: np.ndarray
    d: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-5:
            raise ValueError("p must be a probability vector")
        if not self.d >= 0:
            raise ValueError(f"density must be non-negative, got {self.d}")


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = []
        cin = 3
        for i, (c, s) in enumerate(zip(cfg.channels, cfg.strides)):
            bias = i == 0 and not cfg.norm_first
            self.blocks.append(Conv2d(cin, c, 3, rng, stride=s, pad=1, bias=bias))
            cin = c
        self.proj = Linear(cfg.trunk_width, cfg.feature_width, rng, init="he")

    def __call__(self, images):
        cfg = self.cfg
        images = ad.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, cfg.resolution, cfg.resolution):
            raise ValueError(f"backbone expects (N, 3, {cfg.resolution}, {cfg.resolution}), got {images.shape}")
        h = images
        for i, conv in enumerate(self.blocks):
            h = conv(h)
            if (i > 0 or cfg.norm_first) and h.shape[-1] * h.shape[-2] > 1:
                h = ad.instance_norm(h)
            h = ad.relu(h)
        if cfg.global_pool:
            h = ad.mean(h, axis=(2, 3))
        else:
            h = ad.reshape(h, (h.shape[0], -1))
        return ad.relu(self.proj(h))


class DensityRegressor(Module):
    """Trunk plus a class head (softmax) and a density head (softplus)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.cls_head = Linear(cfg.feature_width, cfg.num_classes, rng)
        self.density_head = Linear(cfg.feature_width, 1, rng)

    def __call__(self, images):
        """(N, 3, H, W) -> (logits (N, K), density (N,))."""
        feat = self.backbone(images)
        logits = self.cls_head(feat)
        d = ad.softplus(self.density_head(feat))
        return logits, ad.reshape(d, (feat.shape[0],))


class EnergyRegressor(Module):
    """Baseline: the same trunk regressing energy directly.

    The energy head is a softplus scaled by ``scale`` (the training-set mean
    energy) so that its output starts at a sensible magnitude.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, scale: float = 1.0):
        self.cfg = cfg
        self.scale = float(scale)
        self.backbone = Backbone(cfg, rng)
        self.cls_head = Linear(cfg.feature_width, cfg.num_classes, rng)
        self.energy_head = Linear(cfg.feature_width, 1, rng)

    def __call__(self, images):
        feat = self.backbone(images)
        logits = self.cls_head(feat)
        e = ad.mul(ad.softplus(self.energy_head(feat)), self.scale)
        return logits, ad.reshape(e, (feat.shape[0],))


def regressor_forward(model: DensityRegressor, image) -> RegressorOutput:
    """Single image (3, H, W) -> class probabilities and density."""
    image = np.asarray(getattr(image, "data", image), dtype=ad.DTYPE)
    if image.ndim != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    p, d = predict(model, image[None])
    return RegressorOutput(p[0], float(d[0]))


def predict(model, images, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batched inference: probabilities (N, K) and the scalar head (N,)."""
    images = np.asarray(images, dtype=ad.DTYPE)
    ps, ds = [], []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            logits, d = model(images[i : i + batch_size])
            ps.append(ad.softmax(logits, axis=1).data.astype(np.float64))
            ds.append(d.data.astype(np.float64))
    return np.concatenate(ps), np.concatenate(ds)


def regressor_loss(model: DensityRegressor, images, labels, densities, beta: float = 1.0):
    """cross_entropy(p, label) + beta * L1(d, density); returns (total, ce, l1)."""
    logits, d = model(images)
    ce = ad.cross_entropy(logits, labels)
    l1 = ad.l1_loss(d, np.asarray(densities, dtype=d.data.dtype))
    return ad.add(ce, ad.mul(l1, beta)), ce, l1


def baseline_loss(model: EnergyRegressor, images, labels, energies):
    """cross_entropy + L1 on energies measured in units of the model scale."""
    logits, e = model(images)
    ce = ad.cross_entropy(logits, labels)
    l1 = ad.l1_loss(ad.mul(e, 1.0 / model.scale), np.asarray(energies, e.data.dtype) / model.scale)
    return ad.add(ce, l1), ce, l1


@dataclass(frozen=True)
class RegressorTrainConfig:
    backbone: BackboneConfig = BackboneConfig()
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    augment: bool = True


@dataclass
class LossRow:
    iteration: int
    epoch: int
    total: float
    ce: float
    l1: float


@dataclass
class TrainResult:
    model: Module
    losses: list[LossRow]


def _check_labels(samples, k: int) -> np.ndarray:
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    labels = np.array([s.class_id for s in samples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class label out of range for K={k}: {labels.max()}")
    return labels


def _fit(model, loss_fn, images, labels, targets, cfg, epochs, seed, log_path):
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 2])
    losses: list[LossRow] = []
    it = 0
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            x = dihedral(images[idx], int(rng.integers(8))) if cfg.augment else images[idx]
            with Tape() as tape:
                total, ce, l1 = loss_fn(model, x, labels[idx], targets[idx])
                grads = ad.backward(total, tape)
            opt.step(grads)
            row = LossRow(it, epoch, total.item(), ce.item(), l1.item())
            if not math.isfinite(row.total):
                raise NumericError(f"non-finite regressor loss at iteration {it}")
            losses.append(row)
            it += 1
        if losses:
            log.info("regressor epoch %d: ce %.4f l1 %.4f", epoch, losses[-1].ce, losses[-1].l1)
    model.eval()
    if log_path is not None:
        write_losses(log_path, losses)
    return losses


def train_regressor(
    samples,
    cfg: RegressorTrainConfig = RegressorTrainConfig(),
    epochs: int = 50,
    seed: int = 0,
    ckpt_path=None,
    log_path=None,
) -> TrainResult:
    """Adam on cross entropy + beta * L1 density over ``samples``."""
    labels = _check_labels(samples, cfg.backbone.num_classes)
    model = DensityRegressor(cfg.backbone, np.random.default_rng([seed, 3]))
    images = np.stack([s.rgb for s in samples]).astype(ad.DTYPE)
    dens = np.array([s.density for s in samples], dtype=ad.DTYPE)

    def loss_fn(m, x, y, t):
        return regressor_loss(m, x, y, t, cfg.beta)

    losses = _fit(model, loss_fn, images, labels, dens, cfg, epochs, seed, log_path)
    if ckpt_path is not None:
        save_regressor(ckpt_path, model, {"seed": seed, "epochs": epochs, "beta": cfg.beta, "lr": cfg.lr})
    return TrainResult(model, losses)


def train_baseline(
    samples,
    cfg: RegressorTrainConfig = RegressorTrainConfig(),
    epochs: int = 50,
    seed: int = 0,
    ckpt_path=None,
    log_path=None,
) -> TrainResult:
    """Train the direct energy regressor (same trunk, energy head)."""
    labels = _check_labels(samples, cfg.backbone.num_classes)
    energies = np.array([s.energy for s in samples], dtype=ad.DTYPE)
    scale = float(energies.mean())
    if not scale > 0:
        raise ValueError("training energies must have a positive mean")
    model = EnergyRegressor(cfg.backbone, np.random.default_rng([seed, 4]), scale)
    images = np.stack([s.rgb for s in samples]).astype(ad.DTYPE)
    losses = _fit(model, baseline_loss, images, labels, energies, cfg, epochs, seed, log_path)
    if ckpt_path is not None:
        save_regressor(ckpt_path, model, {"seed": seed, "epochs": epochs, "lr": cfg.lr})
    return TrainResult(model, losses)


def write_losses(path, losses: list[LossRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "epoch", "total", "ce", "l1"])
        for r in losses:
            w.writerow([r.iteration, r.epoch, repr(r.total), repr(r.ce), repr(r.l1)])


def save_regressor(path, model, extra: dict | None = None) -> None:
    kind = "baseline" if isinstance(model, EnergyRegressor) else "regressor"
    meta = {"kind": kind, "backbone": asdict(model.cfg), **(extra or {})}
    if kind == "baseline":
        meta["scale"] = model.scale
    save_checkpoint(path, model.state_dict(), meta)


def load_regressor(path, kind: str = "regressor"):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise ValueError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    cfg = BackboneConfig(**meta["backbone"])
    rng = np.random.default_rng(0)
    model = EnergyRegressor(cfg, rng, meta["scale"]) if kind == "baseline" else DensityRegressor(cfg, rng)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
