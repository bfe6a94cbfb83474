"""Volume refinement and the energy estimate w = d * f(p, v).

``f`` is an affine map over the class probabilities and the voxel volume.  In
natural units it reads

    f(p, v) = w_p . p + w_v * v + b

but the trainable parameters live in units of ``v_scale`` (the volume of the
full voxel grid) so that inputs and outputs are O(1) during optimisation:
theta_p = w_p / v_scale, theta_v = w_v, theta_b = b / v_scale.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .gan import NumericError, generator_forward
from .nn import Module
from .optim import Adam
from .regressor import DensityRegressor, predict
from .voxel import binarize, volume

log = logging.getLogger(__name__)


class AdaptationLayer(Module):
    def __init__(self, k: int, v_scale: float = 1.0, bias: bool = True):
        if k < 1:
            raise ValueError(f"class count must be positive, got {k}")
        if not v_scale > 0:
            raise ValueError(f"v_scale must be positive, got {v_scale}")
        self.k = k
        self.v_scale = float(v_scale)
        self.use_bias = bias
        theta = np.zeros(k + 1)
        theta[k] = 1.0
        self.theta = Tensor(theta, requires_grad=True)
        self.theta_b = Tensor(np.zeros(1), requires_grad=True) if bias else None

    @classmethod
    def from_weights(cls, w_p, w_v: float, b: float = 0.0, v_scale: float = 1.0) -> "AdaptationLayer":
        w_p = np.asarray(w_p, dtype=np.float64)
        layer = cls(len(w_p), v_scale, bias=True)
        layer.theta.data = np.append(w_p / v_scale, w_v).astype(ad.DTYPE)
        layer.theta_b.data = np.array([b / v_scale], dtype=ad.DTYPE)
        return layer

    def weights(self) -> tuple[np.ndarray, float, float]:
        """Natural-unit parameters (w_p, w_v, b)."""
        t = self.theta.data.astype(np.float64)
        b = float(self.theta_b.data[0]) * self.v_scale if self.use_bias else 0.0
        return t[: self.k] * self.v_scale, float(t[self.k]), b

    def __call__(self, p, v):
        """p (N, K), v (N,) -> refined volume (N,)."""
        p = ad.as_tensor(p)
        v = np.asarray(getattr(v, "data", v))
        if p.ndim != 2 or p.shape[1] != self.k:
            raise ValueError(f"p must have shape (N, {self.k}), got {p.shape}")
        if v.shape != (p.shape[0],):
            raise ValueError(f"v must have shape ({p.shape[0]},), got {v.shape}")
        x = ad.concat([p, (v / self.v_scale).reshape(-1, 1).astype(p.data.dtype)], axis=1)
        y = ad.matmul(x, ad.reshape(self.theta, (self.k + 1, 1)))
        if self.use_bias:
            y = ad.add(y, self.theta_b)
        return ad.mul(ad.reshape(y, (p.shape[0],)), self.v_scale)


def refine_volume(layer: AdaptationLayer, p, v: float) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (layer.k,):
        raise ValueError(f"p must have length {layer.k}, got shape {p.shape}")
    if v < 0:
        raise ValueError(f"volume must be non-negative, got {v}")
    w_p, w_v, b = layer.weights()
    return float(w_p @ p + w_v * v + b)


@dataclass
class EnergyEstimate:
    sample_id: str
    p: list[float]
    v: float
    v_refined: float
    d: float
    w_kcal: float

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "p": [float(x) for x in self.p],
            "v": float(self.v),
            "v_refined": float(self.v_refined),
            "d": float(self.d),
            "w_kcal": float(self.w_kcal),
        }


def _estimate(sample_id, p, v, d, layer) -> EnergyEstimate:
    v_ref = refine_volume(layer, p, v)
    return EnergyEstimate(sample_id, [float(x) for x in p], float(v), v_ref, float(d), float(d) * v_ref)


def voxel_volumes(generator, images, cell_volume: float, tau: float = 0.5, batch_size: int = 16) -> np.ndarray:
    """Generate, binarize and measure each image's voxel volume."""
    images = np.asarray(images, dtype=ad.DTYPE)
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            probs = generator(images[i : i + batch_size]).data
            out.extend(volume(binarize(pr, tau, cell_volume)) for pr in probs)
    return np.array(out, dtype=np.float64)


def estimate_energy(
    image,
    generator,
    regressor: DensityRegressor,
    adaptation: AdaptationLayer,
    cell_volume: float,
    tau: float = 0.5,
    sample_id: str = "",
) -> EnergyEstimate:
    """RGB image -> voxels -> volume, plus class probabilities and density -> energy."""
    image = np.asarray(image, dtype=ad.DTYPE)
    grid = binarize(generator_forward(generator, image), tau, cell_volume)
    p, d = predict(regressor, image[None])
    return _estimate(sample_id, p[0], volume(grid), d[0], adaptation)


def estimate_batch(
    images, sample_ids, generator, regressor, adaptation, cell_volume, tau=0.5, batch_size: int = 1
) -> list[EnergyEstimate]:
    """Estimates for many images.

    The default batch size of one makes every estimate independent of which
    other images were submitted with it (BLAS blocking changes with N).
    """
    images = np.asarray(images, dtype=ad.DTYPE)
    v = voxel_volumes(generator, images, cell_volume, tau, batch_size)
    p, d = predict(regressor, images, batch_size)
    return [_estimate(sid, p[i], v[i], d[i], adaptation) for i, sid in enumerate(sample_ids)]


@dataclass(frozen=True)
class AdaptationConfig:
    lr: float = 1e-3
    batch_size: int = 32
    bias: bool = True


def energy_loss(layer: AdaptationLayer, p, v, d, gt, scale: float):
    """L1 between d * f(p, v) and groundtruth energy, in units of ``scale``."""
    w = ad.mul(layer(p, v), np.asarray(d))
    return ad.l1_loss(ad.mul(w, 1.0 / scale), np.asarray(gt) / scale)


def train_adaptation(
    p: np.ndarray,
    v: np.ndarray,
    d: np.ndarray,
    gt: np.ndarray,
    k: int,
    v_scale: float,
    cfg: AdaptationConfig = AdaptationConfig(),
    epochs: int = 50,
    seed: int = 0,
    log_path=None,
) -> tuple[AdaptationLayer, list[float]]:
    """Fit the refinement on precomputed (frozen) upstream outputs."""
    n = len(gt)
    if n == 0:
        raise ValueError("cannot train the adaptation layer on an empty dataset")
    p = np.asarray(p, dtype=ad.DTYPE)
    v, d, gt = (np.asarray(a, dtype=np.float64) for a in (v, d, gt))
    scale = float(np.mean(gt))
    if not scale > 0:
        raise ValueError("groundtruth energies must have a positive mean")
    layer = AdaptationLayer(k, v_scale, cfg.bias)
    opt = Adam(layer.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 5])
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            with Tape() as tape:
                loss = energy_loss(layer, p[idx], v[idx], d[idx].astype(ad.DTYPE), gt[idx], scale)
                grads = ad.backward(loss, tape)
            opt.step(grads)
            if not math.isfinite(loss.item()):
                raise NumericError("non-finite adaptation loss")
            losses.append(loss.item())
    if log_path is not None:
        _write_series(log_path, losses)
    return layer, losses


def train_joint(
    regressor: DensityRegressor,
    layer: AdaptationLayer,
    images: np.ndarray,
    labels: np.ndarray,
    densities: np.ndarray,
    v: np.ndarray,
    gt: np.ndarray,
    epochs: int,
    seed: int = 0,
    lr: float = 1e-4,
    beta: float = 1.0,
    batch_size: int = 32,
) -> list[float]:
    """Fine-tune regressor and refinement together with volumes held fixed.

    The loss is the regressor objective plus the energy L1; the generator is
    not updated because binarization passes no gradient.
    """
    n = len(gt)
    if n == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    scale = float(np.mean(gt))
    params = regressor.parameters() + layer.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng([seed, 6])
    losses = []
    regressor.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            with Tape() as tape:
                logits, d = regressor(images[idx])
                ce = ad.cross_entropy(logits, labels[idx])
                l1 = ad.l1_loss(d, densities[idx])
                w = ad.mul(layer(ad.softmax(logits, axis=1), v[idx]), d)
                e = ad.l1_loss(ad.mul(w, 1.0 / scale), (gt[idx] / scale).astype(ad.DTYPE))
                loss = ad.add(ad.add(ce, ad.mul(l1, beta)), e)
                grads = ad.backward(loss, tape)
            opt.step(grads)
            if not math.isfinite(loss.item()):
                raise NumericError("non-finite joint loss")
            losses.append(loss.item())
    regressor.eval()
    return losses


def _write_series(path, losses) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, x in enumerate(losses):
            w.writerow([i, repr(x)])


def save_adaptation(path, layer: AdaptationLayer, extra: dict | None = None) -> None:
    tensors = {"theta": layer.theta.data}
    if layer.use_bias:
        tensors["theta_b"] = layer.theta_b.data
    meta = {"kind": "adaptation", "k": layer.k, "v_scale": layer.v_scale, "bias": layer.use_bias, **(extra or {})}
    save_checkpoint(path, tensors, meta)


def load_adaptation(path) -> AdaptationLayer:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "adaptation":
        raise ValueError(f"{path} is not an adaptation checkpoint")
    layer = AdaptationLayer(meta["k"], meta["v_scale"], meta["bias"])
    layer.load_state_dict(tensors)
    return layer
