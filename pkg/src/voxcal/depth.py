"""Depth post-processing: hole filling, food masking and normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .netpbm import read_pnm, write_pgm

MISSING = 0
U16_MAX = 65535


@dataclass(frozen=True)
class RawDepthMap:
    """u16 depth image; 0 marks a missing reading.

    A stored value ``q`` encodes the physical depth ``near + (far - near) * q / 65535``.
    """

    values: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got {self.values.shape}")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got near={self.near} far={self.far}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return self.values == MISSING

    def physical(self) -> np.ndarray:
        """Depth in physical units; NaN where missing."""
        phys = self.near + (self.far - self.near) * self.values.astype(np.float64) / U16_MAX
        return np.where(self.missing, np.nan, phys)

    @classmethod
    def from_physical(cls, depth: np.ndarray, near: float, far: float) -> "RawDepthMap":
        q = np.floor((np.asarray(depth, np.float64) - near) / (far - near) * U16_MAX + 0.5)
        q = np.clip(q, 1, U16_MAX)
        return cls(q.astype(np.uint16), near, far)


@dataclass(frozen=True)
class NormalizedDepthMap:
    values: np.ndarray  # float32 in [0, 1]; 0 = near plane, 1 = far/plate plane
    valid: np.ndarray  # bool, True where the pixel is food carrying depth
    near: float
    far: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _neighbour_stats(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum and count of valid 8-neighbours for every pixel."""
    v = np.pad(np.where(valid, values, 0.0), 1)
    m = np.pad(valid.astype(np.int64), 1)
    h, w = values.shape
    total = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            total += v[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            count += m[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return total, count


def inpaint_dilate(raw: RawDepthMap, max_iters: int = 256) -> RawDepthMap:
    """Fill missing pixels by iterated mean-of-valid-8-neighbours dilation.

    Each sweep fills every hole that touches at least one valid pixel, using
    only values valid at the start of the sweep.  Means round half up.
    """
    values = raw.values.astype(np.float64)
    valid = ~raw.missing
    if not valid.any():
        raise ValueError("depth map has no valid pixels to inpaint from")
    for _ in range(max_iters):
        holes = ~valid
        if not holes.any():
            break
        total, count = _neighbour_stats(values, valid)
        fill = holes & (count > 0)
        values[fill] = np.floor(total[fill] / count[fill] + 0.5)
        valid = valid | fill
    remaining = int((~valid).sum())
    if remaining:
        raise RuntimeError(f"{remaining} holes remain after {max_iters} dilation iterations")
    return replace(raw, values=values.astype(np.uint16))


def apply_mask(depth: RawDepthMap, mask: np.ndarray) -> tuple[RawDepthMap, np.ndarray]:
    """Attach a food mask; non-food pixels are carried as invalid downstream."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != depth.values.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth shape {depth.values.shape}")
    if not mask.any():
        raise ValueError("segmentation mask contains no food pixels")
    return depth, mask


def normalize(depth: RawDepthMap, mask: np.ndarray) -> NormalizedDepthMap:
    if not depth.near < depth.far:
        raise ValueError(f"need near < far, got near={depth.near} far={depth.far}")
    valid = np.asarray(mask).astype(bool) & ~depth.missing
    phys = depth.physical()
    norm = np.clip((phys - depth.near) / (depth.far - depth.near), 0.0, 1.0)
    norm = np.where(valid, norm, 0.0).astype(np.float32)
    return NormalizedDepthMap(norm, valid, depth.near, depth.far)


def denormalize(dbar: NormalizedDepthMap) -> RawDepthMap:
    phys = dbar.near + (dbar.far - dbar.near) * dbar.values.astype(np.float64)
    raw = RawDepthMap.from_physical(phys, dbar.near, dbar.far)
    return replace(raw, values=np.where(dbar.valid, raw.values, MISSING).astype(np.uint16))


def postprocess(raw: RawDepthMap, mask: np.ndarray, max_iters: int = 256) -> NormalizedDepthMap:
    """inpaint -> mask -> normalize, the full route from D to D-bar."""
    filled = inpaint_dilate(raw, max_iters)
    masked, mask = apply_mask(filled, mask)
    return normalize(masked, mask)


def threshold_mask(rgb: np.ndarray, min_saturation: float = 0.12) -> np.ndarray:
    """Colour-saturation food mask for images without a groundtruth mask.

    ``rgb`` is (H, W, 3) or (3, H, W) in [0, 1].  Plates and tables are assumed
    near-grey, so any clearly coloured pixel counts as food.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[0] == 3 and rgb.shape[-1] != 3:
        rgb = np.moveaxis(rgb, 0, -1)
    sat = rgb.max(axis=-1) - rgb.min(axis=-1)
    return sat >= min_saturation


def read_depth_pgm(path, near: float, far: float) -> RawDepthMap:
    values = read_pnm(path)
    if values.dtype != np.uint16:
        raise ValueError(f"{path}: expected a 16-bit PGM")
    return RawDepthMap(values, near, far)


def write_depth_pgm(path, depth: RawDepthMap) -> None:
    write_pgm(path, depth.values.astype(np.uint16))


def read_mask_pgm(path) -> np.ndarray:
    return read_pnm(path) > 127


def write_mask_pgm(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8))


def save_normalized(path, dbar: NormalizedDepthMap) -> None:
    """Little-endian f32 raster (invalid pixels stored as NaN) plus a JSON sidecar."""
    path = Path(path)
    data = np.where(dbar.valid, dbar.values, np.nan).astype("<f4")
    path.write_bytes(data.tobytes())
    sidecar = {"near": dbar.near, "far": dbar.far, "height": dbar.shape[0], "width": dbar.shape[1]}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2))


def load_normalized(path) -> NormalizedDepthMap:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["height"], meta["width"])
    valid = ~np.isnan(data)
    return NormalizedDepthMap(
        np.where(valid, data, 0.0).astype(np.float32), valid, meta["near"], meta["far"]
    )
