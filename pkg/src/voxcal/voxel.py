"""Binary occupancy grids built from normalized depth, and their volumes."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depth import NormalizedDepthMap


@dataclass(frozen=True)
class VoxelGrid:
    """Z x H x W occupancy; ``z = 0`` is the plane nearest the camera."""

    occupancy: np.ndarray  # bool (Z, H, W)
    cell_volume: float = 1.0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def footprint(self) -> np.ndarray:
        return self.occupancy.any(axis=0)

    def is_suffix(self) -> bool:
        """True when each column's occupied cells run unbroken to the far plane."""
        occ = self.occupancy
        # once a column turns on it stays on
        return bool(np.all(occ[1:] >= occ[:-1]))


def surface_index(values: np.ndarray, z_res: int) -> np.ndarray:
    """First occupied z per pixel, rounding half away from zero."""
    scaled = np.asarray(values, dtype=np.float64) * (z_res - 1)
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def depth_to_voxel(dbar: NormalizedDepthMap, z_res: int, cell_volume: float = 1.0) -> VoxelGrid:
    """Occupied iff ``z >= round(D(x, y) * (z_res - 1))``; invalid pixels stay empty."""
    if z_res < 2:
        raise ValueError(f"z_res must be at least 2, got {z_res}")
    first = surface_index(dbar.values, z_res)
    z = np.arange(z_res)[:, None, None]
    occ = (z >= first[None]) & dbar.valid[None]
    return VoxelGrid(occ, cell_volume)


def volume(grid: VoxelGrid) -> float:
    return float(grid.cell_volume * grid.count())


def voxel_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.dims != b.dims:
        raise ValueError(f"voxel dims differ: {a.dims} vs {b.dims}")
    union = np.count_nonzero(a.occupancy | b.occupancy)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.occupancy & b.occupancy) / union


def binarize(probs, tau: float = 0.5, cell_volume: float = 1.0) -> VoxelGrid:
    """Threshold generator probabilities; ties go to occupied."""
    probs = np.asarray(getattr(probs, "data", probs))
    if probs.ndim != 3:
        raise ValueError(f"expected Z x H x W probabilities, got {probs.shape}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if probs.size and (np.nanmin(probs) < 0.0 or np.nanmax(probs) > 1.0 or np.isnan(probs).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    return VoxelGrid(probs >= tau, cell_volume)


def save_voxels(path, grid: VoxelGrid) -> None:
    """JSON header (dims, cell_volume) then a little-endian packed bitset."""
    header = json.dumps({"dims": list(grid.dims), "cell_volume": grid.cell_volume}).encode()
    bits = np.packbits(grid.occupancy.reshape(-1), bitorder="little")
    Path(path).write_bytes(struct.pack("<I", len(header)) + header + bits.tobytes())


def load_voxels(path) -> VoxelGrid:
    buf = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", buf, 0)
    header = json.loads(buf[4 : 4 + n])
    dims = tuple(header["dims"])
    bits = np.frombuffer(buf, dtype=np.uint8, offset=4 + n)
    occ = np.unpackbits(bits, count=int(np.prod(dims)), bitorder="little").astype(bool)
    return VoxelGrid(occ.reshape(dims), float(header["cell_volume"]))
