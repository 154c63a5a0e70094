"""Dense voxel occupancy grids, binarization, thresholded IoU and .vxg I/O.

Grids are cubic D x D x D arrays indexed [z, y, x] (x fastest in the flat
order). Ground truths are boolean, predictions are occupancy probabilities
in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, FormatError, InvalidThresholdError

VXG_MAGIC = b"VXG1"
DEFAULT_THRESHOLD = 0.3


def _as_cube(values, resolution, dtype):
    arr = np.asarray(values, dtype=dtype)
    d = int(resolution)
    if d <= 0:
        raise DimensionMismatchError(f"resolution must be positive, got {d}")
    if arr.size != d ** 3:
        raise DimensionMismatchError(
            f"expected {d}**3={d**3} values, got {arr.size}")
    arr = arr.reshape(d, d, d)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VoxelGrid:
    """Occupancy probabilities in [0, 1] on a cubic grid."""

    resolution: int
    values: np.ndarray

    def __post_init__(self):
        arr = _as_cube(self.values, self.resolution, np.float64
                       if np.asarray(self.values).dtype == np.float64
                       else np.float32)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class BinaryGrid:
    """Boolean occupancy on a cubic grid; produced by thresholding."""

    resolution: int
    bits: np.ndarray

    def __post_init__(self):
        arr = _as_cube(np.asarray(self.bits, dtype=bool), self.resolution, bool)
        object.__setattr__(self, "bits", arr)

    @property
    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def as_probabilities(self) -> VoxelGrid:
        return VoxelGrid(self.resolution, self.bits.astype(np.float32))


def binarize(grid: VoxelGrid, v_t: float = DEFAULT_THRESHOLD) -> BinaryGrid:
    """Strict threshold: bit is set iff value > v_t."""
    if not (0.0 < v_t < 1.0):
        raise InvalidThresholdError(f"threshold must be in (0, 1), got {v_t}")
    return BinaryGrid(grid.resolution, grid.values > v_t)


def count_and_or(a: BinaryGrid, b: BinaryGrid) -> tuple[int, int]:
    """Exact voxelwise (intersection, union) counts."""
    if a.resolution != b.resolution:
        raise DimensionMismatchError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    return inter, union


def iou(pred: VoxelGrid, truth: BinaryGrid,
        v_t: float = DEFAULT_THRESHOLD) -> float:
    """Thresholded intersection over union; empty vs empty counts as 1.0."""
    if pred.resolution != truth.resolution:
        raise DimensionMismatchError(
            f"resolution mismatch: {pred.resolution} vs {truth.resolution}")
    inter, union = count_and_or(binarize(pred, v_t), truth)
    if union == 0:
        return 1.0
    return inter / union


def binary_iou(a: BinaryGrid, b: BinaryGrid) -> float:
    inter, union = count_and_or(a, b)
    return 1.0 if union == 0 else inter / union


def grid_to_bytes(grid: VoxelGrid | BinaryGrid) -> bytes:
    """Serialize to .vxg. BinaryGrid packs bits, VoxelGrid stores f32."""
    d = grid.resolution
    if isinstance(grid, BinaryGrid):
        payload = np.packbits(grid.flat, bitorder="little").tobytes()
        flag = 0
    else:
        payload = grid.flat.astype("<f4").tobytes()
        flag = 1
    return VXG_MAGIC + struct.pack("<IB", d, flag) + payload


def grid_from_bytes(blob: bytes) -> VoxelGrid | BinaryGrid:
    if len(blob) < 9:
        raise FormatError("vxg: truncated header")
    if blob[:4] != VXG_MAGIC:
        raise FormatError("vxg: bad magic")
    d, flag = struct.unpack("<IB", blob[4:9])
    if d == 0:
        raise FormatError("vxg: zero resolution")
    n = d ** 3
    payload = blob[9:]
    if flag == 0:
        expect = (n + 7) // 8
        if len(payload) != expect:
            raise FormatError(
                f"vxg: bit payload length {len(payload)} != {expect}")
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                             bitorder="little")[:n].astype(bool)
        return BinaryGrid(d, bits)
    if flag == 1:
        if len(payload) != 4 * n:
            raise FormatError(
                f"vxg: float payload length {len(payload)} != {4 * n}")
        vals = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        return VoxelGrid(d, vals)
    raise FormatError(f"vxg: unknown flag {flag}")


def save_grid(path, grid):
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path):
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
