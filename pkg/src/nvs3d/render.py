"""Orthographic depth-coded rendering of voxel grids, plus augmentation.

The grid occupies the cube [-1, 1]^3. Rays are marched front-to-back along
the view direction; a pixel stores the normalized depth of the first hit
(1 at the near end of the march, 0.2 at the far end), replicated over three
channels, with exact zeros for background.
"""

from __future__ import annotations

import math

import numpy as np

from .viewsphere import ViewSphere, Viewpoint
from .voxel import BinaryGrid

_SQRT3 = math.sqrt(3.0)
NEAR_INTENSITY = 1.0
FAR_INTENSITY = 0.2
JITTER = 0.02


def view_basis(view: Viewpoint):
    """Forward, up, right unit vectors for a camera looking at the origin."""
    f = -view.position
    z = np.array([0.0, 0.0, 1.0])
    up = z - np.dot(z, f) * f
    if np.linalg.norm(up) < 1e-8:
        x = np.array([1.0, 0.0, 0.0])
        up = x - np.dot(x, f) * f
    up = up / np.linalg.norm(up)
    right = np.cross(up, f)
    return f, up, right


def _image_half_extent(up, right):
    """Smallest half-extent whose square covers the cube's projection."""
    corners = np.array([[sx, sy, sz] for sx in (-1, 1)
                        for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return max(np.abs(corners @ right).max(), np.abs(corners @ up).max())


def render_view(grid: BinaryGrid, view: Viewpoint, size: int = 32):
    """Render one H=W=size, 3-channel float image in [0, 1]."""
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    d = grid.resolution
    occ = grid.bits
    f, up, right = view_basis(view)
    extent = _image_half_extent(up, right)

    n_steps = int(math.ceil(2 * _SQRT3 * d))
    ts = (-_SQRT3 + (np.arange(n_steps) + 0.5) * (2 * _SQRT3 / n_steps))
    along = ts[:, None] * f  # [T, 3]

    # pixel centers; row 0 is the top of the image (+up)
    coords = ((np.arange(size) + 0.5) / size * 2.0 - 1.0) * extent
    img = np.zeros((size, size), dtype=np.float32)

    chunk = max(1, min(size, 2 ** 22 // (size * n_steps)))
    for r0 in range(0, size, chunk):
        r1 = min(size, r0 + chunk)
        sy = -coords[r0:r1]  # rows grow downward
        sx = coords
        base = sy[:, None, None] * up + sx[None, :, None] * right
        pts = base[:, :, None, :] + along[None, None, :, :]  # [R,S,T,3]
        idx = np.floor((pts + 1.0) * (d / 2.0)).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < d), axis=-1)
        ix, iy, iz = idx[..., 0], idx[..., 1], idx[..., 2]
        hits = np.zeros(valid.shape, dtype=bool)
        v = valid
        hits[v] = occ[iz[v], iy[v], ix[v]]
        any_hit = hits.any(axis=-1)
        first = hits.argmax(axis=-1)
        depth = 1.0 - (ts[first] + _SQRT3) / (2 * _SQRT3)
        img[r0:r1] = np.where(any_hit,
                              FAR_INTENSITY
                              + (NEAR_INTENSITY - FAR_INTENSITY) * depth,
                              0.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2)


def render_all(grid: BinaryGrid, sphere: ViewSphere, size: int = 32):
    """One image per viewpoint, ordered by view id."""
    return [render_view(grid, v, size)
            for v in sorted(sphere, key=lambda v: v.id)]


def augment(img: np.ndarray, rng_seed: int) -> np.ndarray:
    """Random uniform background color plus clamped per-pixel jitter."""
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed)]))
    out = np.array(img, dtype=np.float32, copy=True)
    background = np.all(out == 0.0, axis=-1)
    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    out[background] = color
    jitter = rng.uniform(-JITTER, JITTER, size=out.shape).astype(np.float32)
    return np.clip(out + jitter, 0.0, 1.0)


def silhouette(img: np.ndarray) -> np.ndarray:
    """Foreground mask in the pre-augmentation sense (any nonzero channel)."""
    return np.any(np.asarray(img) != 0.0, axis=-1)


def to_ppm(img: np.ndarray) -> bytes:
    """Binary P6 portable pixmap, 8-bit."""
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    bytes8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + bytes8.tobytes()


def save_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(to_ppm(img))
