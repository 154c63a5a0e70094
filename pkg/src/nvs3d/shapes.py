"""Procedural toy object classes and dataset persistence.

Five classes with deliberately view-dependent structure. Each class pairs a
fixed, recognizable body with a random detail field that hides inside the
silhouette: blocky top relief on planes and tables (readable only from
overhead depth maps) and walled wells drilled into one vertical face on
chairs, towers and L-shapes (readable only from views facing that side).
Which second view resolves the detail therefore depends on the class.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .voxel import BinaryGrid, load_grid, save_grid

CLASS_NAMES = ("plane", "chair", "table", "tower", "lshape")

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def is_connected(occ: np.ndarray) -> bool:
    if not occ.any():
        return False
    _, n = ndimage.label(occ, structure=_SIX_CONN)
    return n == 1


def _box(occ, z0, z1, y0, y1, x0, x1):
    d = occ.shape[0]
    occ[max(z0, 0):min(z1, d), max(y0, 0):min(y1, d),
        max(x0, 0):min(x1, d)] = True


def _scaled(d, frac):
    return max(1, int(round(d * frac)))


def _cell(lo, span, n, i):
    """Bounds of cell i when span is split into n near-equal cells."""
    return lo + (i * span) // n, lo + ((i + 1) * span) // n


def _shadow_box(occ, mask, axis, f0, f1, a0, a1, b0, b1):
    """Extruded picture frame with random full-depth interior columns.

    Fills the 1-voxel border of the patch [a0:a1] x [b0:b1] over the whole
    extrusion span [f0:f1] along `axis`, then fills entire interior cells
    where mask is set. The fixed frame keeps the silhouette constant and
    shadows oblique rays, so the interior pattern reads only from views
    facing the open side of the box.
    """
    sub = np.moveaxis(occ, axis, 0)[f0:f1]
    sub[:, a0:a1, b0] = True
    sub[:, a0:a1, b1 - 1] = True
    sub[:, a0, b0:b1] = True
    sub[:, a1 - 1, b0:b1] = True
    na, nb = mask.shape
    for i in range(na):
        for j in range(nb):
            if mask[i, j]:
                c0, c1 = _cell(a0 + 1, a1 - a0 - 2, na, i)
                e0, e1 = _cell(b0 + 1, b1 - b0 - 2, nb, j)
                sub[:, c0:c1, e0:e1] = True


def _gen_plane(rng, d):
    """Mid-height slab topped by an upward shadow box; the random column
    pattern reads only from overhead views."""
    occ = np.zeros((d, d, d), dtype=bool)
    m = max(1, d // 8)
    t = max(2, d // 8)
    e = max(2, 5 * d // 16)
    z0 = d // 2 - t
    _box(occ, z0, z0 + t, m, d - m, m, d - m)
    mask = rng.integers(0, 2, size=(2, 2))
    _shadow_box(occ, mask, 0, z0 + t, z0 + t + e, m, d - m, m, d - m)
    return occ


def _gen_chair(rng, d):
    """Full-height back slab plus seat, with a forward (+x) shadow box on
    the back; the random pattern reads only from views facing the chair."""
    occ = np.zeros((d, d, d), dtype=bool)
    m = max(1, d // 8)
    tb = max(2, d // 6)
    t = max(2, d // 8)
    e = max(2, 5 * d // 16)
    _box(occ, 0, d - m, m, d - m, m, m + tb)
    seat_z = d // 4
    _box(occ, seat_z, seat_z + t, m, d - m, m + tb, d - m)
    mask = rng.integers(0, 2, size=(2, 2))
    _shadow_box(occ, mask, 2, m + tb, m + tb + e, seat_z + t, d - m, m, d - m)
    return occ


def _gen_table(rng, d):
    """Pedestal with an elevated slab topped by an upward shadow box; the
    random pattern reads only from overhead views."""
    occ = np.zeros((d, d, d), dtype=bool)
    m = max(1, d // 8)
    t = max(2, d // 8)
    e = max(2, 5 * d // 16)
    z0 = d - 1 - t - e
    _box(occ, z0, z0 + t, m, d - m, m, d - m)
    ped = max(2, d // 4)
    c = d // 2
    _box(occ, 0, z0, c - ped // 2, c + (ped + 1) // 2,
         c - ped // 2, c + (ped + 1) // 2)
    mask = rng.integers(0, 2, size=(2, 2))
    _shadow_box(occ, mask, 0, z0 + t, z0 + t + e, m, d - m, m, d - m)
    return occ


def _gen_tower(rng, d):
    """Fat column on a base plate with a sideways (+y) shadow box; the
    random pattern reads only from views facing that side."""
    occ = np.zeros((d, d, d), dtype=bool)
    m = max(1, d // 8)
    e = max(2, 5 * d // 16)
    cw = max(3, d // 2)
    cd = max(2, d // 4)
    x0 = d // 2 - cw // 2
    y0 = d // 2 - cd - e // 2
    _box(occ, 0, d - 1, y0, y0 + cd, x0, x0 + cw)
    base_h = max(2, d // 6)
    _box(occ, 0, base_h, max(1, y0 - 1), min(d - 1, y0 + cd + 1),
         max(1, x0 - 1), min(d - 1, x0 + cw + 1))
    mask = rng.integers(0, 2, size=(2, 2))
    _shadow_box(occ, mask, 1, y0 + cd, y0 + cd + e, base_h, d - 1,
                x0, x0 + cw)
    return occ


def _gen_lshape(rng, d):
    """Thick upright L (arm plus foot along +x) with a forward (+x) shadow
    box on the arm; the random pattern reads only from views facing the L."""
    occ = np.zeros((d, d, d), dtype=bool)
    m = max(1, d // 8)
    ta = max(2, d // 6)
    ty = max(3, 3 * d // 8)
    e = max(2, 5 * d // 16)
    yc = d // 2 - ty // 2
    _box(occ, 0, d - m, yc, yc + ty, m, m + ta)
    foot_h = max(2, d // 4)
    _box(occ, 0, foot_h, yc, yc + ty, m, d - m)
    mask = rng.integers(0, 2, size=(2, 1))
    _shadow_box(occ, mask, 2, m + ta, m + ta + e, foot_h, d - m, yc, yc + ty)
    return occ


_GENERATORS = {
    "plane": _gen_plane,
    "chair": _gen_chair,
    "table": _gen_table,
    "tower": _gen_tower,
    "lshape": _gen_lshape,
}

MIN_FILL = 0.01
MAX_FILL = 0.6
MAX_RETRIES = 100


def generate_shape(class_name: str, seed: int,
                   resolution: int = 16) -> BinaryGrid:
    """Deterministic in (class, seed, resolution); connected, fill in bounds."""
    if class_name not in _GENERATORS:
        raise ConfigError(f"unknown shape class {class_name!r}")
    gen = _GENERATORS[class_name]
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), attempt]))
        occ = gen(rng, resolution)
        fill = occ.mean()
        if MIN_FILL <= fill <= MAX_FILL and is_connected(occ):
            return BinaryGrid(resolution, occ)
    raise GenerationError(
        f"could not generate a valid {class_name} after {MAX_RETRIES} tries")


@dataclass
class Sample:
    sample_id: str
    class_name: str
    seed: int
    split: str
    truth: BinaryGrid
    views: list = field(default=None, repr=False)


@dataclass(frozen=True)
class DatasetConfig:
    out_dir: str
    samples_per_class: int = 40
    classes: tuple = CLASS_NAMES
    split_ratio: float = 0.8
    seed: int = 0
    resolution: int = 16

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigError("split_ratio must be in (0, 1]")


def _sample_seed(master: int, class_idx: int, idx: int) -> int:
    seq = np.random.SeedSequence([int(master), class_idx, idx])
    return int(seq.generate_state(1)[0])


def build_dataset(cfg: DatasetConfig) -> str:
    """Generate grids and a manifest; returns the manifest path."""
    grids_dir = os.path.join(cfg.out_dir, "grids")
    os.makedirs(grids_dir, exist_ok=True)
    rows = []
    for ci, cls in enumerate(cfg.classes):
        n = cfg.samples_per_class
        n_train = int(round(n * cfg.split_ratio))
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, ci, 0x73706C])).permutation(n)
        split = {int(j): ("train" if rank < n_train else "test")
                 for rank, j in enumerate(order)}
        for i in range(n):
            seed = _sample_seed(cfg.seed, ci, i)
            grid = generate_shape(cls, seed, cfg.resolution)
            sample_id = f"{cls}_{i:04d}"
            rel = os.path.join("grids", f"{sample_id}.vxg")
            save_grid(os.path.join(cfg.out_dir, rel), grid)
            rows.append({"sample_id": sample_id, "class": cls,
                         "seed": seed, "split": split[i], "grid_path": rel})
    manifest = {"dataset_seed": cfg.seed, "resolution": cfg.resolution,
                "samples": rows}
    path = os.path.join(cfg.out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("dataset_seed", "resolution", "samples"):
        if key not in manifest:
            raise ConfigError(f"manifest missing key {key!r}")
    return manifest


def load_samples(manifest_path: str, split: str | None = None) -> list[Sample]:
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for row in manifest["samples"]:
        if split is not None and row["split"] != split:
            continue
        grid = load_grid(os.path.join(base, row["grid_path"]))
        if not isinstance(grid, BinaryGrid):
            raise ConfigError(
                f"ground truth {row['grid_path']} is not a binary grid")
        out.append(Sample(row["sample_id"], row["class"], row["seed"],
                          row["split"], grid))
    return out
