"""Camera positions on the unit view sphere and selection geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoAvailableViewError, UnknownViewError

NUM_VIEWS = 11

# (elevation_deg, azimuths_deg) rings of the default layout. Antipodes of the
# +60/+30 rings would sit on the dropped -60/-30 rings; the equator ring is
# halved so no two equatorial views oppose each other.
_CANONICAL_RINGS = (
    (60.0, (0.0, 120.0, 240.0)),
    (30.0, (0.0, 90.0, 180.0, 270.0)),
    (0.0, (0.0, 45.0, 90.0, 135.0)),
)


def direction(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    e = math.radians(elevation_deg)
    a = math.radians(azimuth_deg)
    return np.array([math.cos(e) * math.cos(a),
                     math.cos(e) * math.sin(a),
                     math.sin(e)], dtype=np.float64)


@dataclass(frozen=True)
class Viewpoint:
    id: int
    elevation_deg: float
    azimuth_deg: float
    position: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (-90.0 <= self.elevation_deg <= 90.0):
            raise ConfigError(f"elevation {self.elevation_deg} out of range")
        pos = direction(self.elevation_deg, self.azimuth_deg % 360.0)
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class ViewSphere:
    views: tuple[Viewpoint, ...]

    def __post_init__(self):
        views = tuple(self.views)
        ids = [v.id for v in views]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate viewpoint ids")
        for v in views:
            if abs(abs(v.elevation_deg) - 90.0) < 1e-9:
                raise ConfigError("polar viewpoints are not allowed")
        for i, a in enumerate(views):
            for b in views[i + 1:]:
                if np.linalg.norm(a.position + b.position) < 1e-9:
                    raise ConfigError(
                        f"views {a.id} and {b.id} are antipodal")
        object.__setattr__(self, "views", views)

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def by_id(self, view_id: int) -> Viewpoint:
        for v in self.views:
            if v.id == view_id:
                return v
        raise UnknownViewError(f"no view with id {view_id}")

    def __contains__(self, view: Viewpoint) -> bool:
        return any(v.id == view.id for v in self.views)


def canonical_sphere() -> ViewSphere:
    """Default 11-view layout: 3 at elev 60, 4 at elev 30, 4 on the equator."""
    views = []
    for elev, azims in _CANONICAL_RINGS:
        for az in azims:
            views.append(Viewpoint(len(views), elev, az))
    return ViewSphere(tuple(views))


def chord_distance(a: Viewpoint, b: Viewpoint) -> float:
    return float(np.linalg.norm(a.position - b.position))


def farthest_view(base: Viewpoint, sphere: ViewSphere) -> Viewpoint:
    """View maximizing chord distance to base; ties go to the lowest id."""
    if base not in sphere:
        raise UnknownViewError(f"base view {base.id} is not in the sphere")
    best = None
    best_d = -1.0
    for v in sorted(sphere, key=lambda v: v.id):
        if v.id == base.id:
            continue
        d = chord_distance(base, v)
        if d > best_d + 1e-15:
            best, best_d = v, d
    if best is None:
        raise UnknownViewError("sphere has no view other than the base")
    return best


def masked_argmax(probs, avail) -> int:
    """argmax_i avail_i * probs_i; ties go to the lowest index."""
    p = np.asarray(probs, dtype=np.float64)
    a = np.asarray(avail, dtype=bool)
    if p.shape != a.shape:
        raise ConfigError("probs and avail must have equal length")
    if np.any(p < 0):
        raise ConfigError("probs must be nonnegative")
    if not a.any():
        raise NoAvailableViewError("availability mask excludes every view")
    masked = np.where(a, p, -1.0)
    return int(np.argmax(masked))


def nearest_view(elevation_deg: float, azimuth_deg: float,
                 sphere: ViewSphere) -> Viewpoint:
    """Sphere member closest (chord distance) to the query direction."""
    if not (math.isfinite(elevation_deg) and math.isfinite(azimuth_deg)):
        raise ConfigError("angles must be finite")
    q = direction(elevation_deg, azimuth_deg)
    best = None
    best_d = math.inf
    for v in sorted(sphere, key=lambda v: v.id):
        d = float(np.linalg.norm(v.position - q))
        if d < best_d - 1e-15:
            best, best_d = v, d
    return best


def sphere_from_json(text: str) -> ViewSphere:
    """Parse the override file: JSON array of {id, elevation_deg, azimuth_deg}."""
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"view sphere file is not valid JSON: {exc}") from exc
    if not isinstance(rows, list) or not rows:
        raise ConfigError("view sphere file must be a non-empty JSON array")
    views = []
    for row in rows:
        try:
            views.append(Viewpoint(int(row["id"]),
                                   float(row["elevation_deg"]),
                                   float(row["azimuth_deg"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad viewpoint entry {row!r}") from exc
    return ViewSphere(tuple(sorted(views, key=lambda v: v.id)))


def load_sphere(path=None) -> ViewSphere:
    if path is None:
        return canonical_sphere()
    with open(path, "r", encoding="utf-8") as fh:
        return sphere_from_json(fh.read())
