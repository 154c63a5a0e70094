"""Probability-weighted mixture volume and per-voxel binary cross entropy.

The mixture is the differentiable bridge that lets reconstruction quality
supervise the view classifier: gradients reach the selection probabilities
through the weighting, and each candidate volume's gradient scales with its
probability (a zero-probability candidate receives exactly zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatchError
from .voxel import BinaryGrid

BCE_EPS = 1e-7


@dataclass
class MixtureResult:
    r: Tensor
    components: Tensor  # stacked [K, ...]
    weights: Tensor     # [K]


def mixture(p: Tensor, volumes) -> MixtureResult:
    """r = sum_i p_i * v_i over K equally shaped volumes."""
    if isinstance(volumes, Tensor):
        st = volumes
    else:
        vols = list(volumes)
        if not vols:
            raise DimensionMismatchError("mixture: empty volume list")
        shapes = {v.shape for v in vols}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"mixture: mixed shapes {shapes}")
        st = ad.stack(vols, axis=0)
    k = st.shape[0]
    if p.size != k:
        raise DimensionMismatchError(
            f"mixture: {p.size} weights for {k} volumes")
    pr = ad.reshape(p, (k,) + (1,) * (st.ndim - 1))
    r = ad.tsum(ad.mul(pr, st), axis=0)
    return MixtureResult(r=r, components=st, weights=p)


def bce(r: Tensor, truth) -> Tensor:
    """Mean negated per-voxel binary cross entropy against a binary target."""
    t = truth.bits if isinstance(truth, BinaryGrid) else np.asarray(truth)
    if r.size != t.size:
        raise DimensionMismatchError(
            f"bce: prediction size {r.size} vs target size {t.size}")
    flat = ad.reshape(r, (r.size,))
    tf = t.reshape(-1).astype(r.dtype)
    c = ad.clip(flat, BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.mul(ad.log(c), Tensor(tf)) + ad.mul(ad.log(1.0 - c),
                                                Tensor(1.0 - tf))
    return ad.neg(ad.tmean(ll))
