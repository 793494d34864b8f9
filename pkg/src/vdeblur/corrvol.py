"""All-range correlation volumes and the pooled volume pyramid.

Each volume stores, for every reference-feature position (x, y), the
exponentiated similarity against every position (u, v) of a neighbor feature
map. Pyramid level k pools the neighbor map with a 2^k box before the
pairwise products, widening the matching range while the reference grid
keeps full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, exp, matmul_batched, max_pool2d, reshape, sub, sum_reduce, transpose

__all__ = [
    "CorrelationVolume",
    "CorrelationPyramid",
    "build_correlation_volume",
    "build_pyramid",
    "normalize_volume",
    "naive_correlation_volume",
    "VOLUME_KINDS",
]

VOLUME_KINDS = ("inter_prev", "inter_next", "intra")


@dataclass
class CorrelationVolume:
    """4D similarity volume: values[x, y, u, v] over a (H', W') reference grid
    and a (Hk, Wk) pooled neighbor grid, with Hk = H'/2^k."""

    values: Tensor
    level: int
    kind: str

    def __post_init__(self):
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"unknown volume kind: {self.kind!r}")
        if self.level < 1:
            raise ValueError("volume level must be >= 1")
        if self.values.data.ndim != 4:
            raise ValueError("volume values must be 4D")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.data.shape


@dataclass
class CorrelationPyramid:
    """Volumes for levels k = 1..L, spatial neighbor dims halving per level."""

    levels: list
    L: int

    def __post_init__(self):
        if self.L != len(self.levels):
            raise ValueError("pyramid depth does not match level count")
        for k, vol in enumerate(self.levels, start=1):
            if vol.level != k:
                raise ValueError(f"pyramid level {k} holds a volume tagged {vol.level}")


def _dot_products(f_ref: Tensor, f_nbr: Tensor) -> Tensor:
    """Channel inner products between every (x,y) of f_ref and every (u,v) of
    f_nbr, as a (H'*W', Hk*Wk) matrix."""
    c, h, w = f_ref.data.shape
    c2, hk, wk = f_nbr.data.shape
    if c != c2:
        raise ValueError(f"channel mismatch: reference {c} vs neighbor {c2}")
    ref_mat = transpose(reshape(f_ref, (c, h * w)), (1, 0))
    nbr_mat = reshape(f_nbr, (c, hk * wk))
    return matmul_batched(ref_mat, nbr_mat)


def build_correlation_volume(f_ref: Tensor, f_nbr: Tensor, *, level: int = 1,
                             kind: str = "inter_next") -> CorrelationVolume:
    """Exponentiated pairwise similarities between reference and neighbor features.

    values[x,y,u,v] = exp(dot(f_ref[:,x,y], f_nbr[:,u,v]) - m(x,y)) where
    m(x,y) is the max dot product at (x,y). The shift prevents float32
    overflow and cancels exactly once the volume is sum-normalized, so the
    normalized result is the plain softmax of the raw dot products.
    Differentiable with respect to both feature maps.
    """
    if not np.isfinite(f_ref.data).all() or not np.isfinite(f_nbr.data).all():
        raise ValueError("correlation inputs must be finite")
    _, h, w = f_ref.data.shape
    _, hk, wk = f_nbr.data.shape
    dots = _dot_products(f_ref, f_nbr)
    shift = Tensor(dots.data.max(axis=1, keepdims=True))
    vol = exp(sub(dots, shift))
    return CorrelationVolume(reshape(vol, (h, w, hk, wk)), level=level, kind=kind)


def build_pyramid(f_ref: Tensor, f_nbr: Tensor, L: int, *,
                  kind: str = "inter_next") -> CorrelationPyramid:
    """Volumes against the neighbor map pooled by 2^k, k = 1..L.

    The reference map is never pooled. Each level pools the original map
    directly with kernel 2^k (not iterated 2x2 pooling) so gradient routing
    follows the single-window argmax.
    """
    if L < 1:
        raise ValueError("pyramid depth must be >= 1")
    _, h, w = f_nbr.data.shape
    if h % (1 << L) or w % (1 << L):
        raise ValueError(f"dims ({h},{w}) not divisible by 2^{L}")
    levels = []
    nbr4 = reshape(f_nbr, (1,) + f_nbr.data.shape)
    for k in range(1, L + 1):
        s = 1 << k
        pooled = max_pool2d(nbr4, s, s)
        pooled = reshape(pooled, pooled.data.shape[1:])
        levels.append(build_correlation_volume(f_ref, pooled, level=k, kind=kind))
    return CorrelationPyramid(levels, L)


def normalize_volume(vol: CorrelationVolume) -> CorrelationVolume:
    """Scale so every (x,y) slice sums to one over its (u,v) plane.

    Equals the softmax of the raw dot products regardless of the
    stabilization shift applied during construction.
    """
    sums = sum_reduce(vol.values, axes=(2, 3), keepdims=True)
    return CorrelationVolume(vol.values / sums, level=vol.level, kind=vol.kind)


def naive_correlation_volume(f_ref: np.ndarray, f_nbr: np.ndarray) -> np.ndarray:
    """Four-nested-loop reference construction, used as the correctness oracle
    for the matmul path and by the bench command. Not differentiable."""
    f_ref = np.asarray(f_ref)
    f_nbr = np.asarray(f_nbr)
    c, h, w = f_ref.shape
    c2, hk, wk = f_nbr.shape
    if c != c2:
        raise ValueError(f"channel mismatch: {c} vs {c2}")
    dots = np.empty((h, w, hk, wk), dtype=f_ref.dtype)
    for x in range(h):
        for y in range(w):
            for u in range(hk):
                for v in range(wk):
                    acc = f_ref.dtype.type(0)
                    for ch in range(c):
                        acc += f_ref[ch, x, y] * f_nbr[ch, u, v]
                    dots[x, y, u, v] = acc
    shift = dots.max(axis=(2, 3), keepdims=True)
    return np.exp(dots - shift)
