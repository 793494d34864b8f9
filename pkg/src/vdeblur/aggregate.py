"""Correlation-weighted feature aggregation across the volume pyramid.

A normalized volume provides, per reference position, a convex weighting
over neighbor positions. Those weights average a refined (1x1-convolved)
copy of the pooled neighbor features back onto the reference grid. Levels
are concatenated along channels, and the three per-source maps (previous,
self, next) are fused into one tensor for reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrvol import CorrelationVolume, build_correlation_volume, normalize_volume
from .tensor import (
    ParamStore,
    Tensor,
    concat,
    conv2d,
    matmul_batched,
    max_pool2d,
    reshape,
    transpose,
)

__all__ = [
    "AggregatedFeature",
    "SOURCES",
    "refine_neighbor",
    "aggregate_level",
    "aggregate_pair",
    "fuse_three",
    "phi_param_names",
]

SOURCES = ("prev", "self", "next")
_SOURCE_KIND = {"prev": "inter_prev", "self": "intra", "next": "inter_next"}


@dataclass
class AggregatedFeature:
    """Per-source aggregation result: (L*C, H', W') values."""

    values: Tensor
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown aggregation source: {self.source!r}")


def phi_param_names(level: int, source: str) -> tuple[str, str]:
    return f"phi.{source}.k{level}.weight", f"phi.{source}.k{level}.bias"


def refine_neighbor(f_nbr_pooled: Tensor, params: ParamStore, level: int,
                    source: str) -> Tensor:
    """Apply the per-level, per-source 1x1 refinement convolution."""
    if source not in SOURCES:
        raise ValueError(f"unknown aggregation source: {source!r}")
    w_name, b_name = phi_param_names(level, source)
    weight, bias = params[w_name], params[b_name]
    x = reshape(f_nbr_pooled, (1,) + f_nbr_pooled.data.shape)
    out = conv2d(x, weight, bias, stride=1, padding=0)
    return reshape(out, out.data.shape[1:])


def aggregate_level(norm_vol: CorrelationVolume, refined: Tensor) -> Tensor:
    """Weighted average of refined neighbor features under the volume weights.

    output[:, x, y] = sum over (u,v) of norm_vol[x,y,u,v] * refined[:, u, v].
    The volume must already be normalized; per-(x,y) sums deviating from one
    by more than 1e-4 are rejected.
    """
    h, w, hk, wk = norm_vol.shape
    c, rh, rw = refined.data.shape
    if (rh, rw) != (hk, wk):
        raise ValueError(f"refined dims {(rh, rw)} do not match volume {(hk, wk)}")
    sums = norm_vol.values.data.sum(axis=(2, 3))
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("aggregate_level requires a normalized volume")
    weights = reshape(norm_vol.values, (h * w, hk * wk))
    feats = transpose(reshape(refined, (c, hk * wk)), (1, 0))
    out = matmul_batched(weights, feats)  # (H'*W', C)
    return reshape(transpose(out, (1, 0)), (c, h, w))


def aggregate_pair(f_ref: Tensor, f_nbr: Tensor, L: int, params: ParamStore,
                   source: str) -> AggregatedFeature:
    """Full per-source aggregation: pool, correlate, normalize, refine,
    aggregate at each level k = 1..L, then concatenate levels along channels."""
    if source not in SOURCES:
        raise ValueError(f"unknown aggregation source: {source!r}")
    _, h, w = f_nbr.data.shape
    if h % (1 << L) or w % (1 << L):
        raise ValueError(f"dims ({h},{w}) not divisible by 2^{L}")
    kind = _SOURCE_KIND[source]
    nbr4 = reshape(f_nbr, (1,) + f_nbr.data.shape)
    per_level = []
    for k in range(1, L + 1):
        s = 1 << k
        pooled = max_pool2d(nbr4, s, s)
        pooled = reshape(pooled, pooled.data.shape[1:])
        vol = normalize_volume(build_correlation_volume(f_ref, pooled, level=k, kind=kind))
        refined = refine_neighbor(pooled, params, k, source)
        per_level.append(aggregate_level(vol, refined))
    return AggregatedFeature(concat(per_level, axis=0), source=source)


def fuse_three(rho_prev: AggregatedFeature, rho_self: AggregatedFeature,
               rho_next: AggregatedFeature) -> Tensor:
    """Channel concatenation of the three aggregated maps, previous first."""
    got = (rho_prev.source, rho_self.source, rho_next.source)
    if got != SOURCES:
        raise ValueError(f"fuse_three needs sources {SOURCES}, got {got}")
    return concat([rho_prev.values, rho_self.values, rho_next.values], axis=0)
