"""Learnable compression ratios per (layer, timestep region).

Training queries the two bins bracketing each continuous ratio, runs the
routed layer at both and mixes the outputs by proximity, which makes the
ratio differentiable. Inference snaps every ratio to its nearest bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .routing import N_BINS, route_batch, router_scores
from .tensor import Tensor


@dataclass(frozen=True)
class BinQuery:
    lo: float
    hi: float
    w_lo: float
    w_hi: float


def _lower_bin(r: float) -> int:
    i = min(int(math.floor(r * N_BINS)), N_BINS)
    # guard against r*10 landing an ulp off a bin boundary
    if i < N_BINS and (i + 1) / N_BINS <= r:
        i += 1
    if i > 0 and i / N_BINS > r:
        i -= 1
    return i


def _upper_weight(r: float, i: int) -> float:
    if i == N_BINS:
        return 0.0
    # bins are decimal; drop the representation noise of r - i/10
    return min(max(round((r - i / N_BINS) * N_BINS, 12), 0.0), 1.0)


def query_bins(r: float) -> BinQuery:
    r = float(r)
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio {r} outside [0, 1]")
    i = _lower_bin(r)
    w_hi = _upper_weight(r, i)
    return BinQuery(i / N_BINS, min(i + 1, N_BINS) / N_BINS, 1.0 - w_hi, w_hi)


def bin_weights(r: Tensor) -> tuple[np.ndarray, Tensor, Tensor]:
    """Lower bin indices and differentiable (w_lo, w_hi) for a ratio vector."""
    vals = np.atleast_1d(r.data)
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise ValueError("ratios must lie in [0, 1]")
    lo = np.array([_lower_bin(float(v)) for v in vals])
    w = np.array([_upper_weight(float(v), int(i)) for v, i in zip(vals, lo)], dtype=r.dtype)
    slope = np.where(lo == N_BINS, 0.0, float(N_BINS))
    w_hi = tc.record(w.reshape(r.shape), (r,), lambda g: (g * slope.reshape(r.shape),), "bin_weight")
    return lo, 1.0 - w_hi, w_hi


class RatioTable:
    """r[layer][region], learnable, kept inside [0, 1]."""

    def __init__(self, layers: int, regions: int, values=None):
        data = np.zeros((layers, regions)) if values is None else np.array(values, dtype=np.float64)
        if data.shape != (layers, regions):
            raise tc.DimensionError(f"ratio table shape {data.shape} != {(layers, regions)}")
        self.values = Tensor(data, requires_grad=True)

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def regions(self) -> int:
        return self.values.shape[1]

    def numpy(self) -> np.ndarray:
        return self.values.data

    def is_snapped(self) -> bool:
        v = self.values.data
        return bool(np.all(np.round(v * N_BINS) / N_BINS == v) and np.all((v >= 0) & (v <= 1)))

    def __repr__(self) -> str:
        return f"RatioTable(layers={self.layers}, regions={self.regions})"


def snap_values(values) -> np.ndarray:
    """Nearest bin, halves rounding up."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * N_BINS + 0.5), 0, N_BINS) / N_BINS


def snap_for_inference(table: RatioTable) -> RatioTable:
    return RatioTable(table.layers, table.regions, snap_values(table.numpy()))


def project_ratios(table: RatioTable) -> RatioTable:
    np.clip(table.values.data, 0.0, 1.0, out=table.values.data)
    return table


def region_of_timestep(t, T: int, R: int):
    """Contiguous, near-equal partition of [0, T) into R regions."""
    if not 1 <= R <= T:
        raise ValueError(f"need 1 <= R <= T, got R={R}, T={T}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise ValueError(f"timestep {t} outside [0, {T})")
    reg = np.minimum(t_arr.astype(np.int64) * R // T, R - 1)
    return int(reg) if reg.ndim == 0 else reg


def ratio_mse_loss(table: RatioTable, timesteps, target: float, coeff: float, T: int) -> Tensor:
    """coeff * (mean over layers x batch of r[layer][region(t)] - target)^2."""
    if coeff < 0:
        raise ValueError("ratio loss coefficient must be non-negative")
    t = np.atleast_1d(np.asarray(timesteps))
    if t.size == 0:
        raise ValueError("empty batch")
    regions = region_of_timestep(t, T, table.regions)
    gap = tc.take(table.values, np.atleast_1d(regions), axis=1).mean() - target
    return (gap * gap) * coeff


def batch_mean_ratio(table: RatioTable, timesteps, T: int) -> float:
    regions = np.atleast_1d(region_of_timestep(np.atleast_1d(timesteps), T, table.regions))
    return float(table.numpy()[:, regions].mean())


def diffcr_block_forward(h: Tensor, cond: Tensor, blk: dict, weight: Tensor, bias: Tensor,
                         r: Tensor, heads: int, rescale: bool = True) -> Tensor:
    """Two-branch training forward of one layer.

    ``r`` is a scalar ratio or one ratio per sample. Router scores are
    computed once and shared by both branches.
    """
    bsz = h.shape[0]
    if r.size == 1 and bsz != 1:
        r = tc.take(r.reshape(1), np.zeros(bsz, dtype=np.intp), axis=0)
    r = r.reshape(bsz)
    scores = router_scores(h, weight, bias)
    lo, w_lo, w_hi = bin_weights(r)
    hi = np.minimum(lo + 1, N_BINS)
    out_lo = route_batch(h, cond, blk, scores, lo, heads, rescale)
    out_hi = route_batch(h, cond, blk, scores, hi, heads, rescale)
    return out_lo * w_lo.reshape(bsz, 1, 1) + out_hi * w_hi.reshape(bsz, 1, 1)
