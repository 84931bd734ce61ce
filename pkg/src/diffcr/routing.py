"""Mixture-of-depths token routing for one transformer layer.

A router scores every token; the top-k tokens run through the block and
their residual update is rescaled by the score, the rest bypass the layer
untouched. The rescaling is the only path by which the router learns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .model import block_forward
from .tensor import Tensor

N_BINS = 10  # bins at 0.0, 0.1, ..., 1.0


@dataclass
class SelectionRecord:
    scores: np.ndarray      # (B, N), each in (0, 1)
    indices: np.ndarray     # (B, k), ascending per row
    k: int
    bin: float


@dataclass
class RoutedLayerOutput:
    output: Tensor
    selection: SelectionRecord


def init_routers(layers: int, hidden_dim: int) -> dict[str, Tensor]:
    out = {}
    for i in range(layers):
        out[f"router.{i}.w"] = Tensor(np.zeros(hidden_dim), requires_grad=True)
        out[f"router.{i}.b"] = Tensor(np.zeros(1), requires_grad=True)
    return out


def router_scores(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """sigmoid(h @ weight + bias) for h of shape (..., N, d) -> (..., N)."""
    if weight.shape != (h.shape[-1],):
        raise tc.DimensionError(f"router weight {weight.shape} does not match hidden size of {h.shape}")
    logits = h @ weight.reshape(-1, 1)
    return tc.sigmoid(logits.reshape(h.shape[:-1]) + bias)


def bin_index(bin_value: float) -> int:
    i = int(round(float(bin_value) * N_BINS))
    if not 0 <= i <= N_BINS or abs(i / N_BINS - float(bin_value)) > 1e-12:
        raise ValueError(f"{bin_value!r} is not a ratio bin (multiples of 0.1 in [0, 1])")
    return i


def k_for_bin_index(i: int, n: int) -> int:
    # round((1 - i/10) * n) half-up, in integer arithmetic
    return (2 * (N_BINS - i) * n + N_BINS) // (2 * N_BINS)


def k_of_ratio(bin_value: float, n: int) -> int:
    """Number of tokens a layer processes at compression bin ``bin_value``."""
    return k_for_bin_index(bin_index(bin_value), n)


def _route(h: Tensor, cond: Tensor, blk: dict, scores: Tensor, idx: np.ndarray,
           heads: int, rescale: bool) -> Tensor:
    n = h.shape[-2]
    k = idx.shape[-1]
    if k == 0:
        return h
    if k == n:
        # full selection: indices are the identity, skip the copies
        hs, ss = h, scores.reshape(*scores.shape, 1)
    else:
        hs = tc.gather_rows(h, idx)
        ss = tc.gather_rows(scores.reshape(*scores.shape, 1), idx)
    u = block_forward(hs, cond, blk, heads)
    if rescale:
        u = u * ss
    if k == n:
        return h + u
    return tc.scatter_rows_into(h, hs + u, idx)


def routed_block_forward(h: Tensor, cond: Tensor, blk: dict, weight: Tensor, bias: Tensor,
                         bin_value: float, heads: int, rescale: bool = True,
                         scores: Optional[Tensor] = None,
                         indices: Optional[np.ndarray] = None) -> RoutedLayerOutput:
    """One routed layer at a fixed compression bin.

    ``indices`` overrides the top-k selection (used to hold the discrete
    choice fixed under finite differences).
    """
    if scores is None:
        scores = router_scores(h, weight, bias)
    k = k_of_ratio(bin_value, h.shape[-2])
    idx = tc.topk_indices(scores.data, k) if indices is None else np.asarray(indices)
    out = _route(h, cond, blk, scores, idx, heads, rescale)
    return RoutedLayerOutput(out, SelectionRecord(scores.data, idx, k, bin_value))


def route_batch(h: Tensor, cond: Tensor, blk: dict, scores: Tensor, bin_indices: np.ndarray,
                heads: int, rescale: bool = True) -> Tensor:
    """Routed layer where each sample carries its own bin index.

    Samples sharing a token count run together; a batch with a single
    count goes through in one call.
    """
    bsz, n, d = h.shape
    ks = np.array([k_for_bin_index(int(i), n) for i in bin_indices])
    uniq = np.unique(ks)
    if uniq.size == 1:
        k = int(uniq[0])
        return _route(h, cond, blk, scores, tc.topk_indices(scores.data, k), heads, rescale)
    out = Tensor(np.zeros((bsz, n * d), dtype=h.dtype))
    for k in uniq:
        rows = np.flatnonzero(ks == k)
        hg = tc.take(h, rows, axis=0)
        if k == 0:
            part = hg
        else:
            sg = tc.take(scores, rows, axis=0)
            part = _route(hg, tc.take(cond, rows, axis=0), blk, sg,
                          tc.topk_indices(sg.data, int(k)), heads, rescale)
        out = tc.scatter_rows_into(out, part.reshape(rows.size, n * d), rows)
    return out.reshape(bsz, n, d)
