"""FLOPs accounting, routing latency benchmark, and report emitters."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tc
from .formats import read_csv, write_csv, write_pgm
from .model import ModelConfig, block_forward
from .ratio import region_of_timestep
from .routing import k_of_ratio, router_scores, routed_block_forward
from .tensor import Tensor


@dataclass(frozen=True)
class LayerFlops:
    """Multiply-accumulate counts of one layer forward."""
    router: int
    attention: int
    mlp: int

    @property
    def total(self) -> int:
        return self.router + self.attention + self.mlp

    def __add__(self, other: "LayerFlops") -> "LayerFlops":
        return LayerFlops(self.router + other.router, self.attention + other.attention,
                          self.mlp + other.mlp)


ZERO = LayerFlops(0, 0, 0)


def flops_of_layer(N: int, k: int, d: int, mlp_ratio: int = 4, router: bool = True) -> LayerFlops:
    """router N*d; attention 4*k*d^2 + 2*k^2*d; MLP 2*k*d*(mlp_ratio*d)."""
    if not 0 <= k <= N:
        raise ValueError(f"k={k} outside [0, {N}]")
    return LayerFlops(N * d if router else 0, 4 * k * d * d + 2 * k * k * d, 2 * k * d * mlp_ratio * d)


def activations_of_layer(N: int, k: int, d: int, mlp_ratio: int = 4, heads: int = 4,
                         router: bool = True) -> int:
    """Activation elements one layer keeps for the backward pass (batch of one).

    Router scores N; per selected token the gathered input, both normed
    inputs, q, k, v, attention context and block output (7d) plus the MLP
    hidden state before and after GELU; attention probabilities heads*k^2.
    """
    if not 0 <= k <= N:
        raise ValueError(f"k={k} outside [0, {N}]")
    return (N if router else 0) + k * (7 * d + 2 * mlp_ratio * d) + heads * k * k


@dataclass
class FlopsReport:
    per_layer: list            # LayerFlops summed over the run, one per layer
    dense_per_layer: list
    per_forward: list          # total MACs of each sampling-step forward (all branches)
    total: int
    dense_total: int
    peak_activations: int = 0          # largest single-forward activation count, one branch
    dense_peak_activations: int = 0

    @property
    def savings(self) -> float:
        return 1.0 - self.total / self.dense_total if self.dense_total else 0.0

    def rows(self):
        for i, (r, dn) in enumerate(zip(self.per_layer, self.dense_per_layer)):
            yield i, r.router, r.attention, r.mlp, r.total, dn.total
        yield "total", sum(r.router for r in self.per_layer), sum(r.attention for r in self.per_layer), \
            sum(r.mlp for r in self.per_layer), self.total, self.dense_total


def flops_of_run(config: ModelConfig, table: Optional[np.ndarray], steps: Optional[int] = None,
                 cfg_branches: int = 2) -> FlopsReport:
    """Layer MACs summed over every sampling step and CFG branch.

    ``table`` holds snapped ratios (layers x regions); ``None`` is the
    dense model, which has no router cost.
    """
    from .diffusion import sampling_timesteps

    n, d, L = config.tokens, config.hidden_dim, config.layers
    ts = sampling_timesteps(config.train_timesteps, steps or config.sample_steps)
    dense_layer = flops_of_layer(n, n, d, config.mlp_ratio, router=False)
    per_layer = [ZERO] * L
    per_forward = []
    dense_act = L * activations_of_layer(n, n, d, config.mlp_ratio, config.heads, router=False)
    peak_act = 0
    for t in ts:
        fwd = 0
        act = 0
        for i in range(L):
            if table is None:
                f = dense_layer
                act += dense_act // L
            else:
                reg = region_of_timestep(int(t), config.train_timesteps, table.shape[1])
                k = k_of_ratio(float(table[i, reg]), n)
                f = flops_of_layer(n, k, d, config.mlp_ratio)
                act += activations_of_layer(n, k, d, config.mlp_ratio, config.heads)
            f = LayerFlops(f.router * cfg_branches, f.attention * cfg_branches, f.mlp * cfg_branches)
            per_layer[i] = per_layer[i] + f
            fwd += f.total
        per_forward.append(fwd)
        peak_act = max(peak_act, act)
    scale = len(ts) * cfg_branches
    dense_per_layer = [LayerFlops(0, dense_layer.attention * scale, dense_layer.mlp * scale)] * L
    return FlopsReport(per_layer, dense_per_layer, per_forward, sum(per_forward),
                       sum(x.total for x in dense_per_layer), peak_act, dense_act)


def write_flops_csv(report: FlopsReport, path, comments: Sequence[str] = ()) -> Path:
    comments = list(comments) + [f"savings={report.savings!r}",
                                 f"peak_activations={report.peak_activations}",
                                 f"dense_peak_activations={report.dense_peak_activations}"]
    return write_csv(path, ["layer", "router", "attention", "mlp", "total", "dense_total"],
                     report.rows(), comments)


# ---------------------------------------------------------------------------
# trajectory

TRAJECTORY_COLUMNS = ["step", "layer", "region", "ratio", "batch_mean_ratio",
                      "total_loss", "diffusion_loss", "ratio_loss"]


@dataclass
class TrajectoryLog:
    rows: list = field(default_factory=list)
    last_step: int = 0

    def append(self, step: int, table: Optional[np.ndarray], res) -> None:
        if step <= self.last_step:
            raise ValueError(f"trajectory steps must increase: {step} after {self.last_step}")
        self.last_step = step
        tail = (res.batch_mean_ratio, res.total, res.diffusion, res.ratio)
        if table is None:
            self.rows.append((step, -1, -1, 0.0) + tail)
            return
        for layer in range(table.shape[0]):
            for region in range(table.shape[1]):
                self.rows.append((step, layer, region, float(table[layer, region])) + tail)

    def ratio_series(self) -> dict:
        """{step: batch-mean ratio}."""
        return {r[0]: r[4] for r in self.rows}

    def write_csv(self, path, comments: Sequence[str] = ()) -> Path:
        return write_csv(path, TRAJECTORY_COLUMNS, self.rows, comments)


# ---------------------------------------------------------------------------
# ratio heatmap and router maps

def emit_ratio_heatmap(table: np.ndarray, path, comments: Sequence[str] = ()) -> Path:
    """Layers as rows, timestep regions as columns."""
    table = np.asarray(table)
    cols = ["layer"] + [f"region_{j}" for j in range(table.shape[1])]
    rows = [[i] + [float(v) for v in table[i]] for i in range(table.shape[0])]
    return write_csv(path, cols, rows, comments)


def read_ratio_heatmap(path) -> np.ndarray:
    cols, rows, _ = read_csv(path)
    if not cols or cols[0] != "layer":
        raise ValueError(f"{path}: not a ratio heatmap")
    return np.array([[float(v) for v in row[1:]] for row in rows])


def emit_router_maps(maps: dict, out_dir, comments: Sequence[str] = ()) -> list[Path]:
    """One PGM per (layer, timestep); scores in (0, 1) map to gray levels."""
    out = []
    for (layer, t), grid in sorted(maps.items()):
        out.append(write_pgm(Path(out_dir) / f"router_l{layer}_t{t}.pgm", grid,
                             list(comments) + [f"layer={layer} timestep={t}"]))
    return out


# ---------------------------------------------------------------------------
# latency benchmark

@dataclass(frozen=True)
class BenchRow:
    ratio: float
    k: int
    dense_ms: float
    routed_ms: float
    machinery_ms: float

    @property
    def relative(self) -> float:
        return self.routed_ms / self.dense_ms

    @property
    def overhead_fraction(self) -> float:
        return self.machinery_ms / self.dense_ms


BENCH_COLUMNS = ["ratio", "k", "dense_ms", "routed_ms", "relative", "machinery_ms", "overhead_fraction"]


def _bench_block(N: int, d: int, heads: int, mlp_ratio: int, gen: np.random.Generator, dtype):
    def w(*shape):
        return Tensor(gen.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape), dtype=dtype)

    hid = mlp_ratio * d
    blk = {"ln1.g": Tensor(np.ones(d), dtype=dtype), "ln1.b": Tensor(np.zeros(d), dtype=dtype),
           "ln2.g": Tensor(np.ones(d), dtype=dtype), "ln2.b": Tensor(np.zeros(d), dtype=dtype),
           "attn.wq": w(d, d), "attn.wk": w(d, d), "attn.wv": w(d, d), "attn.wo": w(d, d),
           "mlp.w1": w(d, hid), "mlp.b1": Tensor(np.zeros(hid), dtype=dtype),
           "mlp.w2": w(hid, d), "mlp.b2": Tensor(np.zeros(d), dtype=dtype),
           "ada.w": w(d, 2 * d), "ada.b": Tensor(np.zeros(2 * d), dtype=dtype)}
    h = Tensor(gen.normal(size=(1, N, d)), dtype=dtype)
    cond = Tensor(gen.normal(size=(1, d)), dtype=dtype)
    return blk, h, cond, w(d), Tensor(np.zeros(1), dtype=dtype)


def benchmark_routing(N: int = 256, d: int = 128, ratios: Sequence[float] = (0.0, 0.3, 0.5),
                      repetitions: int = 20, heads: int = 4, mlp_ratio: int = 4, warmup: int = 3,
                      seed: int = 0, dtype=np.float64) -> list[BenchRow]:
    """Median per-layer latency of dense vs routed forwards, single-threaded.

    ``machinery_ms`` times the routing-only work (scores, top-k, gather,
    scatter) at each ratio.
    """
    if N < 1 or d < 1 or repetitions < 1:
        raise ValueError("N, d and repetitions must be positive")
    blk, h, cond, rw, rb = _bench_block(N, d, heads, mlp_ratio, np.random.default_rng(seed), dtype)

    def dense():
        return h + block_forward(h, cond, blk, heads)

    rows = []
    with threadpool_limits(limits=1):
        for ratio in ratios:
            k = k_of_ratio(ratio, N)

            def routed():
                return routed_block_forward(h, cond, blk, rw, rb, ratio, heads)

            def machinery():
                s = router_scores(h, rw, rb)
                idx = tc.topk_indices(s.data, k)
                return tc.scatter_rows_into(h, tc.gather_rows(h, idx), idx)

            fns = {"dense": dense, "routed": routed, "machinery": machinery}
            for fn in fns.values():
                for _ in range(warmup):
                    fn()
            times = {name: [] for name in fns}
            for _ in range(repetitions):
                for name, fn in fns.items():
                    t0 = time.perf_counter()
                    fn()
                    times[name].append(time.perf_counter() - t0)
            med = {name: statistics.median(v) * 1e3 for name, v in times.items()}
            rows.append(BenchRow(float(ratio), k, med["dense"], med["routed"], med["machinery"]))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path, comments: Sequence[str] = ()) -> Path:
    return write_csv(path, BENCH_COLUMNS,
                     [(r.ratio, r.k, r.dense_ms, r.routed_ms, r.relative, r.machinery_ms,
                       r.overhead_fraction) for r in rows], comments)
