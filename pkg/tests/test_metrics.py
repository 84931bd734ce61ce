import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffcr.diffusion import StepResult
from diffcr.formats import read_csv, read_pgm
from diffcr.metrics import (BENCH_COLUMNS, activations_of_layer, TrajectoryLog, benchmark_routing, emit_ratio_heatmap,
                            emit_router_maps, flops_of_layer, flops_of_run, read_ratio_heatmap,
                            write_bench_csv, write_flops_csv)
from diffcr.model import ModelConfig
from diffcr.ratio import snap_values
from diffcr.routing import k_of_ratio

from _oracles import MacCounter, naive_routed_layer

DEFAULT = ModelConfig()


def test_flops_of_layer_examples():
    f = flops_of_layer(64, 0, 64)
    assert (f.router, f.attention, f.mlp) == (64 * 64, 0, 0)
    f = flops_of_layer(64, 64, 64, 4)
    assert f.attention == 1_572_864 and f.mlp == 2_097_152
    with pytest.raises(ValueError):
        flops_of_layer(4, 5, 8)


@pytest.mark.parametrize("N,d", [(4, 2), (9, 4), (16, 8), (25, 6), (64, 16)])
def test_flops_match_counting_oracle(N, d):
    rng = np.random.default_rng(N * d)
    blk = {k: rng.normal(size=(d, d)) for k in ("wq", "wk", "wv", "wo")}
    blk["w1"], blk["w2"] = rng.normal(size=(d, 4 * d)), rng.normal(size=(4 * d, d))
    h, w = rng.normal(size=(N, d)), rng.normal(size=d)
    for k in sorted({0, 1, N // 3, N // 2, N - 1, N}):
        c = MacCounter()
        naive_routed_layer(h, w, blk, k, c)
        assert flops_of_layer(N, k, d, 4).total == c.count, (N, k, d)
    c = MacCounter()
    naive_routed_layer(h, w, blk, N, c, router=False)
    assert flops_of_layer(N, N, d, 4, router=False).total == c.count


def test_run_zero_table_only_adds_router_cost():
    rep = flops_of_run(DEFAULT, np.zeros((8, 4)))
    assert rep.savings <= 0
    router = sum(r.router for r in rep.per_layer)
    assert rep.total == rep.dense_total + router
    assert router == 64 * 64 * 8 * 50 * 2


def test_activation_accounting():
    assert activations_of_layer(64, 0, 64) == 64
    assert activations_of_layer(4, 4, 2, 4, 1, router=False) == 4 * (14 + 16) + 16
    rep = flops_of_run(DEFAULT, np.zeros((8, 4)))
    assert rep.peak_activations == rep.dense_peak_activations + 8 * 64
    half = flops_of_run(DEFAULT, np.full((8, 4), 0.5))
    assert half.peak_activations < rep.dense_peak_activations / 2
    table = np.zeros((8, 4))
    table[:, 0] = 0.8
    # the peak comes from the regions that still run every token
    assert flops_of_run(DEFAULT, table).peak_activations == rep.peak_activations
    assert flops_of_run(DEFAULT, None).peak_activations == rep.dense_peak_activations


def test_run_half_ratio_savings():
    rep = flops_of_run(DEFAULT, np.full((8, 4), 0.5))
    # k = 32 of 64 tokens; the quadratic attention term pushes savings slightly past one half
    assert abs(rep.savings - 0.5) <= 0.05
    assert rep.savings > 0.5


def test_run_savings_positive_when_any_ratio_positive():
    table = np.zeros((8, 4))
    table[3, 2] = 0.1
    assert flops_of_run(DEFAULT, table).savings > 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=8, max_size=8), st.integers(0, 7), st.integers(0, 3),
       st.integers(0, 9))
def test_run_flops_monotone_in_each_entry(bins, layer, region, raise_to):
    config = ModelConfig(layers=2, regions=4)
    table = np.array(bins, dtype=float).reshape(2, 4) / 10
    layer %= 2
    before = flops_of_run(config, table).total
    bumped = table.copy()
    bumped[layer, region] = max(table[layer, region], raise_to / 10)
    assert flops_of_run(config, bumped).total <= before


def test_flops_csv(tmp_path):
    rep = flops_of_run(DEFAULT, np.full((8, 4), 0.3))
    path = write_flops_csv(rep, tmp_path / "flops.csv", ["config_sha256=abc"])
    cols, rows, comments = read_csv(path)
    assert cols[0] == "layer" and len(rows) == 9 and rows[-1][0] == "total"
    assert int(rows[-1][4]) == rep.total
    assert "config_sha256=abc" in comments
    assert f"peak_activations={rep.peak_activations}" in comments


def test_trajectory_log(tmp_path):
    log = TrajectoryLog()
    res = StepResult(1.0, 0.9, 0.1, 0.05)
    log.append(10, np.zeros((2, 3)), res)
    log.append(20, np.full((2, 3), 0.1), res)
    with pytest.raises(ValueError):
        log.append(20, np.zeros((2, 3)), res)
    assert len(log.rows) == 12 and log.ratio_series() == {10: 0.05, 20: 0.05}
    cols, rows, _ = read_csv(log.write_csv(tmp_path / "t.csv"))
    assert cols[:4] == ["step", "layer", "region", "ratio"] and len(rows) == 12


def test_heatmap_round_trip(tmp_path):
    zero = read_ratio_heatmap(emit_ratio_heatmap(np.zeros((8, 4)), tmp_path / "z.csv"))
    np.testing.assert_array_equal(zero, 0.0)
    table = snap_values(np.random.default_rng(0).uniform(size=(8, 4)))
    path = emit_ratio_heatmap(table, tmp_path / "h.csv", ["config_sha256=1"])
    np.testing.assert_array_equal(read_ratio_heatmap(path), table)
    assert read_csv(path)[0] == ["layer", "region_0", "region_1", "region_2", "region_3"]


def test_router_maps_emit(tmp_path):
    maps = {(l, t): np.full((8, 8), 0.5) for l, t in itertools.product(range(2), (25, 175))}
    paths = emit_router_maps(maps, tmp_path, ["config_sha256=1"])
    assert len(paths) == 4
    grid, maxval, comments = read_pgm(tmp_path / "router_l1_t175.pgm")
    assert grid.shape == (8, 8) and maxval == 255 and np.all(grid == 128)
    assert "config_sha256=1" in comments


@pytest.mark.slow
def test_routing_machinery_overhead_small_at_scale():
    zero, = benchmark_routing(N=256, d=128, ratios=(0.0,), repetitions=20)
    assert zero.overhead_fraction < 0.10


def test_benchmark_table_shape(tmp_path):
    rows = benchmark_routing(N=32, d=16, ratios=(0.0, 0.3, 0.5), repetitions=3, warmup=1)
    assert [r.ratio for r in rows] == [0.0, 0.3, 0.5]
    assert [r.k for r in rows] == [k_of_ratio(b, 32) for b in (0.0, 0.3, 0.5)]
    assert all(r.dense_ms > 0 and r.routed_ms > 0 for r in rows)
    cols, body, _ = read_csv(write_bench_csv(rows, tmp_path / "bench.csv"))
    assert cols == BENCH_COLUMNS and len(body) == 3
    with pytest.raises(ValueError):
        benchmark_routing(N=0)
