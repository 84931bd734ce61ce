"""Command-line entry point: ``diffcr {train,sample,bench,viz,inspect}``.

Every command writes under ``--out`` (default ``run``)::

    run/checkpoints/step_XXXXXX.dcr   run/trajectory.csv   run/heatmap.csv
    run/maps/router_l{layer}_t{t}.pgm run/samples/*.pgm    run/bench.csv
    run/flops.csv
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (CheckpointFormatError, ConfigMismatchError, load_checkpoint, load_estimator,
                         save_estimator)
from .config import RunConfig
from .diffusion import NonFiniteLossError
from .estimator import DiffCRDiT
from .formats import write_pgm
from .metrics import (benchmark_routing, emit_ratio_heatmap, emit_router_maps, flops_of_run,
                      write_bench_csv, write_flops_csv)

EXIT_NAN = 3
EXIT_USAGE = 2

log = logging.getLogger("diffcr")


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    routing = False if getattr(args, "dense", False) else None
    return cfg.with_overrides(seed=args.seed, target_ratio=args.target_ratio, regions=args.regions,
                              steps=getattr(args, "steps", None),
                              batch_size=getattr(args, "batch_size", None),
                              generator=getattr(args, "generator", None),
                              classes=getattr(args, "classes", None), routing=routing)


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.dcr"


def run_training(cfg: RunConfig, out) -> DiffCRDiT:
    """Train per ``cfg``, writing checkpoints, trajectory and heatmap under ``out``.

    Raises :class:`NonFiniteLossError` after saving the partial trajectory.
    """
    out = Path(out)
    ckpt_dir = out / "checkpoints"
    X, y = cfg.dataset().make(cfg.dataset_size, seed=cfg.seed)
    est = cfg.estimator()

    def on_step(model, step):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_estimator(ckpt_dir / checkpoint_name(step), cfg, model)

    try:
        est.fit(X, y, callback=on_step)
    finally:
        if hasattr(est, "trajectory_"):
            est.trajectory_.write_csv(out / "trajectory.csv", cfg.header("trajectory"))
    if est.n_steps_ == 0 or not cfg.checkpoint_every or est.n_steps_ % cfg.checkpoint_every:
        save_estimator(ckpt_dir / checkpoint_name(est.n_steps_), cfg, est)
    if est.ratio_table_ is not None:
        emit_ratio_heatmap(est.snapped_table().numpy(), out / "heatmap.csv", cfg.header("heatmap"))
    return est


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    try:
        est = run_training(cfg, args.out)
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    print(f"steps {est.n_steps_}  mean ratio {est.mean_ratio():.4f}")
    return 0


def cmd_sample(args) -> int:
    est, cfg = load_estimator(args.checkpoint)
    out = Path(args.out)
    seed = args.seed or 0
    y = np.full(args.count, args.cls, dtype=int)
    images = est.sample(args.count, y, random_state=seed, dense=args.dense,
                        cfg_scale=args.cfg_scale)
    header = cfg.header("sample")
    tag = "dense" if args.dense else "routed"
    for i, img in enumerate(images):
        write_pgm(out / "samples" / f"{tag}_c{args.cls}_s{seed}_{i:03d}.pgm", img,
                  header + [f"class={args.cls} seed={seed} index={i}"])
    table = None if args.dense or est.ratio_table_ is None else est.snapped_table().numpy()
    report = flops_of_run(est.model_config(), table)
    write_flops_csv(report, out / "flops.csv", cfg.header("flops"))
    print(f"wrote {len(images)} samples; FLOPs savings {report.savings:.4f}; peak activations "
          f"{report.peak_activations} (dense {report.dense_peak_activations})")
    return 0


def cmd_bench(args) -> int:
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = benchmark_routing(N=args.tokens, d=args.dim, ratios=ratios, repetitions=args.reps,
                             seed=args.seed or 0)
    comments = ["diffcr bench", f"N={args.tokens} d={args.dim} repetitions={args.reps}"]
    write_bench_csv(rows, Path(args.out) / "bench.csv", comments)
    for r in rows:
        print(f"ratio {r.ratio:.1f}  k {r.k:4d}  dense {r.dense_ms:8.3f} ms  routed {r.routed_ms:8.3f} ms"
              f"  relative {r.relative:.3f}  overhead {r.overhead_fraction:.3f}")
    return 0


def cmd_viz(args) -> int:
    if args.checkpoint:
        est, cfg = load_estimator(args.checkpoint)
    else:
        cfg = _config_from_args(args)
        est = cfg.estimator().initialize()
    if est.ratio_table_ is None:
        print("error: viz needs a routed model", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    config = est.model_config()
    T = config.train_timesteps
    if args.timesteps:
        ts = [int(t) for t in args.timesteps.split(",")]
    else:
        ts = [int((j + 0.5) * T / config.regions) for j in range(config.regions)]
    X, _ = cfg.dataset().make(1, seed=args.seed or 0)
    maps = est.router_maps(X, ts, y=[args.cls], random_state=args.seed or 0)
    if args.layers:
        keep = {int(v) for v in args.layers.split(",")}
        maps = {k: v for k, v in maps.items() if k[0] in keep}
    emit_router_maps(maps, out / "maps", cfg.header("router map"))
    table = est.snapped_table().numpy()
    emit_ratio_heatmap(table, out / "heatmap.csv", cfg.header("heatmap"))
    for j, m in enumerate(table.mean(axis=0)):
        print(f"region {j}  mean snapped ratio {m:.3f}")
    print(f"wrote {len(maps)} router maps")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"format version {ckpt.version}  config sha256 {ckpt.config.digest()}")
    print(ckpt.config.to_ini().rstrip())
    print(f"{len(ckpt.arrays)} arrays")
    for name, code, shape in ckpt.manifest():
        print(f"  {name}  {code}  {'x'.join(map(str, shape)) or 'scalar'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="run", help="run output directory")
    common.add_argument("--target-ratio", type=float)
    common.add_argument("--regions", type=int)
    common.add_argument("--dense", action="store_true", help="ignore routing (baseline)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffcr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--generator", choices=["patterns", "constant"])
    t.add_argument("--classes", type=int)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="generate images from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--class", dest="cls", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--cfg-scale", type=float)
    s.set_defaults(fn=cmd_sample)

    b = sub.add_parser("bench", parents=[common], help="routed vs dense layer latency")
    b.add_argument("--tokens", type=int, default=256)
    b.add_argument("--dim", type=int, default=128)
    b.add_argument("--ratios", default="0.0,0.3,0.5")
    b.add_argument("--reps", type=int, default=20)
    b.set_defaults(fn=cmd_bench)

    v = sub.add_parser("viz", parents=[common], help="router maps and ratio heatmap")
    v.add_argument("checkpoint", nargs="?")
    v.add_argument("--class", dest="cls", type=int, default=0)
    v.add_argument("--timesteps", help="comma-separated; default one per region")
    v.add_argument("--layers", help="comma-separated; default all")
    v.set_defaults(fn=cmd_viz)

    i = sub.add_parser("inspect", help="print a checkpoint manifest")
    i.add_argument("checkpoint")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except (CheckpointFormatError, ConfigMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
