"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 unrecoverable training divergence.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3
KIND_NAMES = {"perm": "permutation", "diag": "diagonal", "orth": "orthogonal"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperconv", description="Hyperbolic-block convnets, channel symmetries and PDE oracles.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory (images.tnsr, labels.tnsr)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--metrics", help="metrics CSV path")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="loss and accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)

    c = sub.add_parser("count-params", help="exact trainable parameter count")
    c.add_argument("--config", required=True)
    c.add_argument("--expect", type=float)
    c.add_argument("--tol-pct", type=float, default=2.0)

    tr = sub.add_parser("transform", help="apply a random exact channel symmetry")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--kind", required=True, choices=sorted(KIND_NAMES))
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="compare the predictions of two checkpoints")
    v.add_argument("--ckpt-a", required=True)
    v.add_argument("--ckpt-b", required=True)
    v.add_argument("--probes", type=_positive_int, default=32)
    v.add_argument("--report", help="per-probe deviation CSV")
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sparsify", help="search the symmetry group for sparser mixing weights")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=_positive_int, default=200)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--kind", choices=sorted(KIND_NAMES), default="perm")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probes", type=_positive_int, default=16)
    s.add_argument("--out", required=True)

    d = sub.add_parser("pde-demo", help="run a reference PDE solver and write per-step CSV")
    d.add_argument("equation", choices=["heat", "wave", "rotate", "quasilinear"])
    d.add_argument("--grid", type=_positive_int, default=64, help="grid points per side (h = 1/grid)")
    d.add_argument("--steps", type=_positive_int)
    d.add_argument("--t-final", type=float)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-prefix", required=True)
    return p


# -- commands ------------------------------------------------------------------------------


def _probes(cfg, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(count, cfg.in_channels, cfg.image_size, cfg.image_size))


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_configs
    from .data import load_dataset
    from .network import build_network, with_overrides
    from .training import TrainingDiverged, train

    net_cfg, train_cfg = load_configs(args.config)
    if train_cfg.clip_activation_placement is not None:
        net_cfg = with_overrides(net_cfg, activation_placement=train_cfg.clip_activation_placement)
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    model = build_network(net_cfg, seed=train_cfg.seed)
    log = None if args.quiet else print
    try:
        result = train(model, data, train_cfg, val=val, metrics_path=args.metrics, log=log)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result.model, args.out)
    print(f"saved {args.out} ({result.backoffs} backoffs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .training import evaluate

    model = load_checkpoint(args.ckpt)
    loss, acc = evaluate(model, load_dataset(args.data))
    print(f"loss {loss:.6f}")
    print(f"accuracy {acc:.6f}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .config import load_configs
    from .network import build_network, count_parameters

    net_cfg, _ = load_configs(args.config)
    n = count_parameters(build_network(net_cfg, seed=0))
    print(n)
    if args.expect is not None:
        off = 100.0 * (n - args.expect) / args.expect
        print(f"expected {args.expect:.0f}: {off:+.2f}% (tolerance {args.tol_pct}%)")
        if abs(off) > args.tol_pct:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_transform(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .symmetry import ChannelTransform, stream_layout, transform_network

    model = load_checkpoint(args.ckpt)
    kind = KIND_NAMES[args.kind]
    rng = np.random.default_rng(args.seed)
    layout = stream_layout(model)
    per_stream = [ChannelTransform.random(kind, w, rng) for w in layout.widths]
    if kind == "diagonal" and model.config.activation == "relu":
        per_stream = [ChannelTransform.from_diagonal(np.abs(t.diagonal())) for t in per_stream]
    stage_t = [per_stream[s] for s in layout.stage_stream]
    new = transform_network(model, stage_t, stem_transform=per_stream[0])
    save_checkpoint(new, args.out)
    print(f"applied random {kind} transforms to {layout.count} channel streams")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checkpoint import load_checkpoint
    from .symmetry import verify_invariance

    a, b = load_checkpoint(args.ckpt_a), load_checkpoint(args.ckpt_b)
    report = verify_invariance(a, b, _probes(a.config, args.probes, args.seed))
    if args.report:
        Path(args.report).write_text(report.to_csv())
    print(report.summary())
    if not report.max_deviation <= args.tol:
        print(f"FAIL: deviation {report.max_deviation:.3e} above tolerance {args.tol:.1e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_sparsify(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .symmetry import sparsify_search

    model = load_checkpoint(args.ckpt)
    kind = KIND_NAMES[args.kind]
    res = sparsify_search(
        model, kind, steps=args.steps, lam=args.lam, seed=args.seed, probes=_probes(model.config, args.probes, args.seed)
    )
    save_checkpoint(res.model, args.out)
    print(f"L1 of mixing weights: {res.objective_before:.6g} -> {res.objective_after:.6g}")
    print(f"near-zero entries: {res.sparsity_before[0]} -> {res.sparsity_after[0]} of {res.sparsity_after[1]}")
    print(res.report.summary())
    return EXIT_OK


def _grid_stats(u: np.ndarray, h: float) -> tuple[float, float]:
    return float(np.max(np.abs(u))), float(np.sqrt(h * h * np.sum(u * u)))


def cmd_pde(args) -> int:
    from . import pde, tnsr

    N = args.grid
    h = 1.0 / N
    rows = []
    prefix = args.out_prefix

    def record(step, time, u):
        rows.append((step, time) + _grid_stats(u, h))

    if args.equation == "heat":
        x, y = pde.centered_coordinates((N, N), h)
        g = pde.PdeGrid(np.exp(-(x**2 + y**2) / (2 * 0.1**2)), h, 0.2 * h * h)
        steps = args.steps or 100
        record(0, 0.0, g.u)
        for k in range(steps):
            g = pde.heat_step(g)
            record(k + 1, g.time, g.u)
        final = g.u
    elif args.equation == "wave":
        xs = np.arange(1, N) * h
        X, Y = np.meshgrid(xs, xs)
        u0 = (np.sin(np.pi * X) * np.sin(np.pi * Y))[None]
        tau = 0.5 * h
        steps = args.steps or 100
        _, frames = pde.wave_solve_second_order(u0, np.zeros_like(u0), h, tau, steps, history=True)
        for k, u in enumerate(frames):
            record(k, k * tau, u)
        e0 = pde.wave_energy(frames[0], frames[1], h, tau)
        e1 = pde.wave_energy(frames[-2], frames[-1], h, tau)
        print(f"energy drift {abs(e1 - e0) / e0:.3e}")
        final = frames[-1]
    elif args.equation == "rotate":
        t_final = args.t_final if args.t_final is not None else 2 * math.pi
        x, y = pde.centered_coordinates((N, N), h)

        def bump(a, b):
            return np.exp(-((a - 0.15) ** 2 + b**2) / (2 * 0.15**2))

        u0 = bump(x, y)[None]
        tau_max = pde.rotation_cfl_step((N, N), h)
        steps = args.steps or max(1, math.ceil(t_final / (0.5 * tau_max)))
        tau = t_final / steps
        if tau > tau_max:
            raise UsageError(f"--steps {steps} gives tau = {tau:.4g} above the CFL bound {tau_max:.4g}")
        g = pde.PdeGrid(u0, h, tau)
        record(0, 0.0, g.u)
        for k in range(steps):
            g = pde.rotation_advect(g, tau, steps=1)
            record(k + 1, (k + 1) * tau, g.u)
        exact = pde.rotated_initial_data(bump, (N, N), h, t_final)
        err = float(np.sqrt(h * h * np.sum((g.u[0] - exact) ** 2)))
        print(f"L2 error against the exact rotation at t = {t_final:.6g}: {err:.6e}")
        final = g.u
    else:
        rng = np.random.default_rng(args.seed)
        n = 2
        A, B, C, D = (rng.normal(0, 0.5, (n, n)) for _ in range(4))
        x, y = pde.centered_coordinates((N, N), h)
        u0 = np.stack([np.exp(-(x**2 + y**2) / (2 * 0.1**2)), np.sin(2 * np.pi * x) * 0.5])
        g = pde.PdeGrid(u0, h, 0.1 * h)
        steps = args.steps or 200
        traj = [g]
        with np.errstate(all="ignore"):
            for _ in range(steps):
                g = pde.quasilinear_step(g, A, B, C, D, "eq3")
                traj.append(g)
        for k, gk in enumerate(traj):
            with np.errstate(all="ignore"):
                record(k, gk.time, gk.u)
        diag = pde.detect_blowup(traj, h=h)
        print("no blow-up detected" if diag is None else f"blow-up at step {diag.step} ({diag.reason})")
        final = g.u
    csv_path = Path(f"{prefix}.csv")
    with open(csv_path, "w") as fh:
        fh.write("step,time,max_abs,l2\n")
        for step, time, mx, l2 in rows:
            fh.write(f"{step},{time!r},{mx!r},{l2!r}\n")
    if np.all(np.isfinite(final)):
        tnsr.save(f"{prefix}_final.tnsr", final)
    print(f"wrote {csv_path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count,
    "transform": cmd_transform,
    "verify": cmd_verify,
    "sparsify": cmd_sparsify,
    "pde-demo": cmd_pde,
}


def _threads() -> int:
    raw = os.environ.get("HYPERCONV_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"HYPERCONV_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"HYPERCONV_THREADS must be a positive integer, got {raw!r}")
    return value


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
