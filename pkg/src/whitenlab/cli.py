"""Command-line harness binding the library together.

Subcommands: one-shot whitening, gradient checks, disturbance/conditioning
sweeps, MLP experiments, inference from a checkpoint, and micro-benchmarks.
Inputs are flags or a JSON config; outputs are CSV files whose first line
echoes the fully-resolved configuration as a JSON comment, so re-running
the echoed setup reproduces the file bitwise. Report commands also render
a PNG figure next to the CSV unless --no-plot is given.

Exit codes are a stable contract: 0 ok, 1 check-failed, 2 bad-input,
3 numeric-failure, 4 diverged-run.
"""

import argparse
import json
import math
import os
import statistics
import sys
import time

import numpy as np

from . import data as datamod
from . import linalg, normlayers, stochastic, train
from .errors import InputError, NumericError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4

GRAD_CHECK_TOLERANCE = 1e-5


def _default_seed() -> int:
    try:
        return int(os.environ.get("WHITENLAB_SEED", "0"))
    except ValueError:
        return 0


def _echo_line(config: dict) -> str:
    return "# " + json.dumps(config, sort_keys=True)


def read_matrix_csv(path) -> np.ndarray:
    """Comma-separated float rows; lines starting with '#' are ignored."""
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    rows.append([float(v) for v in line.split(",")])
                except ValueError as exc:
                    raise InputError(f"{path}: malformed CSV row {line!r}") from exc
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise InputError(f"{path}: expected a rectangular, non-empty matrix")
    return linalg.as_matrix(np.array(rows), path)


def _matrix_lines(x: np.ndarray):
    for row in x:
        yield ",".join(repr(float(v)) for v in row)


def _write_lines(path, lines):
    if path is None:
        for line in lines:
            print(line)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")


def _plot_path(out) -> str:
    base, _ = os.path.splitext(out)
    return base + ".png"


def _norm_config(kind: str, eps: float, iterations: int, group: int, d: int) -> normlayers.NormConfig:
    group = d if group == 0 else group
    return normlayers.NormConfig(
        kind=kind, eps=eps, iterations=iterations, group_size=group, affine=False
    )


# ---------------------------------------------------------------------------
# whiten


def cmd_whiten(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if (args.input is None) == (args.random is None):
        raise InputError("provide exactly one of --input or --random d,m")
    if args.input is not None:
        x = read_matrix_csv(args.input)
    else:
        try:
            d, m = (int(v) for v in args.random.split(","))
        except ValueError as exc:
            raise InputError("--random expects 'd,m'") from exc
        if d < 1 or m < 1:
            raise InputError("--random dimensions must be >= 1")
        x = datamod.stream(seed, 40).standard_normal((d, m))
    d, m = x.shape
    cfg = _norm_config(args.kind, args.eps, args.T, args.group, d)
    config = {
        "command": "whiten",
        "kind": cfg.kind,
        "eps": cfg.eps,
        "iterations": cfg.iterations,
        "group_size": cfg.group_size,
        "seed": seed,
        "input": args.input,
        "random": args.random,
        "rows": d,
        "cols": m,
    }
    xhat, _ = normlayers.grouped_forward(x, cfg)

    x_c = x - x.mean(axis=1, keepdims=True)
    sigma = linalg.covariance(x_c, cfg.eps)
    trace = float(np.trace(sigma))
    gap = linalg.spectral_norm_bound(sigma / trace) if trace > 0 else math.inf
    out_cov = (xhat @ xhat.T) / m
    residual = float(np.linalg.norm(out_cov - np.eye(d)) / math.sqrt(d))

    lines = [_echo_line(config)]
    lines.extend(_matrix_lines(xhat))
    lines.append(
        f"# diagnostics cov_residual={residual!r} spectral_gap={gap!r} trace={trace!r}"
    )
    _write_lines(args.out, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def _layer_gradient_fn(kind: str, cfg: normlayers.NormConfig, shape, probe, perturb: float):
    """Loss sum(probe * forward(x)) over the flattened input, with gradient."""

    def f(vec):
        x = vec.reshape(shape)
        if kind == "bn":
            out, cache = normlayers.bn_forward(x, cfg.eps)
            value = float((probe * out).sum())
            grad = normlayers.bn_backward(probe.copy(), cache)
        elif kind == "dbn":
            out, cache = normlayers.dbn_forward(x, cfg.eps)
            value = float((probe * out).sum())
            grad = normlayers.dbn_backward(probe.copy(), cache)
        else:
            out, cache = normlayers.iternorm_forward(x, cfg)
            value = float((probe * out).sum())
            grad = normlayers.iternorm_backward(probe.copy(), cache)
        return value, (grad + perturb).ravel()

    return f


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    cfg = _norm_config(args.kind, args.eps, args.T, 0, args.d)
    config = {
        "command": "grad-check",
        "kind": args.kind,
        "d": args.d,
        "m": args.m,
        "iterations": args.T,
        "eps": args.eps,
        "trials": args.trials,
        "seed": seed,
        "perturb": args.perturb,
        "tolerance": GRAD_CHECK_TOLERANCE,
    }
    lines = [_echo_line(config)]
    worst = 0.0
    failing = []
    for trial in range(args.trials):
        trial_seed = datamod.derive_seed(seed, 41, trial)
        rng = datamod.stream(seed, 41, trial)
        x = rng.standard_normal((args.d, args.m))
        probe = rng.standard_normal((args.d, args.m))
        f = _layer_gradient_fn(args.kind, cfg, x.shape, probe, args.perturb)
        err = train.grad_check(f, x.ravel(), step=1e-6)
        status = "pass" if err <= GRAD_CHECK_TOLERANCE else "FAIL"
        lines.append(f"trial={trial} seed={trial_seed} max_rel_err={err:.3e} {status}")
        worst = max(worst, err)
        if err > GRAD_CHECK_TOLERANCE:
            failing.append(trial_seed)
    lines.append(f"worst max_rel_err={worst:.3e} tolerance={GRAD_CHECK_TOLERANCE:g}")
    if failing:
        lines.append(f"FAILED: replay with seeds {failing}")
    _write_lines(args.out, lines)
    if args.out is not None:
        print(lines[-1])
    return EXIT_CHECK_FAILED if failing else EXIT_OK


# ---------------------------------------------------------------------------
# snd


def cmd_snd(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        grid = [int(v) for v in args.grid.split(",")]
    except ValueError as exc:
        raise InputError("--grid expects comma-separated integers") from exc
    axis = {"batch": "batch_size", "dim": "dimension"}.get(args.sweep)
    if axis is None:
        raise InputError("--sweep must be 'batch' or 'dim'")
    group = args.group if args.group != 0 else max(args.d, max(grid))
    cfg = normlayers.NormConfig(
        kind=args.kind, eps=args.eps, iterations=args.T, group_size=group, affine=False
    )
    # the swept axis is replaced per grid point; seed the base query with the
    # first point so an irrelevant default cannot fail validation
    base_batch = grid[0] if axis == "batch_size" else args.B
    base = stochastic.SNDQuery(
        normalizer=cfg,
        dimension=grid[0] if axis == "dimension" else args.d,
        batch_size=base_batch,
        repeats=args.s,
        probes=args.N,
        population_size=args.pop_size,
        kappa_batch=args.kappa_batch,
        seed=seed,
    )
    config = {
        "command": "snd",
        "sweep": args.sweep,
        "grid": grid,
        "kind": args.kind,
        "eps": args.eps,
        "iterations": args.T,
        "group_size": group,
        "B": args.B,
        "d": args.d,
        "repeats": args.s,
        "probes": args.N,
        "population_size": args.pop_size,
        "kappa_batch": args.kappa_batch,
        "repetitions": args.reps,
        "seed": seed,
    }
    reports = stochastic.sweep(axis, grid, base, repetitions=args.reps)
    stochastic.write_reports_csv(args.out, reports, echo=config)
    if not args.no_plot:
        from . import plotting

        plotting.plot_snd_reports(reports, args.sweep, _plot_path(args.out))
    if all(r.status == "failed" for r in reports):
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_TRAIN_DEFAULTS = {
    "seed": None,  # resolved against the environment default
    "data": {
        "source": "synthetic",
        "images": None,
        "labels": None,
        "train_size": 2000,
        "test_size": 1000,
    },
    "model": {
        "hidden": [100, 100, 100],
        "normalizer": {
            "kind": "iternorm",
            "eps": 1e-5,
            "iterations": 5,
            "group_size": 64,
            "momentum": 0.1,
            "affine": True,
        },
    },
    "run": {
        "learning_rate": 0.5,
        "iterations": 500,
        "batch_size": 0,
        "eval_every": 10,
    },
}


def _merge_config(defaults: dict, override: dict, path="") -> dict:
    merged = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise InputError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_config(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def resolve_train_config(config_path, overrides: dict) -> dict:
    loaded = {}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InputError("config must be a JSON object")
    config = _merge_config(_TRAIN_DEFAULTS, loaded)
    for key, value in overrides.items():
        if value is None:
            continue
        section, name = key
        config[section][name] = value
    if config["seed"] is None:
        config["seed"] = _default_seed()
    if config["model"]["normalizer"] is not None:
        # validate + materialize normalizer defaults
        config["model"]["normalizer"] = normlayers.NormConfig.from_dict(
            config["model"]["normalizer"]
        ).to_dict()
    return config


def _load_train_data(config: dict):
    dc = config["data"]
    descriptor = {
        "source": dc["source"],
        "images": dc["images"],
        "labels": dc["labels"],
        "train_size": int(dc["train_size"]),
        "test_size": int(dc["test_size"]),
        "seed": config["seed"],
    }
    return datamod.load_split(descriptor)


def cmd_train(args) -> int:
    overrides = {
        ("run", "learning_rate"): args.lr,
        ("run", "iterations"): args.iterations,
        ("run", "batch_size"): args.batch_size,
    }
    config = resolve_train_config(args.config, overrides)
    if args.seed is not None:
        config["seed"] = args.seed
    config["command"] = "train"
    config["out"] = args.out
    train_ds, test_ds = _load_train_data(config)
    norm_cfg = config["model"]["normalizer"]
    spec = train.MLPSpec(
        widths=(train_ds.dim, *config["model"]["hidden"], 10),
        normalizer=None if norm_cfg is None else normlayers.NormConfig.from_dict(norm_cfg),
        seed=config["seed"],
    )
    run_cfg = train.TrainConfig(
        learning_rate=float(config["run"]["learning_rate"]),
        iterations=int(config["run"]["iterations"]),
        batch_size=int(config["run"]["batch_size"]),
        eval_every=int(config["run"]["eval_every"]),
    )
    run = train.run_experiment(spec, run_cfg, train_ds, test_ds)
    train.write_run_csv(args.out, run, echo=config)
    ckpt_path = os.path.splitext(args.out)[0] + ".ckpt.json"
    train.save_checkpoint(ckpt_path, spec, run.params)
    if not args.no_plot:
        from . import plotting

        plotting.plot_train_run(run, _plot_path(args.out))
    return EXIT_DIVERGED if run.diverged else EXIT_OK


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    spec, params = train.load_checkpoint(args.checkpoint)
    x = read_matrix_csv(args.input)
    if x.shape[0] != spec.widths[0]:
        raise InputError(
            f"input dimension {x.shape[0]} does not match checkpoint width {spec.widths[0]}"
        )
    logits = train.infer_logits(spec, params, x)
    config = {
        "command": "infer",
        "checkpoint": args.checkpoint,
        "input": args.input,
        "rows": int(logits.shape[0]),
        "cols": int(logits.shape[1]),
    }
    lines = [_echo_line(config)]
    lines.extend(_matrix_lines(logits))
    _write_lines(args.out, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _timed(fn, reps: int, warmup: int = 3):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    rng = datamod.stream(seed, 44)
    x = rng.standard_normal((args.d, args.m))
    g = rng.standard_normal((args.d, args.m))
    iternorm_cfg = normlayers.NormConfig(
        "iternorm", eps=args.eps, iterations=args.T, group_size=args.d, affine=False
    )
    rows = []

    def record(op, fn):
        samples = _timed(fn, args.reps)
        rows.append(
            {
                "op": op,
                "reps": args.reps,
                "mean_ms": statistics.fmean(samples),
                "std_ms": statistics.pstdev(samples),
                "median_ms": statistics.median(samples),
            }
        )

    record("bn_forward", lambda: normlayers.bn_forward(x, args.eps))
    record("bn_backward", lambda: normlayers.bn_backward(g, normlayers.bn_forward(x, args.eps)[1]))
    record("dbn_forward", lambda: normlayers.dbn_forward(x, args.eps))
    record(
        "dbn_backward",
        lambda: normlayers.dbn_backward(g, normlayers.dbn_forward(x, args.eps)[1]),
    )
    record("iternorm_forward", lambda: normlayers.iternorm_forward(x, iternorm_cfg))
    record(
        "iternorm_backward",
        lambda: normlayers.iternorm_backward(g, normlayers.iternorm_forward(x, iternorm_cfg)[1]),
    )
    x_c = x - x.mean(axis=1, keepdims=True)
    sigma = linalg.covariance(x_c, args.eps)
    record("sym_eigen", lambda: linalg.sym_eigen(sigma))

    # Backward rows above time forward+backward; subtract the forward medians
    # in analysis if the pure backward is wanted. The cost model predicts the
    # whitening overhead relative to a same-width 3x3 convolution.
    model_ratio = 2.0 / 9.0 + args.T * args.d / args.m
    config = {
        "command": "bench",
        "d": args.d,
        "m": args.m,
        "iterations": args.T,
        "eps": args.eps,
        "reps": args.reps,
        "seed": seed,
        "cost_model_iternorm_vs_conv3x3": model_ratio,
    }
    lines = [_echo_line(config), "op,reps,mean_ms,std_ms,median_ms"]
    for r in rows:
        lines.append(
            f"{r['op']},{r['reps']},{r['mean_ms']!r},{r['std_ms']!r},{r['median_ms']!r}"
        )
    _write_lines(args.out, lines)
    if args.out is not None and not args.no_plot:
        from . import plotting

        plotting.plot_bench_rows(rows, _plot_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whitenlab",
        description="Batch standardization/whitening layers and their disturbance lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_norm_flags(p, default_T=5, default_eps=1e-5):
        p.add_argument("--kind", choices=normlayers.KINDS, default="iternorm")
        p.add_argument("--T", type=int, default=default_T, help="whitening iterations")
        p.add_argument("--eps", type=float, default=default_eps)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("whiten", help="whiten one matrix and report diagnostics")
    p.add_argument("--input", help="CSV matrix, rows are dimensions")
    p.add_argument("--random", help="generate a d,m standard-normal matrix")
    p.add_argument("--group", type=int, default=0, help="group size, 0 = full dimension")
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    add_norm_flags(p)
    p.set_defaults(fn=cmd_whiten)

    p = sub.add_parser("grad-check", help="verify a backward pass against finite differences")
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="add this to the analytic gradient (self-test)")
    p.add_argument("--out", default=None)
    add_norm_flags(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("snd", help="disturbance/conditioning sweep to CSV (+PNG)")
    p.add_argument("--sweep", choices=("batch", "dim"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated ascending values")
    p.add_argument("--B", type=int, default=1024, help="base batch size")
    p.add_argument("--d", type=int, default=128, help="base dimension")
    p.add_argument("--s", type=int, default=100, help="resamples per probe")
    p.add_argument("--N", type=int, default=1000, help="probes per report")
    p.add_argument("--pop-size", type=int, default=60000)
    p.add_argument("--kappa-batch", type=int, default=1024)
    p.add_argument("--reps", type=int, default=10, help="repetitions per grid point")
    p.add_argument("--group", type=int, default=0, help="group size, 0 = full dimension")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    add_norm_flags(p)
    p.set_defaults(fn=cmd_snd)

    p = sub.add_parser("train", help="train an MLP per a JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="trainrun.csv")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on a CSV matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", help="micro-benchmark the normalizers")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--m", type=int, default=2048)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--out", default=None)
    p.add_argument("--no-plot", action="store_true")
    add_norm_flags(p)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
