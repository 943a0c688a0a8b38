"""Command line benchmarks and experiment runners; every subcommand writes CSV.

Subcommands: bench-forward, bench-backward, train-resnet, diffuse, verify.
Each CSV starts with one ``#`` metadata line (version, command, seed,
workers and the run settings) followed by a header row.
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from . import __version__
from .data import DATA_DIR_ENV, load_mnist, mnist_dir, synthetic_classification
from .newton import NewtonConfig, NewtonDivergenceError, assemble_linearized_system, newton_solve
from .nn import INIT_SCHEMES, SgdConfig, init_params, init_resnet
from .pcr import pcr_memory_bytes, pcr_solve
from .sequences import (
    NoiseSchedule,
    NoiseTape,
    ZeroDenoiser,
    anchor_guess,
    backprop_sequential,
    diffusion_sequence,
    first_layer_copy_guess,
    init_denoiser,
    mlp_backward_sequence,
    mlp_forward_sequence,
    rollout,
)
from .training import TrainingDivergenceError, evaluate, train_resnet
from .verify import measure_pcr_bytes, run_checks

# columns that hold wall-clock measurements and differ between runs
TIMING_COLUMNS = frozenset({
    "time_min_s", "time_mean_s", "time_median_s", "time_std_s", "assembly_s", "solve_s",
    "fwd_time_ns", "bwd_time_ns", "fwd_time_ratio", "seq_time_s", "deeppcr_time_s", "speedup",
})
# runtime measurements: timings plus traced peak memory, which depends on
# allocator cache state (numpy reuses small buffers) and so on run history
MEASURED_COLUMNS = TIMING_COLUMNS | {"mem_bytes"}

FORWARD_COLUMNS = (
    "L", "w", "activation", "method", "steps", "barriers", "newton_iters", "time_min_s", "time_mean_s",
    "time_median_s", "time_std_s", "assembly_s", "solve_s", "err_inf", "mem_bytes", "mem_model_bytes", "status",
)
TRAIN_COLUMNS = (
    "step", "epoch", "mode", "loss", "accuracy", "fwd_time_ns", "bwd_time_ns", "newton_iters",
    "loss_diff", "fwd_time_ratio", "status",
)
DIFFUSE_COLUMNS = (
    "dim", "L", "denoiser", "seq_time_s", "deeppcr_time_s", "speedup", "newton_iters", "err_inf", "status",
)


def _ints(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return vals


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def newton_config(args, diffusion=False):
    base = NewtonConfig.diffusion() if diffusion else NewtonConfig.forward_pass()
    return NewtonConfig(
        max_iters=args.newton_max_iters or base.max_iters,
        abs_tol=args.newton_abs_tol,
        rel_tol=args.newton_rel_tol,
        fixed_iters=args.newton_fixed_iters,
    )


def timed(fn, repeats):
    """Run ``fn`` ``repeats`` times; returns ``(result, times)`` with the last result."""
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, times


def time_stats(times):
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return {
        "time_min_s": min(times),
        "time_mean_s": statistics.fmean(times),
        "time_median_s": statistics.median(times),
        "time_std_s": std,
    }


class CsvOut:
    def __init__(self, stream, command, args, columns, extra=None):
        meta = {"deeppcr": __version__, "command": command, "seed": args.seed, "workers": args.workers}
        meta.update(extra or {})
        stream.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        self.writer = csv.DictWriter(stream, fieldnames=columns, lineterminator="\n")
        self.writer.writeheader()
        self.stream = stream

    def row(self, **values):
        self.writer.writerow({k: _fmt(v) for k, v in values.items()})
        self.stream.flush()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _divergence_status(e):
    return f"diverged@{e.iteration}"


# -- bench-forward ----------------------------------------------------------


def bench_forward(args, out):
    csv_out = CsvOut(out, "bench-forward", args, FORWARD_COLUMNS,
                     {"activation": args.activation, "init": args.init, "repeats": args.repeats})
    cfg = newton_config(args)
    for L in args.depths:
        for w in args.widths:
            p = init_params([w] + [w] * (L + 1), args.activation, args.seed, scheme=args.init)
            x = np.random.default_rng(args.seed).standard_normal(w)
            seq = mlp_forward_sequence(p, x)
            ref, times = timed(lambda: rollout(seq), args.repeats)
            csv_out.row(L=L, w=w, activation=args.activation, method="sequential", steps=L, barriers=0,
                        newton_iters=0, **time_stats(times), assembly_s=0.0, solve_s=0.0, err_inf=0.0,
                        mem_bytes=0, mem_model_bytes=0, status="ok")
            row = dict(L=L, w=w, activation=args.activation, method="deeppcr",
                       mem_model_bytes=pcr_memory_bytes(L, w))
            try:
                (z, rep), times = timed(
                    lambda: newton_solve(seq, first_layer_copy_guess(seq), cfg, args.workers), args.repeats
                )
            except NewtonDivergenceError as e:
                csv_out.row(**row, status=_divergence_status(e))
                continue
            system = assemble_linearized_system(seq, z)
            # steps: barriers of one PCR solve; barriers: total over all Newton iterations
            csv_out.row(**row, steps=rep.barriers // rep.iterations, barriers=rep.barriers,
                        newton_iters=rep.iterations, **time_stats(times),
                        assembly_s=rep.assembly_time, solve_s=rep.solve_time,
                        err_inf=float(np.max(np.abs(z[-1] - ref[-1]))),
                        mem_bytes=measure_pcr_bytes(system),
                        status="ok" if rep.converged or cfg.fixed_iters else "not-converged")


# -- bench-backward ---------------------------------------------------------


def bench_backward(args, out):
    csv_out = CsvOut(out, "bench-backward", args, FORWARD_COLUMNS,
                     {"activation": args.activation, "init": args.init, "repeats": args.repeats})
    for L in args.depths:
        for w in args.widths:
            rng = np.random.default_rng(args.seed)
            p = init_params([w] + [w] * (L + 1), args.activation, args.seed, scheme=args.init)
            fwd = rollout(mlp_forward_sequence(p, rng.standard_normal(w)))
            g = rng.standard_normal(w)
            ref, times = timed(lambda: backprop_sequential(p, fwd, g), args.repeats)
            csv_out.row(L=L, w=w, activation=args.activation, method="sequential", steps=L, barriers=0,
                        newton_iters=0, **time_stats(times), assembly_s=0.0, solve_s=0.0, err_inf=0.0,
                        mem_bytes=0, mem_model_bytes=0, status="ok")
            seq = mlp_backward_sequence(p, fwd, g)

            def run():
                t0 = time.perf_counter()
                system = assemble_linearized_system(seq, np.zeros(seq.state_shape), args.workers)
                t1 = time.perf_counter()
                sol, trace = pcr_solve(system, args.workers)
                return sol, trace, system, t1 - t0, time.perf_counter() - t1

            (sol, trace, system, t_asm, t_solve), times = timed(run, args.repeats)
            scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
            err = float(np.max(np.abs(sol[::-1] - ref))) / scale
            csv_out.row(L=L, w=w, activation=args.activation, method="deeppcr",
                        steps=trace.barrier_count, barriers=trace.barrier_count, newton_iters=1,
                        **time_stats(times), assembly_s=t_asm, solve_s=t_solve, err_inf=err,
                        mem_bytes=measure_pcr_bytes(system), mem_model_bytes=pcr_memory_bytes(L, w), status="ok")


# -- train-resnet -----------------------------------------------------------


def load_training_data(args):
    """MNIST from ``--data-dir`` / ``$DEEPPCR_DATA_DIR`` when present, else synthetic."""
    root = mnist_dir(args.data_dir)
    if root is not None:
        try:
            return load_mnist(root, "train", limit=args.samples), load_mnist(root, "test", limit=args.samples), "mnist"
        except FileNotFoundError:
            pass
    train = synthetic_classification(args.samples, 784, 10, seed=args.seed)
    test = synthetic_classification(args.samples, 784, 10, seed=args.seed + 1, center_seed=args.seed)
    return train, test, "synthetic"


def train_cmd(args, out, err=None):
    train, test, source = load_training_data(args)
    depth = args.depths[0]
    width = args.widths[0]
    sgd = SgdConfig(args.lr, args.epochs, args.batch_size, args.seed)
    cfg = newton_config(args)
    p0 = init_resnet(train.feature_dim, width, depth, train.class_count, args.skip_length,
                     args.activation, args.seed)
    csv_out = CsvOut(out, "train-resnet", args, TRAIN_COLUMNS,
                     {"data": source, "samples": len(train), "L": depth, "w": width, "s": args.skip_length,
                      "activation": args.activation, "epochs": args.epochs, "batch_size": args.batch_size,
                      "lr": args.lr, "fixed_iters": args.newton_fixed_iters})
    p_seq, log_seq = train_resnet(p0, train, sgd, "sequential", cfg, args.workers)
    status = "ok"
    try:
        p_pcr, log_pcr = train_resnet(p0, train, sgd, "deeppcr", cfg, args.workers)
    except TrainingDivergenceError as e:
        p_pcr, log_pcr = None, []
        status = f"diverged@batch{e.step}"
    for k, a in enumerate(log_seq):
        b = log_pcr[k] if k < len(log_pcr) else None
        diff = a["loss"] - b["loss"] if b else float("nan")
        ratio = a["fwd_time_ns"] / max(b["fwd_time_ns"], 1) if b else float("nan")
        csv_out.row(**a, loss_diff=diff, fwd_time_ratio=ratio, status="ok")
        if b:
            csv_out.row(**b, loss_diff=diff, fwd_time_ratio=ratio, status="ok")
    if status != "ok":
        csv_out.row(step=len(log_pcr), mode="deeppcr", status=status)
    acc_seq = evaluate(p_seq, test)
    msg = f"final test accuracy: sequential {acc_seq:.4f}"
    if p_pcr is not None:
        msg += f", deeppcr {evaluate(p_pcr, test):.4f}"
    print(msg, file=err or sys.stderr)


# -- diffuse ----------------------------------------------------------------


def diffuse_cmd(args, out):
    csv_out = CsvOut(out, "diffuse", args, DIFFUSE_COLUMNS, {"denoiser": args.denoiser, "repeats": args.repeats})
    cfg = newton_config(args, diffusion=True)
    for d in args.widths:
        for L in args.depths:
            den = ZeroDenoiser(d) if args.denoiser == "zero" else init_denoiser(d, seed=args.seed)
            tape = NoiseTape.sample(L, d, args.seed)
            z_init = np.random.default_rng([args.seed, d]).standard_normal(d)
            seq = diffusion_sequence(den, NoiseSchedule.linear(L), tape, z_init)
            ref, t_seq = timed(lambda: rollout(seq), args.repeats)
            row = dict(dim=d, L=L, denoiser=args.denoiser, seq_time_s=min(t_seq))
            try:
                (z, rep), t_pcr = timed(lambda: newton_solve(seq, anchor_guess(seq), cfg, args.workers), args.repeats)
            except NewtonDivergenceError as e:
                csv_out.row(**row, status=_divergence_status(e))
                continue
            csv_out.row(**row, deeppcr_time_s=min(t_pcr), speedup=min(t_seq) / min(t_pcr),
                        newton_iters=rep.iterations, err_inf=float(np.max(np.abs(z[-1] - ref[-1]))),
                        status="ok" if rep.converged or cfg.fixed_iters else "not-converged")


# -- verify -----------------------------------------------------------------


def verify_cmd(args, out):
    results = run_checks(seed=args.seed, workers=args.workers)
    for r in results:
        out.write(r.line() + "\n")
    failed = [r.name for r in results if not r.ok]
    out.write(f"{len(results) - len(failed)}/{len(results)} checks passed\n")
    return 1 if failed else 0


COMMANDS = {
    "bench-forward": bench_forward,
    "bench-backward": bench_backward,
    "train-resnet": train_cmd,
    "diffuse": diffuse_cmd,
    "verify": verify_cmd,
}

DEFAULTS = {
    "bench-forward": dict(depths=[64, 256, 1024], widths=[2, 4, 16]),
    "bench-backward": dict(depths=[64, 256, 1024], widths=[2, 4, 16]),
    "train-resnet": dict(depths=[64], widths=[16]),
    "diffuse": dict(depths=[256, 512, 1024], widths=[8, 16, 32]),
    "verify": dict(depths=[64], widths=[4]),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="deeppcr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deeppcr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--depths", type=_ints, default=None, help="comma-separated L values")
        p.add_argument("--widths", type=_ints, default=None, help="comma-separated w (or state dim) values")
        p.add_argument("--activation", choices=("relu", "tanh", "sigmoid"), default="relu")
        p.add_argument("--init", choices=INIT_SCHEMES, default="fan_in", help="MLP init scheme for benchmarks")
        p.add_argument("--repeats", type=_positive, default=3)
        p.add_argument("--workers", type=_positive, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--newton-max-iters", type=_positive, default=None)
        p.add_argument("--newton-abs-tol", type=float, default=1e-4)
        p.add_argument("--newton-rel-tol", type=float, default=1e-4)
        p.add_argument("--newton-fixed-iters", type=_positive, default=None)
        p.add_argument("--skip-length", type=_positive, default=4)
        p.add_argument("--epochs", type=int, default=2)
        p.add_argument("--batch-size", type=_positive, default=128)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--samples", type=_positive, default=1000)
        p.add_argument("--denoiser", choices=("mlp", "zero"), default="mlp")
        p.add_argument("--data-dir", default=None, help=f"MNIST directory (overrides ${DATA_DIR_ENV})")
        p.add_argument("--out", default="-", help="output path, '-' for stdout")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    for k, v in DEFAULTS[args.command].items():
        if getattr(args, k) is None:
            setattr(args, k, v)
    fn = COMMANDS[args.command]
    if args.out == "-":
        return fn(args, sys.stdout) or 0
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        return fn(args, f) or 0


if __name__ == "__main__":
    sys.exit(main())
