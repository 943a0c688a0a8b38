"""Self-check suite behind ``deeppcr verify``.

Every check is deterministic for a given seed and prints nothing that
depends on the worker count or the clock, so transcripts can be diffed
across machines and worker settings.
"""

import gc
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .newton import NewtonConfig, newton_solve, solve_linear
from .nn import init_params, init_resnet
from .pcr import (
    BlockBidiagSystem,
    _reduce,
    barrier_count,
    forward_substitution_solve,
    pcr_memory_bytes,
    pcr_solve,
)
from .sequences import (
    NoiseSchedule,
    NoiseTape,
    backprop_sequential,
    diffusion_sequence,
    first_layer_copy_guess,
    init_denoiser,
    mlp_backward_sequence,
    mlp_forward_sequence,
    resnet_collapsed_sequence,
    rollout,
)

__all__ = ["CheckResult", "random_system", "oracle_cases", "fd_jacobian", "run_checks", "CHECKS"]

ORACLE_LENGTHS = tuple(range(1, 10)) + (16, 64, 256, 1024)
ORACLE_DIMS = (1, 2, 4, 8, 16)
DETERMINISM_WORKERS = (1, 2, 4, 8)


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


def random_system(rng, length, dim, batch=()):
    """Entries uniform in ``[-1, 1]`` scaled by ``1/dim`` to bound growth."""
    ops = rng.uniform(-1.0, 1.0, (length + 1,) + batch + (dim, dim)) / dim
    ops[0] = 0.0
    rhs = rng.uniform(-1.0, 1.0, (length + 1,) + batch + (dim,))
    return BlockBidiagSystem(ops, rhs)


def oracle_cases(seed=0, count=200):
    """``count`` (length, dim, system) triples cycling through every length and dim."""
    rng = np.random.default_rng(seed)
    for k in range(count):
        L = ORACLE_LENGTHS[k % len(ORACLE_LENGTHS)]
        d = ORACLE_DIMS[(k // len(ORACLE_LENGTHS)) % len(ORACLE_DIMS)]
        yield L, d, random_system(rng, L, d)


def rel_inf_error(a, b):
    scale = max(float(np.max(np.abs(b))), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b))) / scale


def fd_jacobian(step, z, h=1e-6):
    """Central finite differences of ``step`` at ``z`` (one column per coordinate)."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for j in range(z.shape[-1]):
        e = np.zeros_like(z)
        e[j] = h
        cols.append((step(z + e) - step(z - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def check_oracle(seed, workers, reduce):
    worst = 0.0
    n = 0
    for L, d, system in oracle_cases(seed):
        sol, _ = pcr_solve(system, workers, reduce=reduce)
        worst = max(worst, rel_inf_error(sol, forward_substitution_solve(system)))
        n += 1
    return worst <= 1e-10, f"{n} systems, worst relative inf-error {worst:.1e} (bound 1e-10)"


def check_barriers(seed, workers, reduce):
    rng = np.random.default_rng(seed)
    bad = []
    lengths = (0, 1, 2, 3, 4, 5, 7, 8, 9, 64, 100, 1024, 4096)
    for L in lengths:
        _, trace = pcr_solve(random_system(rng, L, 1), workers, reduce=reduce)
        if trace.barrier_count != barrier_count(L):
            bad.append(f"L={L}: {trace.barrier_count}")
    return not bad, f"{len(lengths)} lengths" + (f", mismatches {bad}" if bad else ", all ceil(log2 L)")


def _smooth_points(rng, seq, count):
    # states away from ReLU kinks by at least 1e-4
    pts = []
    while len(pts) < count:
        l = int(rng.integers(1, seq.length + 1))
        z = rng.standard_normal(seq.width)
        if np.min(np.abs(z)) > 1e-4:
            pts.append((l, z))
    return pts


def _fd_sequences(seed):
    rng = np.random.default_rng(seed)
    for act in ("relu", "tanh", "sigmoid"):
        p = init_params([4] + [6] * 9, act, seed)
        yield f"mlp-{act}", mlp_forward_sequence(p, rng.standard_normal(4))
    p = init_params([4] + [6] * 9, "tanh", seed)
    fwd = rollout(mlp_forward_sequence(p, rng.standard_normal(4)))
    yield "mlp-backward", mlp_backward_sequence(p, fwd, rng.standard_normal(6))
    r = init_resnet(4, 6, 8, 3, skip_length=4, activation="tanh", seed=seed)
    yield "resnet-block", resnet_collapsed_sequence(r, rng.standard_normal(4))
    L = 16
    yield "diffusion", diffusion_sequence(
        init_denoiser(6, seed=seed), NoiseSchedule.linear(L), NoiseTape.sample(L, 6, seed), rng.standard_normal(6)
    )


def check_fd_jacobians(seed, workers, reduce):
    rng = np.random.default_rng(seed + 1)
    worst = {}
    for name, seq in _fd_sequences(seed):
        err = 0.0
        for l, z in _smooth_points(rng, seq, 20):
            exact = seq.step_jacobian(l, z)
            approx = fd_jacobian(lambda v: seq.step(l, v), z)
            err = max(err, rel_inf_error(approx, exact))
        worst[name] = err
    bad = {k: v for k, v in worst.items() if v > 1e-5}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return not bad, f"20 points each (bound 1e-5): {detail}"


def check_determinism(seed, workers, reduce):
    rng = np.random.default_rng(seed)
    system = random_system(rng, 333, 5, batch=(3,))
    ref, _ = pcr_solve(system, 1, reduce=reduce)
    p = init_params([4] + [8] * 129, "tanh", seed, scheme="fan_in")
    seq = mlp_forward_sequence(p, rng.standard_normal((2, 4)))
    zref, _ = newton_solve(seq, first_layer_copy_guess(seq), NewtonConfig.forward_pass(), 1)
    counts = sorted(set(DETERMINISM_WORKERS) | {workers})
    same = True
    for w in counts:
        sol, _ = pcr_solve(system, w, reduce=reduce)
        z, _ = newton_solve(seq, first_layer_copy_guess(seq), NewtonConfig.forward_pass(), w)
        again, _ = pcr_solve(system, w, reduce=reduce)
        same &= np.array_equal(sol, ref) and np.array_equal(z, zref) and np.array_equal(again, sol)
    return bool(same), f"pcr_solve and newton_solve bitwise equal for workers {list(DETERMINISM_WORKERS)} and repeats"


def measure_pcr_bytes(system, reduce=_reduce):
    """Peak traced allocation of one single-worker :func:`pcr_solve` call."""
    # untraced warm-up so one-off lazy initialisation is not counted
    pcr_solve(system, 1, reduce=reduce)
    gc.collect()
    gc.disable()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        pcr_solve(system, 1, reduce=reduce)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
        gc.enable()
    return peak - base


def check_memory(seed, workers, reduce):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for L, d in ((256, 4), (1024, 8), (512, 16)):
        measured = measure_pcr_bytes(random_system(rng, L, d), reduce)
        model = pcr_memory_bytes(L, d)
        worst = max(worst, max(measured / model, model / measured))
    return worst <= 2.0, f"measured/model ratio within {worst:.2f}x (bound 2x)"


def check_backward(seed, workers, reduce):
    rng = np.random.default_rng(seed)
    worst = 0.0
    iters = set()
    for k in range(5):
        p = init_params([8] + [8] * 33, "tanh", seed + k)
        fwd = rollout(mlp_forward_sequence(p, rng.standard_normal(8)))
        g = rng.standard_normal(8)
        seq = mlp_backward_sequence(p, fwd, g)
        adj, report = newton_solve(seq, np.zeros(seq.state_shape), NewtonConfig(), workers)
        iters.add(report.iterations)
        worst = max(worst, rel_inf_error(adj[::-1], backprop_sequential(p, fwd, g)))
    ok = worst <= 1e-10 and iters == {1}
    return ok, f"adjoint relative inf-error {worst:.1e} (bound 1e-10), newton iterations {sorted(iters)}"


def check_linear_one_shot(seed, workers, reduce):
    rng = np.random.default_rng(seed)
    p = init_params([3] + [5] * 41, "identity", seed)
    seq = mlp_forward_sequence(p, rng.standard_normal(3))
    z, report = newton_solve(seq, rng.standard_normal(seq.state_shape), NewtonConfig(), workers)
    err = rel_inf_error(z, rollout(seq))
    sol, _ = solve_linear(seq, workers)
    err = max(err, rel_inf_error(sol, rollout(seq)))
    ok = report.iterations == 1 and err <= 1e-10
    return ok, f"affine chain: {report.iterations} iteration, relative inf-error {err:.1e}"


def check_newton_forward(seed, workers, reduce):
    worst_it, worst_err = 0, 0.0
    for act in ("relu", "tanh", "sigmoid"):
        for w in (2, 4, 16):
            p = init_params([w] + [w] * 257, act, seed, scheme="fan_in")
            seq = mlp_forward_sequence(p, np.random.default_rng(seed).standard_normal(w))
            z, rep = newton_solve(seq, first_layer_copy_guess(seq), NewtonConfig.forward_pass(), workers)
            worst_it = max(worst_it, rep.iterations)
            worst_err = max(worst_err, float(np.linalg.norm(z[-1] - rollout(seq)[-1])))
    ok = worst_it <= 6 and worst_err <= 1e-4
    return ok, f"L=256 MLPs: max iterations {worst_it} (bound 6), max output 2-error {worst_err:.1e} (bound 1e-4)"


CHECKS = (
    ("oracle-equivalence", check_oracle),
    ("barrier-count", check_barriers),
    ("fd-jacobians", check_fd_jacobians),
    ("determinism", check_determinism),
    ("memory-model", check_memory),
    ("backward-parity", check_backward),
    ("linear-one-shot", check_linear_one_shot),
    ("newton-forward", check_newton_forward),
)


def run_checks(seed=0, workers=1, reduce=_reduce, only=None):
    results = []
    for name, fn in CHECKS:
        if only and name not in only:
            continue
        try:
            ok, detail = fn(seed, workers, reduce)
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
