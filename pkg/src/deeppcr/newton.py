"""Newton outer loop around the PCR solve.

Each iteration linearises the collated system at the current iterate,
solves the block-bidiagonal correction system by PCR and adds the
correction. Convergence is measured with the infinity norm of the residual.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import _parallel
from .linalg import ShapeError, norm_inf
from .pcr import BlockBidiagSystem, pcr_solve

__all__ = [
    "NewtonConfig",
    "NewtonReport",
    "NewtonDivergenceError",
    "residual",
    "assemble_linearized_system",
    "newton_solve",
    "solve_linear",
]

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class NewtonConfig:
    max_iters: int = 15
    abs_tol: float = 1e-4
    rel_tol: float = 1e-4
    fixed_iters: int = None
    confirm_step: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.fixed_iters is not None and self.fixed_iters < 1:
            raise ValueError("fixed_iters must be >= 1")

    @classmethod
    def forward_pass(cls, **kw):
        return cls(**{"max_iters": 15, **kw})

    @classmethod
    def diffusion(cls, **kw):
        return cls(**{"max_iters": 30, **kw})


@dataclass
class NewtonReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    initial_residual: float = 0.0
    barriers: int = 0
    assembly_time: float = 0.0
    solve_time: float = 0.0


class NewtonDivergenceError(ArithmeticError):
    def __init__(self, iteration, message):
        super().__init__(f"Newton diverged at iteration {iteration}: {message}")
        self.iteration = iteration


def _check_states(seq, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != seq.state_shape:
        raise ShapeError(f"states {z.shape} do not match sequence {seq.state_shape}")
    return z


def _steps(seq, z, workers):
    # f_l(z_{l-1}) for l = 1..L, split by row ranges
    L = seq.length
    out = np.empty((L,) + z.shape[1:])

    def run(s, e):
        out[s - 1 : e - 1] = seq.evaluate(z[s - 1 : e - 1], s)

    _parallel.for_rows(run, 1, L + 1, workers)
    return out


def residual(seq, z, workers=1):
    """Right-hand side of the Newton system: ``f_l(z_{l-1}) - z_l`` per block,
    with ``f_0(x) - z_0`` in block 0."""
    z = _check_states(seq, z)
    res = np.empty_like(z)
    res[0] = seq.initial_value() - z[0]
    if seq.length:
        res[1:] = _steps(seq, z, workers) - z[1:]
    return res


def _operators(seq, z, workers):
    d = seq.width
    ops = np.zeros((seq.length + 1,) + z.shape[1:] + (d,))

    def run(s, e):
        np.negative(seq.jacobian(z[s - 1 : e - 1], s), out=ops[s:e])

    _parallel.for_rows(run, 1, seq.length + 1, workers)
    return ops


def assemble_linearized_system(seq, z, workers=1, rhs=None):
    """Block-bidiagonal Newton system at ``z``: ``A_l = -J_l(z_{l-1})``.

    Jacobians of different steps are evaluated in parallel row ranges.
    ``rhs`` may be passed when the residual at ``z`` is already known.
    """
    z = _check_states(seq, z)
    if rhs is None:
        rhs = residual(seq, z, workers)
    return BlockBidiagSystem(_operators(seq, z, workers), rhs)


def solve_linear(seq, workers=1):
    """Single PCR solve for a linear sequence (no Newton iterations)."""
    z0 = np.zeros(seq.state_shape)
    system = assemble_linearized_system(seq, z0, workers)
    sol, trace = pcr_solve(system, workers)
    return sol, trace


def newton_solve(seq, z0, config=None, workers=1):
    """Newton iterations ``z <- z + dz`` with ``dz`` from a PCR solve.

    The iteration count is the number of PCR solves. The convergence test
    uses the residual assembled at the start of an iteration (before its
    update is applied), so a converged run returns the iterate one update
    past the first one within tolerance. ``residual_history[k]`` is the
    residual before update ``k + 1``; one final entry holds the residual of
    the returned iterate. Linear sequences stop after their single update,
    which is exact.

    Raises :class:`NewtonDivergenceError` on non-finite values or when the
    residual grows by more than ``1e6`` over its initial value.
    """
    config = config or NewtonConfig()
    z = np.array(_check_states(seq, z0))
    report = NewtonReport()
    limit = config.fixed_iters if config.fixed_iters is not None else config.max_iters

    def measure(k, rhs):
        r = norm_inf(rhs)
        report.residual_history.append(r)
        if not np.isfinite(r):
            raise NewtonDivergenceError(k, "non-finite residual")
        if k and r > DIVERGENCE_FACTOR * max(report.initial_residual, np.finfo(float).tiny):
            raise NewtonDivergenceError(
                k, f"residual {r:.3e} exceeds {DIVERGENCE_FACTOR:g} x initial {report.initial_residual:.3e}"
            )
        return r

    def within(r):
        r0 = report.initial_residual
        if r <= config.abs_tol:
            return "abs_tol"
        if r0 > 0 and r / r0 <= config.rel_tol:
            return "rel_tol"
        return ""

    t0 = time.perf_counter()
    rhs = residual(seq, z, workers)
    report.assembly_time += time.perf_counter() - t0
    report.initial_residual = measure(0, rhs)
    r = report.initial_residual

    for k in range(1, limit + 1):
        if not config.confirm_step and config.fixed_iters is None and not seq.is_linear:
            reason = within(r)
            if reason:
                report.converged = True
                report.stop_reason = reason
                return z, report
        t0 = time.perf_counter()
        system = assemble_linearized_system(seq, z, workers, rhs=rhs)
        t1 = time.perf_counter()
        dz, trace = pcr_solve(system, workers)
        t2 = time.perf_counter()
        report.assembly_time += t1 - t0
        report.solve_time += t2 - t1
        report.barriers += trace.barrier_count
        if not np.all(np.isfinite(dz)):
            raise NewtonDivergenceError(k, "non-finite update")
        z += dz
        report.iterations = k

        t0 = time.perf_counter()
        rhs = residual(seq, z, workers)
        report.assembly_time += time.perf_counter() - t0
        reason = "linear" if seq.is_linear else within(r)
        r = measure(k, rhs)
        if config.fixed_iters is None and reason:
            report.converged = True
            report.stop_reason = reason
            return z, report

    if config.fixed_iters is not None:
        report.stop_reason = "fixed_iters"
        report.converged = bool(within(r))
    else:
        report.stop_reason = "max_iters"
    return z, report
