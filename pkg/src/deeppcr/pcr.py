"""Block-bidiagonal systems and their solution by Parallel Cyclic Reduction.

A system of length ``L`` has unknowns ``x_0 .. x_L`` and rows::

    x_0                 = r_0
    x_l + A_l x_{l-1}   = r_l          l = 1 .. L

The diagonal blocks are identity and are never stored. ``A_l`` is the
literal sub-diagonal entry, so for a Newton system it holds ``-J_l``.

Storage is stacked: ``ops`` has shape ``(L+1, *batch, D, D)`` with
``ops[0]`` unused (kept zero) and ``rhs`` has shape ``(L+1, *batch, D)``.
Blocks narrower than ``D`` are zero-padded; padding never couples to real
entries, so it is carried through the reduction unchanged.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _parallel
from .linalg import ShapeError, matmul, matvec

__all__ = [
    "BlockBidiagSystem",
    "PcrTrace",
    "pcr_solve",
    "pcr_reduce_step",
    "forward_substitution_solve",
    "barrier_count",
    "pcr_memory_bytes",
]


def _frozen(a):
    v = np.asarray(a, dtype=np.float64).view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class BlockBidiagSystem:
    ops: np.ndarray
    rhs: np.ndarray
    state_dims: tuple = None

    def __post_init__(self):
        ops = np.asarray(self.ops, dtype=np.float64)
        rhs = np.asarray(self.rhs, dtype=np.float64)
        if rhs.ndim < 2 or ops.ndim != rhs.ndim + 1:
            raise ShapeError(f"ops {ops.shape} / rhs {rhs.shape} are not stacked blocks")
        if ops.shape[0] != rhs.shape[0]:
            raise ShapeError(f"ops has {ops.shape[0]} rows, rhs has {rhs.shape[0]}")
        d = rhs.shape[-1]
        if ops.shape[-2:] != (d, d) or ops.shape[1:-2] != rhs.shape[1:-1]:
            raise ShapeError(f"ops {ops.shape} do not match rhs {rhs.shape}")
        dims = self.state_dims
        if dims is None:
            dims = (d,) * rhs.shape[0]
        dims = tuple(int(k) for k in dims)
        if len(dims) != rhs.shape[0] or min(dims) < 1 or max(dims) > d:
            raise ShapeError(f"state_dims {dims} inconsistent with block width {d}")
        object.__setattr__(self, "ops", _frozen(ops))
        object.__setattr__(self, "rhs", _frozen(rhs))
        object.__setattr__(self, "state_dims", dims)

    @classmethod
    def from_blocks(cls, sub_ops, rhs):
        """Build from per-row blocks.

        ``sub_ops[l-1]`` is ``A_l`` with shape ``(*batch, d_l, d_{l-1})`` and
        ``rhs[l]`` has shape ``(*batch, d_l)``.
        """
        rhs = [np.asarray(r, dtype=np.float64) for r in rhs]
        sub_ops = [np.asarray(a, dtype=np.float64) for a in sub_ops]
        if len(rhs) != len(sub_ops) + 1:
            raise ShapeError(f"{len(sub_ops)} operators need {len(sub_ops) + 1} rhs blocks")
        dims = [r.shape[-1] for r in rhs]
        batch = rhs[0].shape[:-1]
        for l, a in enumerate(sub_ops, start=1):
            if a.shape != batch + (dims[l], dims[l - 1]):
                raise ShapeError(
                    f"A_{l} has shape {a.shape}, expected {batch + (dims[l], dims[l - 1])}"
                )
        for l, r in enumerate(rhs):
            if r.shape[:-1] != batch:
                raise ShapeError(f"rhs[{l}] batch shape {r.shape[:-1]} != {batch}")
        D = max(dims)
        ops = np.zeros((len(rhs),) + batch + (D, D))
        stacked = np.zeros((len(rhs),) + batch + (D,))
        for l, a in enumerate(sub_ops, start=1):
            ops[l, ..., : dims[l], : dims[l - 1]] = a
        for l, r in enumerate(rhs):
            stacked[l, ..., : dims[l]] = r
        return cls(ops, stacked, tuple(dims))

    @property
    def length(self):
        return self.rhs.shape[0] - 1

    @property
    def batch_shape(self):
        return self.rhs.shape[1:-1]

    @property
    def width(self):
        return self.rhs.shape[-1]

    def sub_op(self, l):
        if not 1 <= l <= self.length:
            raise IndexError(l)
        return self.ops[l, ..., : self.state_dims[l], : self.state_dims[l - 1]]

    def rhs_block(self, l):
        return self.rhs[l, ..., : self.state_dims[l]]

    def unpad(self, solution):
        """Split a stacked solution into per-row vectors of their true width."""
        return [solution[l, ..., : d] for l, d in enumerate(self.state_dims)]

    def residual(self, solution):
        """``r - M x`` for a stacked candidate solution."""
        x = np.asarray(solution, dtype=np.float64)
        res = self.rhs - x
        res[1:] -= matvec(self.ops[1:], x[:-1])
        return res


@dataclass
class PcrTrace:
    barrier_count: int = 0
    row_update_counts: list = field(default_factory=list)
    distances: list = field(default_factory=list)


def barrier_count(length):
    """Number of reduction steps PCR needs for a system of ``length`` rows."""
    if length <= 1:
        return 0
    return math.ceil(math.log2(length))


def _check_distance(distance):
    if not isinstance(distance, (int, np.integer)) or distance < 1 or distance & (distance - 1):
        raise ValueError(f"distance must be a power of two >= 1, got {distance!r}")


def _reduce_rows(ops, rhs, distance, ops_out, rhs_out, start, stop):
    # rows [start, stop) with start >= distance; reads only pre-step buffers
    lo = max(start, distance + 1)
    a = ops[start:stop]
    matvec(a, rhs[start - distance : stop - distance], out=rhs_out[start:stop])
    np.subtract(rhs[start:stop], rhs_out[start:stop], out=rhs_out[start:stop])
    if lo < stop:
        prod = ops_out[lo:stop]
        matmul(ops[lo:stop], ops[lo - distance : stop - distance], out=prod)
        np.negative(prod, out=prod)
    if start < lo:
        ops_out[start:lo] = 0.0


def _reduce(ops, rhs, distance, ops_out, rhs_out, workers):
    L = rhs.shape[0] - 1
    first = min(distance, L + 1)
    ops_out[:first] = ops[:first]
    rhs_out[:first] = rhs[:first]
    _parallel.for_rows(
        lambda s, e: _reduce_rows(ops, rhs, distance, ops_out, rhs_out, s, e),
        distance,
        L + 1,
        workers,
    )
    return max(0, L + 1 - distance)


def pcr_reduce_step(system, distance, workers=1):
    """One PCR reduction at coupling ``distance``.

    Every row ``l >= distance`` substitutes row ``l - distance`` into
    itself. Rows whose partner is row 0 fold the known ``r_0`` into their
    right-hand side and become decoupled. Rows below ``distance`` are
    returned unchanged.
    """
    _check_distance(distance)
    ops = np.empty_like(system.ops)
    rhs = np.empty_like(system.rhs)
    _reduce(system.ops, system.rhs, distance, ops, rhs, workers)
    return BlockBidiagSystem(ops, rhs, system.state_dims)


def pcr_solve(system, workers=1, reduce=_reduce):
    """Solve ``system`` by Parallel Cyclic Reduction.

    Row 1 is folded with the known ``x_0`` during initialisation; after that
    ``ceil(log2 L)`` reduction steps (distances 1, 2, 4, ...) leave every
    row decoupled and the right-hand sides hold the solution.

    Returns ``(solution, trace)`` where ``solution`` is stacked like
    ``system.rhs``.
    """
    L = system.length
    trace = PcrTrace()
    ops = np.array(system.ops)
    rhs = np.array(system.rhs)
    if L >= 1:
        rhs[1] -= matvec(ops[1], rhs[0])
        ops[1] = 0.0
    ops_out = np.empty_like(ops)
    rhs_out = np.empty_like(rhs)
    distance = 1
    while distance < L:
        rows = reduce(ops, rhs, distance, ops_out, rhs_out, workers)
        ops, ops_out = ops_out, ops
        rhs, rhs_out = rhs_out, rhs
        trace.barrier_count += 1
        trace.row_update_counts.append(rows)
        trace.distances.append(distance)
        distance *= 2
    return rhs, trace


def forward_substitution_solve(system):
    """Sequential reference solve, one row at a time."""
    x = np.empty_like(system.rhs)
    x[0] = system.rhs[0]
    for l in range(1, system.length + 1):
        x[l] = system.rhs[l] - matvec(system.ops[l], x[l - 1])
    return x


def pcr_memory_bytes(length, width, batch=1):
    """Analytic extra storage of :func:`pcr_solve` in bytes.

    Two copies of the stacked operators and right-hand sides (double
    buffering) plus one operator-sized product temporary.
    """
    rows = (length + 1) * batch
    return 8 * rows * (3 * width * width + 2 * width)
