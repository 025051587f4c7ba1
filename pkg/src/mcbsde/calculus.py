"""Jump calculus of the chain martingale M.

Provides the martingale part of X, counting and compensated-jump processes,
both quadratic variations, and the state-indexed seminorm

    <C, D>_V = Tr(C [diag(A V) - diag(V) A* - A diag(V)] D*),

whose density matrix D(V) satisfies d<M, M>_u = D(X_u) du.  At a basis
vector V = e_i the density collapses to the rate-weighted sum of jump outer
products

    D(e_i) = sum_{j != i} A[j, i] (e_j - e_i)(e_j - e_i)*,

which is the form used by the fast helpers below.  All path integrals are
exact piecewise-constant sums on the union grid of jump times and schedule
breakpoints; there is no discretization error in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import ChainPath, OutOfRange, RateSchedule

__all__ = [
    "PathProcessSample",
    "SeminormContext",
    "martingale_path",
    "counting_process",
    "compensated_jump",
    "optional_qv",
    "qv_density",
    "predictable_qv",
    "inner_V",
    "seminorm_sq_V",
]


@dataclass(frozen=True)
class PathProcessSample:
    """A process sampled along one path.

    `grid` contains 0, T and every jump time of the underlying path, so the
    stored values are exact (processes here are piecewise linear between
    grid points).  `values[g]` is the cadlag (right) value at grid[g];
    `left_values[g]` the left limit, differing only at jump times.
    """

    grid: np.ndarray
    values: np.ndarray
    left_values: np.ndarray


def _unit(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


def martingale_path(path: ChainPath, schedule: RateSchedule) -> PathProcessSample:
    """Martingale part M_t = X_t - X_0 - integral_0^t A_u X_u du.

    M jumps exactly where X jumps (with the same increment) and drifts with
    slope -A X between jumps; the drift integral is computed exactly on the
    cells of the path.
    """
    if path.horizon != schedule.horizon:
        raise ValueError(
            f"path horizon {path.horizon} != schedule horizon {schedule.horizon}"
        )
    n = schedule.num_states
    cells = path.cells(schedule)
    grid = [0.0]
    right = [np.zeros(n)]
    left = [np.zeros(n)]
    x0 = _unit(n, path.initial_state)
    drift = np.zeros(n)
    for t0, t1, s, k in cells:
        drift = drift + (t1 - t0) * (schedule.matrices[k] @ _unit(n, s))
        x_left = _unit(n, s)
        x_right = _unit(n, path.state_at(t1))
        grid.append(t1)
        left.append(x_left - x0 - drift)
        right.append(x_right - x0 - drift)
    return PathProcessSample(np.array(grid), np.array(right), np.array(left))


def counting_process(path: ChainPath, i: int, j: int, t: float) -> int:
    """N^{ij}_t: number of jumps from e_i to e_j in ]0, t]."""
    if i == j:
        raise ValueError("counting process is defined for i != j only")
    if t < 0.0 or t > path.horizon:
        raise OutOfRange(f"time {t} outside [0, {path.horizon}]")
    prev = np.concatenate(([path.initial_state], path.jump_states[:-1]))
    mask = (path.jump_times <= t) & (prev == i) & (path.jump_states == j)
    return int(np.count_nonzero(mask))


def compensated_jump(path: ChainPath, schedule: RateSchedule, i: int, j: int, t: float) -> float:
    """Q^{ij}_t = N^{ij}_t - integral_0^t A[j,i] <X_u, e_i> du (exact)."""
    if i == j:
        raise ValueError("compensated jump process is defined for i != j only")
    comp = 0.0
    for t0, t1, s, k in path.cells(schedule):
        if s == i and t0 < t:
            comp += (min(t1, t) - t0) * schedule.matrices[k][j, i]
    return counting_process(path, i, j, t) - comp


def optional_qv(path: ChainPath, t: float, num_states: int | None = None) -> np.ndarray:
    """Optional quadratic variation [M, M]_t = sum of jump outer products.

    A jump i -> j contributes (e_j - e_i)(e_j - e_i)*.  Paths do not carry
    the state-space dimension, so pass `num_states` when the path may not
    visit the highest state.
    """
    if t < 0.0 or t > path.horizon:
        raise OutOfRange(f"time {t} outside [0, {path.horizon}]")
    if num_states is None:
        num_states = int(max(path.initial_state, path.jump_states.max() if path.num_jumps else 0)) + 1
    n = num_states
    out = np.zeros((n, n))
    prev = path.initial_state
    for u, j in zip(path.jump_times, path.jump_states):
        if u > t:
            break
        d = _unit(n, int(j)) - _unit(n, int(prev))
        out += np.outer(d, d)
        prev = int(j)
    return out


def qv_density(A: np.ndarray, V) -> np.ndarray:
    """Density D(V) = diag(A V) - diag(V) A* - A diag(V) of d<M, M>.

    V may be a state index or a vector; D is linear in V, so convex
    combinations of basis vectors compute expected densities exactly.
    The result is symmetric positive semi-definite for any rate matrix
    and probability vector.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    v = _unit(n, int(V)) if np.isscalar(V) else np.asarray(V, dtype=float)
    return np.diag(A @ v) - np.diag(v) @ A.T - A @ np.diag(v)


def predictable_qv(path: ChainPath, schedule: RateSchedule, t: float) -> np.ndarray:
    """<M, M>_t = integral_0^t D(X_u) du, exact over the path cells."""
    if t < 0.0 or t > path.horizon:
        raise OutOfRange(f"time {t} outside [0, {path.horizon}]")
    n = schedule.num_states
    out = np.zeros((n, n))
    cache: dict[tuple[int, int], np.ndarray] = {}
    for t0, t1, s, k in path.cells(schedule):
        if t0 >= t:
            break
        d = cache.get((k, s))
        if d is None:
            d = qv_density(schedule.matrices[k], s)
            cache[(k, s)] = d
        out += (min(t1, t) - t0) * d
    return out


@dataclass(frozen=True)
class SeminormContext:
    """Rate matrix plus evaluation state for the <., .>_V seminorm.

    `V` is a state index or a probability vector.  Construction checks the
    density matrix numerically for symmetry and positive semi-definiteness
    (min eigenvalue >= -1e-10).
    """

    A: np.ndarray
    V: object

    def __post_init__(self):
        d = qv_density(self.A, self.V)
        object.__setattr__(self, "_density", d)
        w = np.linalg.eigvalsh(d)
        if w.min() < -1e-10:
            raise ValueError(f"density matrix not PSD: min eigenvalue {w.min():.3e}")

    @property
    def density(self) -> np.ndarray:
        return self._density


def inner_V(C: np.ndarray, D: np.ndarray, ctx: SeminormContext) -> float:
    """Bilinear form <C, D>_V = Tr(C . density . D*) for K x N matrices."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n = ctx.density.shape[0]
    if C.shape[1] != n or D.shape != C.shape:
        raise ValueError(f"shape mismatch: C {C.shape}, D {D.shape}, density {ctx.density.shape}")
    return float(np.einsum("kn,nm,km->", C, ctx.density, D))


def seminorm_sq_V(C: np.ndarray, ctx: SeminormContext) -> float:
    """Squared seminorm ||C||_V^2 = <C, C>_V >= 0.

    Vanishes exactly on matrices with equal columns (jump differences are
    the kernel), and satisfies ||C||_V^2 <= 3a ||C||^2 with a the largest
    absolute rate entry.
    """
    return max(inner_V(C, C, ctx), 0.0)


def seminorm_sq_basis(C: np.ndarray, A: np.ndarray, i: int) -> float:
    """Fast ||C||^2_{e_i} = sum_j A[j,i] ||C[:,j] - C[:,i]||^2."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    diffs = C - C[:, i : i + 1]
    return max(float(np.dot(A[:, i], (diffs * diffs).sum(axis=0))), 0.0)


def field_seminorm_sq(values: np.ndarray, A: np.ndarray) -> np.ndarray:
    """||values[g, i]||^2_{e_i} for a stacked field, shape (..., N, K, N) -> (..., N).

    Assumes the current-state column has already been subtracted (canonical
    fields); then the seminorm is sum_j A[j, i] ||column j||^2.
    """
    sq = np.einsum("...ikj,...ikj->...ij", values, values)
    return np.einsum("...ij,ji->...i", sq, A)
