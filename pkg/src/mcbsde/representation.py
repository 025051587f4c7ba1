"""Martingale representation on the chain filtration.

A square-integrable martingale of Markovian form L_t = l(t, X_t) is a
stochastic integral against the chain martingale M,

    L_t = L_0 + integral_0^t y(u, X_{u-}) dM_u,

where column j of y(t, e_i) is the jump coefficient l(t, e_j) - l(t, e_i)
and column i is zero.  This module builds such integrands from martingale
surfaces, reconstructs martingales pathwise to certify the representation,
and evaluates the square-integrability functional E int ||y||^2_{X_u} du
exactly via occupation probabilities.

The integrand is unique only up to the kernel of d<M, M>; the canonical
representative fixed here has a zero current-state column, extending the
scalar convention gamma^{ii} = 0 to the vector-valued case.  Stochastic
integrals read an integrand field only through its off-current columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import ChainPath, RateSchedule
from .grids import (
    PieceExpms,
    PiecewiseCubic,
    TimeGrid,
    build_time_grid,
    cumulative_cells,
    occupation_probabilities,
    simpson_cells,
)

__all__ = [
    "NotAMartingale",
    "StateFunction",
    "IntegrandField",
    "conditional_expectation",
    "representation_integrand",
    "reconstruct",
    "ReconstructionReport",
    "integrability_diagnostic",
]

HARMONICITY_TOL = 1e-8


class NotAMartingale(ValueError):
    """The state function fails the harmonicity residual check."""


@dataclass
class StateFunction:
    """Time-grid-indexed map (t, state) -> K-vector.

    `values[g, i]` is the K-vector at (grid.times[g], e_i).  Evaluation
    between grid points uses piecewise-cubic interpolation per schedule
    piece; `interpolation` records how the surface was produced.
    """

    grid: TimeGrid
    values: np.ndarray  # (G+1, N, K)
    interpolation: str = "cubic"
    _pp: PiecewiseCubic | None = field(default=None, init=False, repr=False)
    _residual: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != self.grid.times.size:
            raise ValueError(f"values shape {self.values.shape} inconsistent with grid")
        self.values.flags.writeable = False

    @property
    def schedule(self) -> RateSchedule:
        return self.grid.schedule

    @property
    def num_states(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def _interp(self) -> PiecewiseCubic:
        if self._pp is None:
            self._pp = PiecewiseCubic(self.grid, self.values)
        return self._pp

    def eval(self, ts) -> np.ndarray:
        """Values at times ts; shape (..., N, K)."""
        return self._interp()(ts)

    def eval_state(self, t: float, i: int) -> np.ndarray:
        return self.eval(t)[i]

    def harmonicity_residual(self) -> float:
        """Max over cell midpoints and states of the generator residual.

        A martingale surface satisfies, inside each piece,
            d/dt l(t, e_i) + sum_j A[j, i] (l(t, e_j) - l(t, e_i)) = 0.
        Midpoints avoid the derivative ambiguity at breakpoints.
        """
        if self._residual is None:
            mids = self.grid.midpoints
            lm = self._interp()(mids)            # (G, N, K)
            dm = self._interp()(mids, nu=1)      # (G, N, K)
            worst = 0.0
            for p in range(self.schedule.num_pieces):
                cells = self.grid.cells_of_piece(p)
                a = self.schedule.matrices[p]
                coup = np.einsum("gjk,ji->gik", lm[cells], a)
                coup -= lm[cells] * a.sum(axis=0)[None, :, None]
                res = dm[cells] + coup
                if res.size:
                    worst = max(worst, float(np.max(np.abs(res))))
            self._residual = worst
        return self._residual

    def is_martingale(self, tol: float = HARMONICITY_TOL) -> bool:
        return self.harmonicity_residual() <= tol

    def require_martingale(self, tol: float = HARMONICITY_TOL) -> None:
        r = self.harmonicity_residual()
        if r > tol:
            raise NotAMartingale(
                f"harmonicity residual {r:.3e} exceeds tolerance {tol:.1e}"
            )


@dataclass
class IntegrandField:
    """Time-grid-indexed map (t, state) -> K x N matrix (canonical form).

    `values[g, i]` is the K x N matrix y(grid.times[g], e_i); its column i
    is forced to zero at construction.  The process value along a path at
    time t is y(t, X_{t-}), which makes it predictable.  Stochastic
    integrals never read the current-state column, so fields agreeing off
    that column are indistinguishable as integrands.
    """

    grid: TimeGrid
    values: np.ndarray  # (G+1, N, K, N)
    _pp: PiecewiseCubic | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 4 or v.shape[0] != self.grid.times.size or v.shape[3] != v.shape[1]:
            raise ValueError(f"values shape {v.shape} inconsistent with grid")
        for i in range(v.shape[1]):
            v[:, i, :, i] = 0.0
        v.flags.writeable = False
        self.values = v

    @property
    def num_states(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def _interp(self) -> PiecewiseCubic:
        if self._pp is None:
            self._pp = PiecewiseCubic(self.grid, self.values)
        return self._pp

    def eval(self, ts) -> np.ndarray:
        """Values at times ts; shape (..., N, K, N)."""
        return self._interp()(ts)

    def eval_state(self, t: float, i: int) -> np.ndarray:
        return self.eval(t)[i]

    def jump_coefficient(self, t: float, i: int, j: int) -> np.ndarray:
        """Increment of the integral at an i -> j jump: column j at state i."""
        return self.eval(t)[i][:, j]

    def with_values(self, values: np.ndarray) -> "IntegrandField":
        return IntegrandField(self.grid, values)


def canonical_shift(values: np.ndarray) -> np.ndarray:
    """Subtract the current-state column: the class representative with
    zero column i at state i.  This leaves every integral against dM
    unchanged pathwise (the shift is a constant-columns matrix)."""
    out = np.array(values, dtype=float)
    for i in range(out.shape[1]):
        out[:, i] -= out[:, i, :, i][:, :, None]
    return out


def _terminal_values(q, n: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    if q.shape[0] != n:
        raise ValueError(f"terminal data has {q.shape[0]} states, schedule has {n}")
    if not np.all(np.isfinite(q)):
        raise ValueError("terminal data contains non-finite entries")
    return q


def conditional_expectation(q, schedule: RateSchedule, n_steps: int = 1000) -> StateFunction:
    """Martingale surface l(t, e_i) = sum_j P(t, T)[j, i] q(e_j).

    Computed by the exact backward recursion l_g = exp(h A)^T l_{g+1} on a
    grid refined by the schedule breakpoints, so l(T, .) = q holds exactly
    and the flow property is inherited from the matrix exponentials.
    """
    n = schedule.num_states
    qv = _terminal_values(q, n)
    grid = build_time_grid(schedule, n_steps)
    expms = PieceExpms(grid)
    G = grid.n_cells
    values = np.empty((G + 1, n, qv.shape[1]))
    values[G] = qv
    for g in range(G - 1, -1, -1):
        values[g] = expms.full[int(grid.cell_piece[g])].T @ values[g + 1]
    return StateFunction(grid, values, interpolation="matexp-grid+cubic")


def representation_integrand(l: StateFunction, tol: float = HARMONICITY_TOL) -> IntegrandField:
    """Canonical integrand of a martingale surface.

    Column j of y(t, e_i) is gamma^{ij}(t) = l(t, e_j) - l(t, e_i), the jump
    of L when X jumps i -> j; column i is zero.  Raises NotAMartingale when
    the harmonicity residual of `l` exceeds `tol`.
    """
    l.require_martingale(tol)
    z = l.values  # (G+1, N, K)
    zt = z.transpose(0, 2, 1)  # (G+1, K, N)
    gamma = zt[:, None, :, :] - z[:, :, :, None]
    return IntegrandField(l.grid, gamma)


@dataclass(frozen=True)
class ReconstructionReport:
    """Residual of the pathwise representation identity along one path."""

    times: np.ndarray
    residuals: np.ndarray
    max_residual: float


def _union_times(grid_times: np.ndarray, path: ChainPath) -> np.ndarray:
    return np.unique(np.concatenate((grid_times, path.jump_times)))


def _path_cell_states(times: np.ndarray, path: ChainPath) -> np.ndarray:
    # state on each open cell ]t_g, t_{g+1}[ equals the right-continuous
    # state at the left endpoint
    return path.states_at(times[:-1])


def _cell_pieces(times: np.ndarray, schedule: RateSchedule) -> np.ndarray:
    mids = 0.5 * (times[:-1] + times[1:])
    k = np.searchsorted(schedule.breakpoints, mids, side="right") - 1
    return np.clip(k, 0, schedule.num_pieces - 1)


def reconstruct(l: StateFunction, y: IntegrandField, path: ChainPath) -> ReconstructionReport:
    """Residual R(t) = l(0, X_0) + int_0^t y(u, X_{u-}) dM_u - l(t, X_t).

    The jump part of the integral is summed exactly; the drift part
    -int y(u, X_u) A_u X_u du uses per-cell Simpson on the union grid of
    the surface grid and the jump times.  For a true (surface, integrand)
    pair the residual is quadrature-limited.
    """
    schedule = l.schedule
    if path.horizon != schedule.horizon:
        raise ValueError("path and surface have different horizons")
    times = _union_times(l.grid.times, path)
    mids = 0.5 * (times[:-1] + times[1:])
    h = np.diff(times)
    states = _path_cell_states(times, path)
    pieces = _cell_pieces(times, schedule)

    y_pts = y.eval(times)   # (T, N, K, N)
    y_mid = y.eval(mids)
    l_pts = l.eval(times)   # (T, N, K)

    # drift integrand phi(u) = y(u, e_s) @ (A e_s) per cell
    acols = np.stack([schedule.matrices[p][:, s] for p, s in zip(pieces, states)])
    idx = np.arange(times.size - 1)
    f_left = np.einsum("gkn,gn->gk", y_pts[idx, states], acols)
    f_mid = np.einsum("gkn,gn->gk", y_mid[idx, states], acols)
    f_right = np.einsum("gkn,gn->gk", y_pts[idx + 1, states], acols)
    drift_cells = (h[:, None] / 6.0) * (f_left + 4.0 * f_mid + f_right)
    drift_cum = cumulative_cells(drift_cells)

    k_dim = l.dim
    jump_cum = np.zeros((times.size, k_dim))
    if path.num_jumps:
        increments = np.zeros((path.num_jumps, k_dim))
        prev = path.initial_state
        for m, (u, j) in enumerate(zip(path.jump_times, path.jump_states)):
            yv = y.eval(u)[prev]
            increments[m] = yv[:, int(j)] - yv[:, prev]
            prev = int(j)
        pos = np.searchsorted(path.jump_times, times, side="right")
        csum = np.concatenate((np.zeros((1, k_dim)), np.cumsum(increments, axis=0)))
        jump_cum = csum[pos]

    l_path = l_pts[np.arange(times.size), path.states_at(times)]
    l0 = l_pts[0, path.initial_state]
    resid = l0[None, :] + jump_cum - drift_cum - l_path
    norms = np.max(np.abs(resid), axis=1)
    return ReconstructionReport(times, norms, float(norms.max()))


def integrability_diagnostic(y: IntegrandField, schedule: RateSchedule, x0_dist) -> float:
    """E int_0^T ||y(u, X_u)||^2_{X_u} du, computed without Monte Carlo.

    Expands the expectation over occupation probabilities
    p(u) = P(0, u) x0 and integrates sum_i p_i(u) ||y(u, e_i)||^2_{e_i}
    by per-cell Simpson on the field grid.  Finite by construction; by the
    energy identity of the representation it equals E||L_T - L_0||^2 for
    integrands built from martingale surfaces.
    """
    grid = y.grid
    if grid.schedule.horizon != schedule.horizon:
        raise ValueError("integrand grid and schedule have different horizons")
    x0 = np.asarray(x0_dist, dtype=float)
    p_pts, p_mid = occupation_probabilities(grid, x0)
    y_mid = y.eval(grid.midpoints)
    total = 0.0
    from .calculus import field_seminorm_sq

    for p in range(schedule.num_pieces):
        pts = grid.piece_slice(p)
        cells = grid.cells_of_piece(p)
        a = schedule.matrices[p]
        f_pts = np.einsum("gi,gi->g", field_seminorm_sq(y.values[pts], a), p_pts[pts])
        f_mid = np.einsum("gi,gi->g", field_seminorm_sq(y_mid[cells], a), p_mid[cells])
        total += float(np.sum(simpson_cells(f_pts, f_mid, grid.h[cells])))
    return total
