"""Time grids refined by schedule breakpoints, and the quadrature kit.

Everything downstream (conditional expectations, stage solvers, oracle,
diagnostics) shares one grid discipline: cells never straddle a schedule
breakpoint, cells are uniform within a piece (so per-piece step exponentials
can be reused), and integrals of smooth-per-piece integrands use per-cell
Simpson with midpoint evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from .chain import RateSchedule

__all__ = ["TimeGrid", "build_time_grid", "PieceExpms", "PiecewiseCubic"]

# Cubic interpolation per piece wants >= 4 points, hence >= 3 cells.
MIN_CELLS_PER_PIECE = 3


@dataclass(frozen=True)
class TimeGrid:
    """Solver grid on [0, T] containing every schedule breakpoint."""

    schedule: RateSchedule
    times: np.ndarray        # (G+1,) grid points, times[0]=0, times[-1]=T
    cell_piece: np.ndarray   # (G,) schedule piece index of each cell
    piece_points: tuple      # per piece: (start, stop) slice of grid points, stop exclusive

    @property
    def n_cells(self) -> int:
        return self.times.size - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.times[:-1] + self.times[1:])

    def piece_slice(self, p: int) -> slice:
        s, e = self.piece_points[p]
        return slice(s, e)

    def cells_of_piece(self, p: int) -> slice:
        s, e = self.piece_points[p]
        return slice(s, e - 1)


def build_time_grid(schedule: RateSchedule, n_steps: int) -> TimeGrid:
    """Grid with ~n_steps cells total, distributed over pieces by length.

    Each piece gets at least MIN_CELLS_PER_PIECE cells and uniform spacing,
    so the actual cell count can exceed n_steps for short pieces.
    """
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    bp = schedule.breakpoints
    T = schedule.horizon
    times = [np.array([0.0])]
    cell_piece = []
    piece_points = []
    start = 0
    for k in range(schedule.num_pieces):
        length = float(bp[k + 1] - bp[k])
        nk = max(MIN_CELLS_PER_PIECE, int(round(n_steps * length / T)))
        pts = np.linspace(bp[k], bp[k + 1], nk + 1)
        times.append(pts[1:])
        cell_piece.append(np.full(nk, k, dtype=np.int64))
        piece_points.append((start, start + nk + 1))
        start += nk
    return TimeGrid(
        schedule=schedule,
        times=np.concatenate(times),
        cell_piece=np.concatenate(cell_piece),
        piece_points=tuple(piece_points),
    )


class PieceExpms:
    """Per-piece step exponentials exp(h A) and exp(h/2 A) for a TimeGrid."""

    def __init__(self, grid: TimeGrid):
        self.full = []
        self.half = []
        for p in range(grid.schedule.num_pieces):
            s, e = grid.piece_points[p]
            h = float(grid.times[s + 1] - grid.times[s])
            a = grid.schedule.matrices[p]
            self.full.append(expm(h * a))
            self.half.append(expm(0.5 * h * a))


def occupation_probabilities(grid: TimeGrid, x0_dist: np.ndarray, expms: PieceExpms | None = None):
    """Occupation probabilities p(u) = P(0, u) x0 at grid points and midpoints.

    Exact up to matrix-exponential accuracy: p advances by the per-piece step
    exponentials, which compose to the true transition matrices.
    """
    if expms is None:
        expms = PieceExpms(grid)
    n = grid.schedule.num_states
    G = grid.n_cells
    p_pts = np.empty((G + 1, n))
    p_mid = np.empty((G, n))
    p_pts[0] = np.asarray(x0_dist, dtype=float)
    for g in range(G):
        k = int(grid.cell_piece[g])
        p_mid[g] = expms.half[k] @ p_pts[g]
        p_pts[g + 1] = expms.full[k] @ p_pts[g]
    return p_pts, p_mid


def simpson_cells(f_pts: np.ndarray, f_mid: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Per-cell Simpson values (h/6)(f_a + 4 f_m + f_b); leading axis is cells."""
    shape = (-1,) + (1,) * (f_pts.ndim - 1)
    return (h.reshape(shape) / 6.0) * (f_pts[:-1] + 4.0 * f_mid + f_pts[1:])


def cumulative_cells(cells: np.ndarray) -> np.ndarray:
    """Cumulative integral at grid points from per-cell values (starts at 0)."""
    out = np.zeros((cells.shape[0] + 1,) + cells.shape[1:])
    np.cumsum(cells, axis=0, out=out[1:])
    return out


class PiecewiseCubic:
    """Cubic interpolation of grid values, built piece by piece.

    Surfaces produced on a TimeGrid are smooth inside each schedule piece but
    generally only continuous across breakpoints; a global spline would smear
    the kink, so one spline per piece is fitted instead.  Supports values of
    any trailing shape (leading axis is time) and derivative evaluation.
    """

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        self.grid = grid
        self.values = values
        self._splines = []
        for p in range(grid.schedule.num_pieces):
            sl = grid.piece_slice(p)
            self._splines.append(CubicSpline(grid.times[sl], values[sl], axis=0))

    def _piece_of(self, ts: np.ndarray) -> np.ndarray:
        bp = self.grid.schedule.breakpoints
        k = np.searchsorted(bp, ts, side="right") - 1
        return np.clip(k, 0, self.grid.schedule.num_pieces - 1)

    def __call__(self, ts, nu: int = 0) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        scalar = ts.ndim == 0
        flat = np.atleast_1d(ts)
        pieces = self._piece_of(flat)
        out = np.empty(flat.shape + self.values.shape[1:])
        for p in np.unique(pieces):
            mask = pieces == p
            out[mask] = self._splines[p](flat[mask], nu=nu)
        return out[0] if scalar else out
