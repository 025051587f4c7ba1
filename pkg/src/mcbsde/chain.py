"""Finite-state continuous-time Markov chains with piecewise-constant rates.

States are identified with the unit vectors e_0, ..., e_{N-1} of R^N (state
indices are 0-based throughout).  Rate matrices use the COLUMN convention:

    A[j, i] >= 0  is the instantaneous rate of jumping from state i to
                  state j (j != i), and every column of A sums to zero.

This is the transpose of the row convention common in the CTMC literature.
It is the convention under which the chain satisfies

    X_t = X_0 + integral_0^t A_u X_u du + M_t

with M a martingale, and under which the counting process of i -> j jumps
is compensated by integral A[j,i] <X_u, e_i> du.  Mixing up the two
conventions silently transposes every formula downstream, so all public
entry points validate column sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

__all__ = [
    "ScheduleError",
    "NegativeOffDiagonal",
    "ColumnSumNonzero",
    "BadBreakpoints",
    "OutOfRange",
    "RateSchedule",
    "ChainPath",
    "validate_schedule",
    "transition_matrix",
    "simulate_path",
    "simulate_paths",
    "random_rate_matrix",
]

COLUMN_SUM_TOL = 1e-12


class ScheduleError(ValueError):
    """A rate schedule violates one of its invariants."""


class NegativeOffDiagonal(ScheduleError):
    """An off-diagonal rate entry is negative."""


class ColumnSumNonzero(ScheduleError):
    """A column of a rate matrix does not sum to zero (tolerance 1e-12)."""


class BadBreakpoints(ScheduleError):
    """Breakpoints are not an increasing sequence 0 = t0 < ... < tm = T."""


class OutOfRange(ValueError):
    """A time argument lies outside [0, T], or s > t was requested."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant generator schedule A_t on [0, T].

    Piece k applies on the interval ]breakpoints[k], breakpoints[k+1]]
    (and at t = 0 the first piece applies).  Immutable and safe to share
    across threads.

    Parameters
    ----------
    breakpoints : array, shape (m+1,)
        Ordered times 0 = t0 < t1 < ... < tm = T.
    matrices : array, shape (m, N, N)
        One column-convention rate matrix per piece.
    """

    breakpoints: np.ndarray
    matrices: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None, :, :]
        object.__setattr__(self, "breakpoints", _as_readonly(bp))
        object.__setattr__(self, "matrices", _as_readonly(mats))
        _check_schedule(self)

    @classmethod
    def constant(cls, matrix, horizon: float) -> "RateSchedule":
        """Schedule with a single rate matrix on [0, horizon]."""
        return cls(np.array([0.0, float(horizon)]), np.asarray(matrix, dtype=float)[None, :, :])

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def num_states(self) -> int:
        return self.matrices.shape[1]

    @property
    def num_pieces(self) -> int:
        return self.matrices.shape[0]

    @property
    def max_rate(self) -> float:
        """a = max over pieces and entries of |A_ij| (enters the 3a bound)."""
        return float(np.max(np.abs(self.matrices))) if self.matrices.size else 0.0

    def piece_index(self, t: float) -> int:
        """Index of the piece whose matrix applies at time t.

        Interior breakpoints resolve to the piece on their left,
        t = 0 to the first piece.
        """
        if t < 0.0 or t > self.horizon:
            raise OutOfRange(f"time {t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return min(max(k, 0), self.num_pieces - 1)

    def matrix_at(self, t: float) -> np.ndarray:
        return self.matrices[self.piece_index(t)]

    def truncate(self, new_horizon: float) -> "RateSchedule":
        """Restriction of the schedule to [0, new_horizon]."""
        if not 0.0 < new_horizon <= self.horizon:
            raise OutOfRange(f"new horizon {new_horizon} outside ]0, {self.horizon}]")
        keep = int(np.searchsorted(self.breakpoints, new_horizon, side="left"))
        bp = np.append(self.breakpoints[:keep], new_horizon)
        return RateSchedule(bp, self.matrices[: max(keep, 1)])


def _check_schedule(schedule: RateSchedule) -> None:
    bp = schedule.breakpoints
    mats = schedule.matrices
    if bp.ndim != 1 or bp.size < 2:
        raise BadBreakpoints("need at least [0, T]")
    if bp[0] != 0.0:
        raise BadBreakpoints(f"first breakpoint is {bp[0]}, expected 0")
    if not np.all(np.diff(bp) > 0.0):
        k = int(np.argmin(np.diff(bp)))
        raise BadBreakpoints(f"breakpoints not strictly increasing at interval {k}")
    if bp[-1] <= 0.0 or not np.isfinite(bp[-1]):
        raise BadBreakpoints(f"horizon {bp[-1]} must be positive and finite")
    if mats.ndim != 3 or mats.shape[0] != bp.size - 1:
        raise BadBreakpoints(
            f"{bp.size - 1} pieces declared but {mats.shape[0]} matrices given"
        )
    n = mats.shape[1]
    if n < 2 or mats.shape[2] != n:
        raise ScheduleError(f"rate matrices must be square with N >= 2, got {mats.shape[1:]}")
    if not np.all(np.isfinite(mats)):
        raise ScheduleError("rate matrices contain non-finite entries")
    for k in range(mats.shape[0]):
        a = mats[k]
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0.0):
            j, i = np.unravel_index(int(np.argmin(off)), off.shape)
            raise NegativeOffDiagonal(
                f"piece {k}: entry A[{j},{i}] = {a[j, i]} is negative"
            )
        colsums = a.sum(axis=0)
        bad = np.abs(colsums) > COLUMN_SUM_TOL
        if np.any(bad):
            i = int(np.argmax(np.abs(colsums)))
            raise ColumnSumNonzero(
                f"piece {k}: column {i} sums to {colsums[i]:.3e} (tolerance {COLUMN_SUM_TOL})"
            )


def validate_schedule(schedule: RateSchedule) -> RateSchedule:
    """Check every RateSchedule invariant, returning the schedule if valid.

    Construction already validates; this re-runs the checks so callers can
    gate on externally supplied objects.
    """
    _check_schedule(schedule)
    return schedule


def transition_matrix(schedule: RateSchedule, s: float, t: float) -> np.ndarray:
    """Transition matrix P(s, t) solving dP/dt = A_t P,  P(s, s) = I.

    Column i of P(s, t) is the distribution of X_t given X_s = e_i.  Over a
    single constant piece this is the matrix exponential of (t - s) A; across
    pieces the flow property composes the factors.
    """
    T = schedule.horizon
    if s < 0.0 or t > T or s > t:
        raise OutOfRange(f"need 0 <= s <= t <= {T}, got s={s}, t={t}")
    n = schedule.num_states
    if s == t:
        return np.eye(n)
    P = np.eye(n)
    a = s
    bp = schedule.breakpoints
    while a < t:
        k = min(int(np.searchsorted(bp, a, side="right")) - 1, schedule.num_pieces - 1)
        b = min(t, float(bp[k + 1]))
        P = expm((b - a) * schedule.matrices[k]) @ P
        a = b
    return P


@dataclass(frozen=True)
class ChainPath:
    """One realized cadlag trajectory of the chain on [0, T].

    `jump_times` are strictly increasing in ]0, T]; `jump_states[k]` is the
    state entered at `jump_times[k]`.  Immutable.
    """

    initial_state: int
    jump_times: np.ndarray
    jump_states: np.ndarray
    horizon: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        js = np.asarray(self.jump_states, dtype=np.int64)
        object.__setattr__(self, "jump_times", _as_readonly(jt))
        object.__setattr__(self, "jump_states", _as_readonly(js))
        if jt.shape != js.shape or jt.ndim != 1:
            raise ValueError("jump_times and jump_states must be 1-d arrays of equal length")
        if jt.size:
            if not np.all(np.diff(jt) > 0.0):
                raise ValueError("jump times must be strictly increasing")
            if jt[0] <= 0.0 or jt[-1] > self.horizon:
                raise ValueError(f"jump times must lie in ]0, {self.horizon}]")
            states = np.concatenate(([self.initial_state], js))
            if np.any(states[1:] == states[:-1]):
                raise ValueError("consecutive states must be distinct")

    @property
    def num_jumps(self) -> int:
        return int(self.jump_times.size)

    def _check_time(self, t: float) -> None:
        if t < 0.0 or t > self.horizon:
            raise OutOfRange(f"time {t} outside [0, {self.horizon}]")

    def state_at(self, t: float) -> int:
        """State at time t (right-continuous: a jump at t counts)."""
        self._check_time(t)
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        return self.initial_state if k == 0 else int(self.jump_states[k - 1])

    def left_limit_state_at(self, t: float) -> int:
        """State immediately before t; equals initial_state at t = 0."""
        self._check_time(t)
        k = int(np.searchsorted(self.jump_times, t, side="left"))
        return self.initial_state if k == 0 else int(self.jump_states[k - 1])

    def states_at(self, times: np.ndarray) -> np.ndarray:
        """Vectorized right-continuous state lookup."""
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < 0.0 or times.max() > self.horizon):
            raise OutOfRange("times outside [0, horizon]")
        k = np.searchsorted(self.jump_times, times, side="right")
        states = np.concatenate(([self.initial_state], self.jump_states)).astype(np.int64)
        return states[k]

    def segments(self):
        """Constant-state intervals [(t0, t1, state), ...] covering [0, T]."""
        bounds = np.concatenate(([0.0], self.jump_times, [self.horizon]))
        states = np.concatenate(([self.initial_state], self.jump_states))
        out = []
        for k in range(states.size):
            t0, t1 = float(bounds[k]), float(bounds[k + 1])
            if t1 > t0:
                out.append((t0, t1, int(states[k])))
        return out

    def cells(self, schedule: RateSchedule):
        """Segments further split at schedule breakpoints.

        Yields (t0, t1, state, piece); on each cell both X and A are constant,
        so integrands of the calculus are exactly constant there.
        """
        out = []
        bp = schedule.breakpoints
        for t0, t1, s in self.segments():
            a = t0
            while a < t1:
                k = min(int(np.searchsorted(bp, a, side="right")) - 1, schedule.num_pieces - 1)
                b = min(t1, float(bp[k + 1]))
                out.append((a, b, s, k))
                a = b
        return out


def _simulate(schedule: RateSchedule, initial_state: int, rng: np.random.Generator) -> ChainPath:
    n = schedule.num_states
    jump_times: list[float] = []
    jump_states: list[int] = []
    state = int(initial_state)
    bp = schedule.breakpoints
    for k in range(schedule.num_pieces):
        a_mat = schedule.matrices[k]
        t = float(bp[k])
        piece_end = float(bp[k + 1])
        # Memorylessness lets us re-draw the holding clock at each breakpoint.
        while t < piece_end:
            rate = -a_mat[state, state]
            if rate <= 0.0:
                break  # absorbing in this piece
            t = t + rng.exponential(1.0 / rate)
            if t > piece_end:
                break
            probs = a_mat[:, state].copy()
            probs[state] = 0.0
            probs /= rate
            state = int(rng.choice(n, p=probs))
            jump_times.append(t)
            jump_states.append(state)
    return ChainPath(int(initial_state), np.array(jump_times), np.array(jump_states, dtype=np.int64), schedule.horizon)


def simulate_path(schedule: RateSchedule, initial_state: int, rng_seed: int) -> ChainPath:
    """Exact event-driven simulation, deterministic given the seed.

    Within each constant piece the holding time in state i is exponential
    with rate -A[i, i]; on expiry the chain jumps to j with probability
    A[j, i] / (-A[i, i]).  The clock is re-drawn at piece boundaries.
    Absorbing states (zero column) are legal: the path stays put.
    """
    if not 0 <= initial_state < schedule.num_states:
        raise ValueError(f"initial_state {initial_state} outside 0..{schedule.num_states - 1}")
    return _simulate(schedule, initial_state, np.random.default_rng(rng_seed))


def simulate_paths(schedule: RateSchedule, initial_state: int, n_paths: int, base_seed: int):
    """Simulate n_paths independent paths; path k uses seed ``base_seed ^ k``.

    The XOR convention makes concurrent simulation safe: workers assigned
    disjoint index ranges reproduce exactly the serial output.
    """
    return [simulate_path(schedule, initial_state, base_seed ^ k) for k in range(n_paths)]


def random_rate_matrix(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """Random column-convention rate matrix with off-diagonals in [0, scale]."""
    a = rng.uniform(0.0, scale, size=(n, n))
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, -a.sum(axis=0))
    return a
