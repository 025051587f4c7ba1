"""Monte Carlo and exact-quadrature checks of the calculus identities.

Each check returns a CheckResult with the measured quantities, so the CLI
`verify` command and the acceptance suite share one implementation.  The
statistical checks use a three-standard-error budget and are deterministic
given their seed (path k of a batch uses seed ^ k, so results do not depend
on how the path loop is chunked across workers).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .calculus import qv_density, seminorm_sq_basis
from .chain import ChainPath, RateSchedule, random_rate_matrix, simulate_path
from .grids import simpson_cells

__all__ = [
    "CheckResult",
    "check_martingale_mean",
    "check_compensator",
    "check_seminorm_qv",
    "check_isometry_mc",
    "check_3a_bound",
    "check_psd_density",
    "run_identity_suite",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "measured": self.measured}


def _draw_initial(rng: np.random.Generator, x0_dist: np.ndarray) -> int:
    return int(rng.choice(x0_dist.size, p=x0_dist))


def _simulate_seeded(schedule: RateSchedule, x0_dist: np.ndarray, seed: int, k: int) -> ChainPath:
    # the initial state and the path share one per-path generator
    rng = np.random.default_rng(seed ^ k)
    from .chain import _simulate

    return _simulate(schedule, _draw_initial(rng, x0_dist), rng)


def _three_se_verdict(samples: np.ndarray):
    """Entrywise |mean| <= 3 SE (+ tiny absolute guard for exact zeros)."""
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    tol = 3.0 * se + 1e-12
    return bool(np.all(np.abs(mean) <= tol)), mean, se


# ---------------------------------------------------------------------------
# path-statistic workers (module level so ProcessPoolExecutor can pickle them)
# ---------------------------------------------------------------------------


def _mt_chunk(args):
    schedule, x0_dist, seed, start, stop = args
    n = schedule.num_states
    out = np.empty((stop - start, n))
    eye = np.eye(n)
    for k in range(start, stop):
        path = _simulate_seeded(schedule, x0_dist, seed, k)
        drift = np.zeros(n)
        for t0, t1, s, p in path.cells(schedule):
            drift += (t1 - t0) * schedule.matrices[p][:, s]
        out[k - start] = eye[path.state_at(path.horizon)] - eye[path.initial_state] - drift
    return out


def _compensator_chunk(args):
    schedule, x0_dist, seed, start, stop = args
    n = schedule.num_states
    dens = {}
    for p in range(schedule.num_pieces):
        for s in range(n):
            dens[(p, s)] = qv_density(schedule.matrices[p], s)
    eye = np.eye(n)
    out = np.empty((stop - start, n, n))
    for k in range(start, stop):
        path = _simulate_seeded(schedule, x0_dist, seed, k)
        acc = np.zeros((n, n))
        prev = path.initial_state
        for u, j in zip(path.jump_times, path.jump_states):
            d = eye[int(j)] - eye[prev]
            acc += np.outer(d, d)
            prev = int(j)
        for t0, t1, s, p in path.cells(schedule):
            acc -= (t1 - t0) * dens[(p, s)]
        out[k - start] = acc
    return out


def _isometry_chunk(args):
    schedule, x0_dist, seed, start, stop, edges, cvals = args
    # cvals: (bins, K, N) piecewise-constant predictable integrand
    out = np.empty(stop - start)
    kdim = cvals.shape[1]
    for k in range(start, stop):
        path = _simulate_seeded(schedule, x0_dist, seed, k)
        integ = np.zeros(kdim)
        prev = path.initial_state
        for u, j in zip(path.jump_times, path.jump_states):
            b = max(int(np.searchsorted(edges, u, side="left")) - 1, 0)
            c = cvals[b]
            integ += c[:, int(j)] - c[:, prev]
            prev = int(j)
        for t0, t1, s, p in path.cells(schedule):
            acol = schedule.matrices[p][:, s]
            a = t0
            while a < t1:
                b = max(int(np.searchsorted(edges, a, side="right")) - 1, 0)
                bend = min(t1, float(edges[b + 1]))
                integ -= (bend - a) * (cvals[b] @ acol)
                a = bend
        out[k - start] = float(np.sum(integ * integ))
    return out


def _run_chunks(worker, static_args, n_paths: int, parallel: int):
    chunk = max(1, -(-n_paths // max(parallel, 1)))
    jobs = [static_args + (s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]
    if parallel <= 1 or len(jobs) == 1:
        parts = [worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            parts = list(ex.map(worker, jobs))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_martingale_mean(schedule: RateSchedule, x0_dist, n_paths: int, seed: int,
                          parallel: int = 1) -> CheckResult:
    """E M_T = 0: sample mean of the exact martingale part, per component."""
    x0 = np.asarray(x0_dist, dtype=float)
    samples = _run_chunks(_mt_chunk, (schedule, x0, seed), n_paths, parallel)
    ok, mean, se = _three_se_verdict(samples)
    return CheckResult("eq1_martingale_mean", ok, {
        "n_paths": n_paths,
        "max_abs_mean": float(np.max(np.abs(mean))),
        "max_se": float(np.max(se)),
    })


def check_compensator(schedule: RateSchedule, x0_dist, n_paths: int, seed: int,
                      parallel: int = 1) -> CheckResult:
    """Entrywise E([M,M]_T - <M,M>_T) = 0 within three standard errors."""
    x0 = np.asarray(x0_dist, dtype=float)
    samples = _run_chunks(_compensator_chunk, (schedule, x0, seed), n_paths, parallel)
    flat = samples.reshape(samples.shape[0], -1)
    ok, mean, se = _three_se_verdict(flat)
    return CheckResult("compensator_identity", ok, {
        "n_paths": n_paths,
        "max_abs_mean": float(np.max(np.abs(mean))),
        "max_se": float(np.max(se)),
    })


def check_seminorm_qv(schedule: RateSchedule, x0_dist, n_processes: int, seed: int,
                      tol: float = 1e-12, dim: int = 2) -> CheckResult:
    """int ||C_u||^2_{X_u} du == int Tr(C d<M,M> C*) for piecewise-constant C.

    The left side sums dt * ||C||^2_{e_s} with the seminorm; the right side
    contracts C against increments of the predictable quadratic variation.
    Both quadratures are exact, so agreement is at rounding level.
    """
    from .calculus import predictable_qv

    x0 = np.asarray(x0_dist, dtype=float)
    T = schedule.horizon
    worst = 0.0
    for trial in range(n_processes):
        rng = np.random.default_rng((seed + 7919) ^ trial)
        path = _simulate_seeded(schedule, x0, seed, trial)
        n_bins = int(rng.integers(2, 6))
        edges = np.concatenate(([0.0], np.sort(rng.uniform(0.0, T, n_bins - 1)), [T]))
        cvals = rng.uniform(-1.0, 1.0, size=(n_bins, dim, schedule.num_states))
        lhs = 0.0
        for t0, t1, s, p in path.cells(schedule):
            a = t0
            while a < t1:
                b = max(int(np.searchsorted(edges, a, side="right")) - 1, 0)
                bend = min(t1, float(edges[b + 1]))
                lhs += (bend - a) * seminorm_sq_basis(cvals[b], schedule.matrices[p], s)
                a = bend
        rhs = 0.0
        for b in range(n_bins):
            dqv = predictable_qv(path, schedule, float(edges[b + 1])) - predictable_qv(
                path, schedule, float(edges[b])
            )
            rhs += float(np.einsum("kn,nm,km->", cvals[b], dqv, cvals[b]))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return CheckResult("seminorm_qv_identity", worst <= tol, {
        "n_processes": n_processes, "max_rel_gap": worst, "tol": tol,
    })


def _occupation_at_nodes(schedule: RateSchedule, nodes: np.ndarray, x0: np.ndarray):
    """p(u) = P(0, u) x0 at sorted nodes and the interval midpoints."""
    n = schedule.num_states
    p_nodes = np.empty((nodes.size, n))
    p_mid = np.empty((nodes.size - 1, n))
    p = x0.astype(float)
    p_nodes[0] = p
    bp = schedule.breakpoints
    for g in range(nodes.size - 1):
        a, b = float(nodes[g]), float(nodes[g + 1])
        k = min(int(np.searchsorted(bp, 0.5 * (a + b), side="right")) - 1, schedule.num_pieces - 1)
        mat = schedule.matrices[k]
        p_mid[g] = expm(0.5 * (b - a) * mat) @ p
        p = expm((b - a) * mat) @ p
        p_nodes[g + 1] = p
    return p_nodes, p_mid


def check_isometry_mc(schedule: RateSchedule, x0_dist, n_paths: int, seed: int,
                      parallel: int = 1, dim: int = 2, n_bins: int = 4,
                      refine: int = 256) -> CheckResult:
    """E || int C dM ||^2 = E int ||C_u||^2_{X_u} du for predictable
    piecewise-constant C: Monte Carlo left side against the exact
    occupation-probability right side, within three standard errors."""
    x0 = np.asarray(x0_dist, dtype=float)
    rng = np.random.default_rng(seed + 104729)
    T = schedule.horizon
    edges = np.linspace(0.0, T, n_bins + 1)
    cvals = rng.uniform(-1.0, 1.0, size=(n_bins, dim, schedule.num_states))

    nodes = np.unique(np.concatenate((
        np.linspace(0.0, T, refine + 1), edges, schedule.breakpoints)))
    p_nodes, p_mid = _occupation_at_nodes(schedule, nodes, x0)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    bp = schedule.breakpoints
    rhs = 0.0
    for g in range(nodes.size - 1):
        a, b = float(nodes[g]), float(nodes[g + 1])
        kp = min(int(np.searchsorted(bp, mids[g], side="right")) - 1, schedule.num_pieces - 1)
        bin_idx = max(int(np.searchsorted(edges, mids[g], side="right")) - 1, 0)
        amat = schedule.matrices[kp]
        c = cvals[min(bin_idx, n_bins - 1)]
        semis = np.array([seminorm_sq_basis(c, amat, i) for i in range(schedule.num_states)])
        f = (float(p_nodes[g] @ semis), float(p_mid[g] @ semis), float(p_nodes[g + 1] @ semis))
        rhs += (b - a) / 6.0 * (f[0] + 4.0 * f[1] + f[2])

    samples = _run_isometry(schedule, x0, seed, n_paths, parallel, edges, cvals)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(n_paths))
    gap = abs(mean - rhs)
    return CheckResult("stochastic_integral_isometry", gap <= 3.0 * se + 1e-12, {
        "n_paths": n_paths, "mc_mean": mean, "exact_value": rhs, "se": se, "gap": gap,
    })


def _run_isometry(schedule, x0, seed, n_paths, parallel, edges, cvals):
    chunk = max(1, -(-n_paths // max(parallel, 1)))
    jobs = [
        (schedule, x0, seed, s, min(s + chunk, n_paths), edges, cvals)
        for s in range(0, n_paths, chunk)
    ]
    if parallel <= 1 or len(jobs) == 1:
        parts = [_isometry_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            parts = list(ex.map(_isometry_chunk, jobs))
    return np.concatenate(parts)


def check_3a_bound(n_draws: int, seed: int, max_states: int = 6, max_dim: int = 3,
                   rate_scale: float = 2.0) -> CheckResult:
    """||C||^2_V <= 3a ||C||^2 on random (C, A, e_i) draws; zero violations."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst_margin = -np.inf
    for _ in range(n_draws):
        n = int(rng.integers(2, max_states + 1))
        k = int(rng.integers(1, max_dim + 1))
        a = random_rate_matrix(rng, n, rate_scale)
        c = rng.uniform(-2.0, 2.0, size=(k, n))
        i = int(rng.integers(0, n))
        lhs = seminorm_sq_basis(c, a, i)
        rhs = 3.0 * float(np.max(np.abs(a))) * float(np.sum(c * c))
        worst_margin = max(worst_margin, lhs - rhs)
        if lhs > rhs + 1e-12:
            violations += 1
    return CheckResult("three_a_bound", violations == 0, {
        "n_draws": n_draws, "violations": violations, "worst_margin": worst_margin,
    })


def check_psd_density(n_draws: int, seed: int, max_states: int = 6,
                      rate_scale: float = 2.0) -> CheckResult:
    """min eigenvalue of D(e_i) >= -1e-10 over random rate matrices."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n_draws):
        n = int(rng.integers(2, max_states + 1))
        a = random_rate_matrix(rng, n, rate_scale)
        for i in range(n):
            w = np.linalg.eigvalsh(qv_density(a, i))
            worst = min(worst, float(w.min()))
    return CheckResult("qv_density_psd", worst >= -1e-10, {
        "n_draws": n_draws, "min_eigenvalue": worst,
    })


def run_identity_suite(schedule: RateSchedule, x0_dist, n_paths: int, seed: int,
                       parallel: int = 1, n_c_processes: int = 100,
                       n_bound_draws: int = 1000) -> list[CheckResult]:
    """The full identity suite behind `mcbsde verify`."""
    return [
        check_martingale_mean(schedule, x0_dist, n_paths, seed, parallel),
        check_compensator(schedule, x0_dist, n_paths, seed + 1, parallel),
        check_seminorm_qv(schedule, x0_dist, n_c_processes, seed + 2),
        check_isometry_mc(schedule, x0_dist, n_paths, seed + 3, parallel),
        check_3a_bound(n_bound_draws, seed + 4),
        check_psd_density(n_bound_draws, seed + 5),
    ]
