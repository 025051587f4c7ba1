"""Named parametric driver families for the CLI and the test catalog.

Every family builds a `Driver` from dense numeric parameter arrays.  Where a
Lipschitz constant is computable in closed form it is attached to the driver
(`lipschitz_c`); otherwise it is left None and estimated on demand.

A caution on Y-dependence: the stated Lipschitz condition measures Y through
min_i ||.||^2_{e_i}, which vanishes on matrices with equal columns.  A driver
whose F reacts to a common shift of all columns of Y therefore has no finite
constant under that condition.  The `linear_y` family consequently has a
closed-form constant only when the coefficient blocks sum to zero (F then
factors through column differences); the builders return None otherwise and
leave estimation to the sampler.
"""

from __future__ import annotations

import numpy as np

from .calculus import seminorm_sq_basis
from .chain import RateSchedule
from .solver import Driver

__all__ = ["FAMILY_NAMES", "UnknownFamily", "build_driver"]


class UnknownFamily(ValueError):
    pass


class BadDriverParams(ValueError):
    pass


def _arr(params: dict, key: str, shape: tuple, default: float | None = 0.0) -> np.ndarray:
    if key in params:
        a = np.asarray(params[key], dtype=float)
        try:
            a = np.broadcast_to(a, shape).copy()
        except ValueError:
            raise BadDriverParams(f"driver parameter '{key}' has shape {a.shape}, expected broadcastable to {shape}")
        if not np.all(np.isfinite(a)):
            raise BadDriverParams(f"driver parameter '{key}' contains non-finite entries")
        return a
    if default is None:
        raise BadDriverParams(f"driver parameter '{key}' is required")
    return np.full(shape, default)


def _scalar(params: dict, key: str, default: float) -> float:
    v = float(params.get(key, default))
    if not np.isfinite(v):
        raise BadDriverParams(f"driver parameter '{key}' must be finite")
    return v


def _opnorm(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, 2))


def _min_offdiag_rate(schedule: RateSchedule) -> float:
    """min over pieces of the smallest off-diagonal rate (0 if any vanish)."""
    worst = np.inf
    for a in schedule.matrices:
        off = a[~np.eye(a.shape[0], dtype=bool)]
        worst = min(worst, float(off.min()))
    return max(worst, 0.0)


def _linear_y_constant(beta: np.ndarray, schedule: RateSchedule) -> float | None:
    """Closed-form min_i-Lipschitz constant of F(Y) = sum_j beta_j Y e_j.

    Available for two-state chains with zero-sum blocks, where
    F = beta_0 (col_0 - col_1) and min_i ||D||^2_{e_i} = r_min ||d0 - d1||^2:
    c = ||beta_0||_op / sqrt(r_min).
    """
    if np.allclose(beta, 0.0):
        return 0.0
    n = beta.shape[0]
    if n != 2 or not np.allclose(beta.sum(axis=0), 0.0):
        return None
    rmin = min(
        float(min(a[1, 0], a[0, 1])) for a in schedule.matrices
    )
    if rmin <= 0.0:
        return None
    return _opnorm(beta[0]) / np.sqrt(rmin)


def _g_constant(eps: float, w: np.ndarray, ghat: np.ndarray, schedule: RateSchedule) -> float:
    """Exact constant of max_i ||dG||^2_{e_i} <= c^2 ||dZ||^2 for
    G = eps (w . Z) ghat + const."""
    if eps == 0.0:
        return 0.0
    worst = 0.0
    for a in schedule.matrices:
        for i in range(a.shape[0]):
            worst = max(worst, seminorm_sq_basis(ghat, a, i))
    return abs(eps) * float(np.linalg.norm(w)) * np.sqrt(worst)


def _combine_f_constant(c_z: float, c_y: float | None) -> float | None:
    if c_y is None:
        return None
    # ||dF|| <= c_z ||dZ|| + c_y m  =>  ||dF||^2 <= (c_z^2 + c_y^2)(||dZ||^2 + m^2)
    return float(np.hypot(c_z, c_y))


def _zero_driver(n: int, k: int) -> Driver:
    zf = np.zeros(k)
    zg = np.zeros((k, n))
    return Driver(
        F=lambda t, i, Z, Y: zf,
        G=lambda t, i, Z: zg,
        lipschitz_c=0.0,
        f_depends_z=False, f_depends_y=False, g_depends_z=False,
        f_batch=lambda t, Z, Y: np.zeros((n, k)),
        g_batch=lambda t, Z: np.zeros((n, k, n)),
        f_batch_times=lambda ts, Z, Y: np.zeros((np.size(ts), n, k)),
        g_batch_times=lambda ts, Z: np.zeros((np.size(ts), n, k, n)),
        name="zero",
    )


def _build_constant(params, n, k, schedule):
    f0 = _arr(params, "f0", (n, k))
    g0 = _arr(params, "g0", (n, k, n))
    return Driver(
        F=lambda t, i, Z, Y: f0[i],
        G=lambda t, i, Z: g0[i],
        lipschitz_c=0.0,
        f_depends_z=False, f_depends_y=False, g_depends_z=False,
        f_batch=lambda t, Z, Y: f0,
        g_batch=lambda t, Z: g0,
        f_batch_times=lambda ts, Z, Y: np.broadcast_to(f0, (np.size(ts), n, k)).copy(),
        g_batch_times=lambda ts, Z: np.broadcast_to(g0, (np.size(ts), n, k, n)).copy(),
        name="constant",
    )


def _affine_pieces(params, n, k):
    alpha = _arr(params, "alpha", (k, k))
    beta = _arr(params, "beta", (n, k, k))
    f0 = _arr(params, "f0", (n, k))
    f0_amp = _arr(params, "f0_amp", (k,))
    f0_freq = _scalar(params, "f0_freq", 0.0)

    def core(t, zmat, ymat):
        # zmat (N,K), ymat (N,K,N): sum_j beta_j @ Y[:, :, j] per state
        out = zmat @ alpha.T + np.einsum("jkl,ilj->ik", beta, ymat) + f0
        if f0_freq != 0.0 or np.any(f0_amp):
            out = out + np.cos(f0_freq * t) * f0_amp[None, :]
        return out

    def core_single(t, i, Z, Y):
        z = np.asarray(Z, dtype=float).reshape(-1)
        y = np.asarray(Y, dtype=float).reshape(k, n)
        val = alpha @ z + np.einsum("jkl,lj->k", beta, y) + f0[i]
        if f0_freq != 0.0 or np.any(f0_amp):
            val = val + np.cos(f0_freq * t) * f0_amp
        return val

    def core_times(ts, zall, yall):
        out = (np.einsum("tnk,lk->tnl", zall, alpha)
               + np.einsum("jkl,tilj->tik", beta, yall) + f0[None])
        if f0_freq != 0.0 or np.any(f0_amp):
            out = out + np.cos(f0_freq * np.asarray(ts))[:, None, None] * f0_amp[None, None, :]
        return out

    return alpha, beta, core, core_single, core_times


def _g_pieces(params, n, k):
    eps = _scalar(params, "eps", 0.0)
    ghat = _arr(params, "ghat", (k, n))
    w = _arr(params, "w", (k,)) if "w" in params else np.ones(k)
    g0 = _arr(params, "g0", (n, k, n))

    def g_batch(t, zmat):
        if eps == 0.0:
            return np.broadcast_to(g0, (n, k, n)).copy()
        scal = eps * (zmat @ w)
        return scal[:, None, None] * ghat[None, :, :] + g0

    def g_single(t, i, Z):
        z = np.asarray(Z, dtype=float).reshape(-1)
        if eps == 0.0:
            return g0[i]
        return eps * float(z @ w) * ghat + g0[i]

    def g_batch_times(ts, zall):
        if eps == 0.0:
            return np.broadcast_to(g0, (np.size(ts), n, k, n)).copy()
        scal = eps * (zall @ w)
        return scal[:, :, None, None] * ghat[None, None] + g0[None]

    return eps, ghat, w, g_batch, g_single, g_batch_times


def _build_linear_z(params, n, k, schedule):
    alpha, beta, core, core_single, core_times = _affine_pieces(params, n, k)
    if np.any(beta):
        raise BadDriverParams("linear_z does not accept a beta parameter; use linear_full")
    g0 = _arr(params, "g0", (n, k, n))
    return Driver(
        F=core_single,
        G=lambda t, i, Z: g0[i],
        lipschitz_c=_opnorm(alpha),
        f_depends_z=True, f_depends_y=False, g_depends_z=False,
        f_batch=lambda t, Z, Y: core(t, Z, Y),
        g_batch=lambda t, Z: g0,
        f_batch_times=core_times,
        g_batch_times=lambda ts, Z: np.broadcast_to(g0, (np.size(ts), n, k, n)).copy(),
        name="linear_z",
    )


def _build_linear_y(params, n, k, schedule):
    alpha, beta, core, core_single, core_times = _affine_pieces(params, n, k)
    if np.any(alpha):
        raise BadDriverParams("linear_y does not accept an alpha parameter; use linear_full")
    g0 = _arr(params, "g0", (n, k, n))
    return Driver(
        F=core_single,
        G=lambda t, i, Z: g0[i],
        lipschitz_c=_linear_y_constant(beta, schedule),
        f_depends_z=False, f_depends_y=True, g_depends_z=False,
        f_batch=lambda t, Z, Y: core(t, Z, Y),
        g_batch=lambda t, Z: g0,
        f_batch_times=core_times,
        g_batch_times=lambda ts, Z: np.broadcast_to(g0, (np.size(ts), n, k, n)).copy(),
        name="linear_y",
    )


def _build_linear_full(params, n, k, schedule):
    alpha, beta, core, core_single, core_times = _affine_pieces(params, n, k)
    eps, ghat, w, g_batch, g_single, g_batch_times = _g_pieces(params, n, k)
    c_f = _combine_f_constant(_opnorm(alpha), _linear_y_constant(beta, schedule))
    c_g = _g_constant(eps, w, ghat, schedule)
    c = max(c_f, c_g) if c_f is not None else None
    return Driver(
        F=core_single,
        G=g_single,
        lipschitz_c=c,
        f_depends_z=bool(np.any(alpha)), f_depends_y=bool(np.any(beta)),
        g_depends_z=eps != 0.0,
        f_batch=lambda t, Z, Y: core(t, Z, Y),
        g_batch=g_batch,
        f_batch_times=core_times,
        g_batch_times=g_batch_times,
        name="linear_full",
    )


def _build_soft_nonlinear(params, n, k, schedule):
    alpha, beta, core, core_single, core_times = _affine_pieces(params, n, k)
    eps, ghat, w, g_batch, g_single, g_batch_times = _g_pieces(params, n, k)
    squash = _arr(params, "squash", (k,), default=1.0)
    if np.any(squash <= 0.0):
        raise BadDriverParams("squash scales must be positive")
    bias = _arr(params, "f0", (n, k))  # affine offset moved outside the squash

    def f_batch(t, zmat, ymat):
        inner = core(t, zmat, ymat) - bias
        return bias + squash[None, :] * np.tanh(inner / squash[None, :])

    def f_single(t, i, Z, Y):
        inner = core_single(t, i, Z, Y) - bias[i]
        return bias[i] + squash * np.tanh(inner / squash)

    def f_batch_times(ts, zall, yall):
        inner = core_times(ts, zall, yall) - bias[None]
        return bias[None] + squash[None, None, :] * np.tanh(inner / squash[None, None, :])

    # x -> s tanh(x/s) is 1-Lipschitz componentwise, so the affine core's
    # constant is a valid (declared) constant for the squashed driver
    c_f = _combine_f_constant(_opnorm(alpha), _linear_y_constant(beta, schedule))
    c_g = _g_constant(eps, w, ghat, schedule)
    c = max(c_f, c_g) if c_f is not None else None
    return Driver(
        F=f_single,
        G=g_single,
        lipschitz_c=c,
        f_depends_z=bool(np.any(alpha)), f_depends_y=bool(np.any(beta)),
        g_depends_z=eps != 0.0,
        f_batch=f_batch,
        g_batch=g_batch,
        f_batch_times=f_batch_times,
        g_batch_times=g_batch_times,
        name="soft_nonlinear",
    )


_FAMILIES = {
    "zero": lambda params, n, k, schedule: _zero_driver(n, k),
    "constant": _build_constant,
    "linear_z": _build_linear_z,
    "linear_y": _build_linear_y,
    "linear_full": _build_linear_full,
    "soft_nonlinear": _build_soft_nonlinear,
}

FAMILY_NAMES = tuple(sorted(_FAMILIES))


def build_driver(family: str, params: dict, num_states: int, dim: int,
                 schedule: RateSchedule, lipschitz_c: float | None = None) -> Driver:
    """Instantiate a registry family; `lipschitz_c` overrides the declared one."""
    if family not in _FAMILIES:
        raise UnknownFamily(f"unknown driver family {family!r}; known: {', '.join(FAMILY_NAMES)}")
    driver = _FAMILIES[family](dict(params or {}), num_states, dim, schedule)
    if lipschitz_c is not None:
        driver.lipschitz_c = float(lipschitz_c)
    return driver
