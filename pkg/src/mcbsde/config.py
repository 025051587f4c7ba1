"""Problem configuration: a single JSON document.

Schema (see README for the full field reference):

    {
      "num_states": 2, "dimension": 1, "horizon": 1.0,
      "rate_schedule": {"breakpoints": [0.0, 1.0],
                         "matrices": [[[-1.0, 1.0], [1.0, -1.0]]]},
      "initial_distribution": [1.0, 0.0],
      "driver": {"family": "linear_y", "params": {...}, "lipschitz_c": null},
      "terminal": [[1.0], [0.0]],
      "grid": {"steps": 1000},
      "picard": {"tol": 1e-10, "max_iter": 200},
      "seeds": {"simulation": 1234, "lipschitz": 99},
      "monte_carlo": {"paths": 20000},
      "lipschitz": {"samples": 20000, "box_halfwidth": 1.0}   # optional
    }

Rate matrices use the column convention (entry [j][i] is the rate i -> j,
columns sum to zero).  Validation failures raise ConfigError with a
dotted-path field diagnostic; the CLI maps them to exit code 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .chain import RateSchedule, ScheduleError
from .drivers import BadDriverParams, UnknownFamily, build_driver
from .solver import Driver

__all__ = ["ConfigError", "ProblemConfig", "load_config"]


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ProblemConfig:
    num_states: int
    dim: int
    horizon: float
    schedule: RateSchedule
    initial_distribution: np.ndarray
    driver_family: str
    driver_params: dict
    lipschitz_c: float | None
    terminal: np.ndarray  # (N, K)
    grid_steps: int
    tol: float
    max_iter: int
    seed_simulation: int
    seed_lipschitz: int
    mc_paths: int
    lipschitz_samples: int
    lipschitz_box_halfwidth: float
    raw: dict

    def build_driver(self) -> Driver:
        return build_driver(self.driver_family, self.driver_params,
                            self.num_states, self.dim, self.schedule,
                            self.lipschitz_c)


def _need(doc: dict, key: str, path: str = ""):
    if key not in doc:
        raise ConfigError(path + key, "missing required field")
    return doc[key]


def _as_int(value, field: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    v = int(value)
    if minimum is not None and v < minimum:
        raise ConfigError(field, f"must be >= {minimum}, got {v}")
    return v


def _as_float(value, field: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    v = float(value)
    if not np.isfinite(v):
        raise ConfigError(field, "must be finite")
    if positive and v <= 0.0:
        raise ConfigError(field, f"must be positive, got {v}")
    return v


def parse_config(doc: dict) -> ProblemConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    n = _as_int(_need(doc, "num_states"), "num_states", 2)
    k = _as_int(_need(doc, "dimension"), "dimension", 1)
    T = _as_float(_need(doc, "horizon"), "horizon", positive=True)

    rs = _need(doc, "rate_schedule")
    try:
        schedule = RateSchedule(
            np.asarray(_need(rs, "breakpoints", "rate_schedule."), dtype=float),
            np.asarray(_need(rs, "matrices", "rate_schedule."), dtype=float),
        )
    except ScheduleError as e:
        raise ConfigError("rate_schedule", str(e)) from e
    except (TypeError, ValueError) as e:
        raise ConfigError("rate_schedule", f"malformed arrays: {e}") from e
    if schedule.num_states != n:
        raise ConfigError("rate_schedule.matrices",
                          f"matrices are {schedule.num_states}x{schedule.num_states}, num_states is {n}")
    if abs(schedule.horizon - T) > 1e-12:
        raise ConfigError("rate_schedule.breakpoints",
                          f"last breakpoint {schedule.horizon} != horizon {T}")

    x0 = np.asarray(_need(doc, "initial_distribution"), dtype=float)
    if x0.shape != (n,):
        raise ConfigError("initial_distribution", f"expected {n} entries, got shape {x0.shape}")
    if np.any(x0 < 0.0):
        raise ConfigError("initial_distribution", "entries must be nonnegative")
    if abs(float(x0.sum()) - 1.0) > 1e-12:
        raise ConfigError("initial_distribution", f"sums to {x0.sum()!r}, expected 1 within 1e-12")

    drv = _need(doc, "driver")
    family = _need(drv, "family", "driver.")
    params = drv.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("driver.params", "expected an object of parameter arrays")
    lip = drv.get("lipschitz_c")
    if lip is not None:
        lip = _as_float(lip, "driver.lipschitz_c")
        if lip < 0:
            raise ConfigError("driver.lipschitz_c", "must be nonnegative")

    term = np.asarray(_need(doc, "terminal"), dtype=float)
    if term.ndim == 1:
        term = term[:, None]
    if term.shape != (n, k):
        raise ConfigError("terminal", f"expected shape ({n}, {k}), got {term.shape}")
    if not np.all(np.isfinite(term)):
        raise ConfigError("terminal", "entries must be finite")

    grid = doc.get("grid", {})
    steps = _as_int(grid.get("steps", 1000), "grid.steps", 2)
    picard = doc.get("picard", {})
    tol = _as_float(picard.get("tol", 1e-10), "picard.tol", positive=True)
    max_iter = _as_int(picard.get("max_iter", 200), "picard.max_iter", 1)
    seeds = doc.get("seeds", {})
    seed_sim = _as_int(seeds.get("simulation", 0), "seeds.simulation", 0)
    seed_lip = _as_int(seeds.get("lipschitz", 0), "seeds.lipschitz", 0)
    mc = doc.get("monte_carlo", {})
    paths = _as_int(mc.get("paths", 10000), "monte_carlo.paths", 1)
    lipsec = doc.get("lipschitz", {})
    lip_samples = _as_int(lipsec.get("samples", 20000), "lipschitz.samples", 1)
    lip_hw = _as_float(lipsec.get("box_halfwidth", 1.0), "lipschitz.box_halfwidth", positive=True)

    cfg = ProblemConfig(
        num_states=n, dim=k, horizon=T, schedule=schedule,
        initial_distribution=x0, driver_family=family,
        driver_params=params, lipschitz_c=lip, terminal=term,
        grid_steps=steps, tol=tol, max_iter=max_iter,
        seed_simulation=seed_sim, seed_lipschitz=seed_lip,
        mc_paths=paths, lipschitz_samples=lip_samples,
        lipschitz_box_halfwidth=lip_hw, raw=doc,
    )
    try:
        cfg.build_driver()
    except (UnknownFamily, BadDriverParams) as e:
        raise ConfigError("driver", str(e)) from e
    return cfg


def load_config(path: str) -> tuple[ProblemConfig, bytes]:
    """Parse and validate a config file; returns (config, raw bytes)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e}") from e
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError("<file>", f"invalid JSON: {e}") from e
    return parse_config(doc), raw
