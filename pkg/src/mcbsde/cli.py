"""Batch front-end: mcbsde <solve|simulate|represent|verify|diagnose>.

Exit codes: 0 success, 2 config error, 3 Picard non-convergence (outputs are
still written), 4 verification failure.

Determinism contract: identical config (including seeds) and the same
--parallel level produce byte-identical artifacts.  Wall time is therefore
written to a `timing.json` sidecar and to the console, never into
report.json (which lists the emitted files with content hashes).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .chain import transition_matrix
from .config import ConfigError, ProblemConfig, load_config
from .representation import conditional_expectation, reconstruct, representation_integrand
from .solver import (
    LipschitzBox,
    NoConvergence,
    contraction_diagnostics,
    estimate_lipschitz,
    pathwise_residual,
    route_stage,
    solve,
    solve_general,
    solve_ode_oracle,
    solve_stage2,
    PicardReport,
)
from .verification import _simulate_seeded, run_identity_suite

CSV_LAYOUT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_VERIFY = 0, 2, 3, 4


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class OutputSink:
    """Collects deterministic artifacts, hashes them, writes report.json."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.outputs = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: bytes) -> None:
        (self.out_dir / name).write_bytes(data)
        self.outputs.append({"name": name, "sha256": _sha256(data), "bytes": len(data)})

    def write_text(self, name: str, text: str) -> None:
        self.write(name, text.encode("utf-8"))

    def write_json(self, name: str, doc) -> None:
        # keep artifacts strict JSON: non-finite floats become null
        self.write_text(name, json.dumps(_sanitize(doc), indent=2, sort_keys=True) + "\n")


def _sanitize(doc):
    if isinstance(doc, dict):
        return {k: _sanitize(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_sanitize(v) for v in doc]
    if isinstance(doc, float) and not np.isfinite(doc):
        return None
    return doc


def _csv(header: str, rows) -> str:
    lines = [header]
    lines.extend(",".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def _z_csv(solution) -> str:
    k = solution.z.dim
    header = "t,state," + ",".join(f"z{c}" for c in range(k))
    rows = []
    for g, t in enumerate(solution.grid.times):
        for i in range(solution.z.num_states):
            rows.append([_fmt(t), str(i)] + [_fmt(v) for v in solution.z.values[g, i]])
    return _csv(header, rows)


def _y_csv(solution) -> str:
    k = solution.y.dim
    n = solution.y.num_states
    header = "t,state,col," + ",".join(f"y{c}" for c in range(k))
    rows = []
    for g, t in enumerate(solution.grid.times):
        for i in range(n):
            for j in range(n):
                rows.append([_fmt(t), str(i), str(j)] +
                            [_fmt(v) for v in solution.y.values[g, i, :, j]])
    return _csv(header, rows)


def _report_doc(command: str, config_digest: str, sink: OutputSink, checks, extra: dict) -> dict:
    return {
        "command": command,
        "tool_version": __version__,
        "csv_layout_version": CSV_LAYOUT_VERSION,
        "config_digest": config_digest,
        "outputs": sink.outputs,
        "checks": [c if isinstance(c, dict) else c.to_dict() for c in checks],
        **extra,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: ProblemConfig, digest: str, sink: OutputSink, parallel: int) -> int:
    driver = cfg.build_driver()
    stage = route_stage(driver)
    code = EXIT_OK
    try:
        solution, report = solve(driver, cfg.terminal, cfg.schedule, cfg.grid_steps,
                                 cfg.tol, cfg.max_iter, x0_dist=cfg.initial_distribution)
    except NoConvergence as e:
        solution, report = e.solution, e.report
        code = EXIT_NOCONV
    sink.write_text("z.csv", _z_csv(solution))
    sink.write_text("y.csv", _y_csv(solution))
    sink.write_json("picard.json", report.to_dict())
    terminal_exact = bool(np.array_equal(solution.z.values[-1], cfg.terminal))
    checks = [
        {"name": "converged", "passed": report.converged,
         "measured": {"iterations": report.iterations}},
        {"name": "terminal_exact", "passed": terminal_exact, "measured": {}},
    ]
    extra = {"stage": stage, "routing": {
        "f_depends_z": driver.f_depends_z, "f_depends_y": driver.f_depends_y,
        "g_depends_z": driver.g_depends_z, "family": cfg.driver_family,
    }}
    sink.write_json("report.json", _report_doc("solve", digest, sink, checks, extra))
    return code


def _simulate_chunk(args):
    cfg_schedule, x0, seed, start, stop = args
    rows = []
    for k in range(start, stop):
        path = _simulate_seeded(cfg_schedule, x0, seed, k)
        for u, j in zip(path.jump_times, path.jump_states):
            rows.append((k, float(u), int(j)))
    return rows


def cmd_simulate(cfg: ProblemConfig, digest: str, sink: OutputSink, parallel: int) -> int:
    n_paths = cfg.mc_paths
    seed = cfg.seed_simulation
    x0 = cfg.initial_distribution
    chunk = max(1, -(-n_paths // max(parallel, 1)))
    jobs = [(cfg.schedule, x0, seed, s, min(s + chunk, n_paths))
            for s in range(0, n_paths, chunk)]
    if parallel <= 1 or len(jobs) == 1:
        parts = [_simulate_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
    rows = []
    terminal_counts = np.zeros(cfg.num_states)
    for part in parts:
        for pid, u, j in part:
            rows.append([str(pid), _fmt(u), str(j)])
    # terminal states need a second cheap pass (exact from jumps)
    for k in range(n_paths):
        path = _simulate_seeded(cfg.schedule, x0, seed, k)
        terminal_counts[path.state_at(cfg.horizon)] += 1
    sink.write_text("paths.csv", _csv("path,jump_time,new_state", rows))

    expected = transition_matrix(cfg.schedule, 0.0, cfg.horizon) @ x0
    emp = terminal_counts / n_paths
    se = np.sqrt(np.maximum(expected * (1.0 - expected), 1e-300) / n_paths)
    ok = bool(np.all(np.abs(emp - expected) <= 3.0 * se + 1e-12))
    checks = [{
        "name": "terminal_distribution_3se", "passed": ok,
        "measured": {"empirical": emp.tolist(), "expected": expected.tolist(),
                     "n_paths": n_paths},
    }]
    sink.write_json("report.json", _report_doc("simulate", digest, sink, checks, {}))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_represent(cfg: ProblemConfig, digest: str, sink: OutputSink, parallel: int) -> int:
    l = conditional_expectation(cfg.terminal, cfg.schedule, cfg.grid_steps)
    gamma = representation_integrand(l)
    k = l.dim
    header = "t,state," + ",".join(f"l{c}" for c in range(k))
    rows = []
    for g, t in enumerate(l.grid.times):
        for i in range(cfg.num_states):
            rows.append([_fmt(t), str(i)] + [_fmt(v) for v in l.values[g, i]])
    sink.write_text("l.csv", _csv(header, rows))
    gh = "t,state,to_state," + ",".join(f"g{c}" for c in range(k))
    grows = []
    for g, t in enumerate(gamma.grid.times):
        for i in range(cfg.num_states):
            for j in range(cfg.num_states):
                if i != j:
                    grows.append([_fmt(t), str(i), str(j)] +
                                 [_fmt(v) for v in gamma.values[g, i, :, j]])
    sink.write_text("gamma.csv", _csv(gh, grows))

    worst = 0.0
    for p in range(cfg.mc_paths):
        path = _simulate_seeded(cfg.schedule, cfg.initial_distribution, cfg.seed_simulation, p)
        worst = max(worst, reconstruct(l, gamma, path).max_residual)
    ok = worst <= 1e-6
    checks = [{
        "name": "reconstruction_residual", "passed": ok,
        "measured": {"max_residual": worst, "n_paths": cfg.mc_paths, "tol": 1e-6},
    }]
    sink.write_json("report.json", _report_doc("represent", digest, sink, checks, {}))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_verify(cfg: ProblemConfig, digest: str, sink: OutputSink, parallel: int) -> int:
    results = run_identity_suite(cfg.schedule, cfg.initial_distribution,
                                 cfg.mc_paths, cfg.seed_simulation, parallel)
    ok = all(r.passed for r in results)
    sink.write_json("report.json", _report_doc("verify", digest, sink, results, {}))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_diagnose(cfg: ProblemConfig, digest: str, sink: OutputSink, parallel: int) -> int:
    driver = cfg.build_driver()
    stage = route_stage(driver)
    box = LipschitzBox.cube(cfg.dim, cfg.num_states, cfg.lipschitz_box_halfwidth)
    est = estimate_lipschitz(driver, box, cfg.lipschitz_samples, cfg.seed_lipschitz, cfg.schedule)
    c = driver.lipschitz_c if driver.lipschitz_c is not None else est.c
    c_source = "declared" if driver.lipschitz_c is not None else "estimated"
    x = (2.0 ** -0.5) / c if c > 0 else float("inf")
    T = cfg.horizon
    constants = {
        "c": c, "c_source": c_source, "c_estimated": est.c,
        "c_estimated_f": est.c_f, "c_estimated_g": est.c_g,
        "x": x, "three_a": 3.0 * cfg.schedule.max_rate,
        "gronwall_constant": 7.0 * c * c + 0.25,
        "factorial_factor": T * (4 * c * c + 1) * float(np.exp(T * (4 * c * c + 1))),
    }
    checks = []

    solution, report = solve(driver, cfg.terminal, cfg.schedule, cfg.grid_steps,
                             cfg.tol, cfg.max_iter, x0_dist=cfg.initial_distribution)

    summary = contraction_diagnostics(report)
    checks.append({"name": "contraction_certificate", "passed": summary.passed,
                   "measured": {"max_ratio": summary.max_ratio,
                                "n_ratios": summary.n_ratios,
                                "vacuous": summary.vacuous,
                                "details": summary.details}})

    # two-seed uniqueness: restart the iteration from a random bounded field
    rng = np.random.default_rng(cfg.seed_lipschitz + 1)
    sup_diff = 0.0
    if stage == 2:
        y0 = rng.uniform(-1.0, 1.0, size=solution.y.values.shape)
        zeros_z = np.zeros(cfg.dim)
        alt, _ = solve_stage2(lambda t, i, Y: driver.F(t, i, zeros_z, Y),
                              lambda t, i: driver.G(t, i, zeros_z),
                              cfg.terminal, cfg.schedule, cfg.grid_steps,
                              cfg.tol, cfg.max_iter, lipschitz_c=driver.lipschitz_c,
                              x0_dist=cfg.initial_distribution, y0=y0)
        sup_diff = float(np.max(np.abs(alt.z.values - solution.z.values)))
    elif stage == 3:
        z0 = cfg.terminal[None] + rng.uniform(-1.0, 1.0, size=solution.z.values.shape)
        alt, _ = solve_general(driver, cfg.terminal, cfg.schedule, cfg.grid_steps,
                               cfg.tol, cfg.max_iter, x0_dist=cfg.initial_distribution, z0=z0)
        sup_diff = float(np.max(np.abs(alt.z.values - solution.z.values)))
    uniq_ok = sup_diff <= 10.0 * cfg.tol
    checks.append({"name": "two_seed_uniqueness", "passed": uniq_ok,
                   "measured": {"sup_difference": sup_diff, "bound": 10.0 * cfg.tol,
                                "vacuous": stage == 1}})

    oracle = solve_ode_oracle(driver, cfg.terminal, cfg.schedule, cfg.grid_steps)
    gap = float(np.max(np.abs(oracle.z.values - solution.z.values)))
    gap_ok = gap <= 1e-6
    checks.append({"name": "oracle_equivalence", "passed": gap_ok,
                   "measured": {"sup_gap": gap, "tol": 1e-6}})

    extra = {"stage": stage, "constants": constants,
             "picard": report.to_dict()}
    sink.write_json("report.json", _report_doc("diagnose", digest, sink, checks, extra))
    return EXIT_OK if all(c["passed"] for c in checks) else EXIT_VERIFY


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "represent": cmd_represent,
    "verify": cmd_verify,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mcbsde",
        description="BSDE solver and verification suite on finite-state Markov chains",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON problem config")
    parser.add_argument("--out", default=".", help="output directory (default: cwd)")
    parser.add_argument("--parallel", type=int, default=1, metavar="K",
                        help="workers for Monte Carlo path loops (default 1)")
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    try:
        cfg, raw = load_config(args.config)
    except ConfigError as e:
        print(f"config error at {e.field}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    sink = OutputSink(Path(args.out))
    digest = _sha256(raw)
    try:
        code = COMMANDS[args.command](cfg, digest, sink, max(1, args.parallel))
    except ConfigError as e:
        print(f"config error at {e.field}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - t0
    # volatile sidecar, deliberately unhashed and absent from report.json
    (Path(args.out) / "timing.json").write_text(
        json.dumps({"wall_time_seconds": wall}) + "\n"
    )
    print(f"mcbsde {args.command}: exit {code} ({wall:.2f}s), outputs in {args.out}")
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
