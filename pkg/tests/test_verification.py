"""The identity-check suite used by `mcbsde verify`."""

import numpy as np

from mcbsde import simulate_paths
from mcbsde.verification import (
    check_3a_bound,
    check_compensator,
    check_isometry_mc,
    check_martingale_mean,
    check_psd_density,
    check_seminorm_qv,
    run_identity_suite,
)

from catalog import symmetric_2state, three_state_two_piece

X0_3 = np.array([1.0, 0.0, 0.0])


def test_martingale_mean():
    res = check_martingale_mean(three_state_two_piece(), X0_3, 20_000, seed=1)
    assert res.passed
    assert res.measured["max_abs_mean"] <= 3 * res.measured["max_se"] + 1e-12


def test_compensator():
    res = check_compensator(three_state_two_piece(), X0_3, 20_000, seed=2)
    assert res.passed


def test_isometry_mc():
    res = check_isometry_mc(symmetric_2state(), np.array([1.0, 0.0]), 20_000, seed=3)
    assert res.passed
    assert res.measured["exact_value"] > 0


def test_seminorm_qv_and_bounds():
    assert check_seminorm_qv(three_state_two_piece(), X0_3, 30, seed=4).passed
    assert check_3a_bound(300, seed=5).passed
    assert check_psd_density(300, seed=6).passed


def test_parallel_chunks_match_serial():
    sch = three_state_two_piece()
    serial = check_compensator(sch, X0_3, 4000, seed=9, parallel=1)
    chunked = check_compensator(sch, X0_3, 4000, seed=9, parallel=3)
    assert serial.measured == chunked.measured


def test_run_identity_suite_names():
    res = run_identity_suite(symmetric_2state(), np.array([0.5, 0.5]), 4000, seed=11,
                             n_c_processes=20, n_bound_draws=200)
    assert [r.passed for r in res] == [True] * 6


def test_simulate_paths_seed_convention():
    from mcbsde import simulate_path
    sch = symmetric_2state()
    batch = simulate_paths(sch, 0, 5, 1000)
    for k, path in enumerate(batch):
        solo = simulate_path(sch, 0, 1000 ^ k)
        assert np.array_equal(path.jump_times, solo.jump_times)
