"""Registry families: construction, declared constants, dependency flags."""

import numpy as np
import pytest

from mcbsde import UnknownFamily, build_driver
from mcbsde.drivers import BadDriverParams

from catalog import asymmetric_2state, symmetric_2state


@pytest.fixture
def sch():
    return symmetric_2state()


def test_unknown_family_rejected(sch):
    with pytest.raises(UnknownFamily):
        build_driver("mystery", {}, 2, 1, sch)


def test_zero_family(sch):
    d = build_driver("zero", {}, 2, 1, sch)
    assert d.lipschitz_c == 0.0
    assert not (d.f_depends_z or d.f_depends_y or d.g_depends_z)
    assert np.array_equal(d.F(0.3, 0, np.ones(1), np.ones((1, 2))), np.zeros(1))


def test_constant_family_broadcasts_f0(sch):
    d = build_driver("constant", {"f0": [0.5]}, 2, 1, sch)
    np.testing.assert_allclose(d.F(0.0, 1, np.zeros(1), np.zeros((1, 2))), [0.5])


def test_bad_param_shape_rejected(sch):
    with pytest.raises(BadDriverParams):
        build_driver("constant", {"f0": [[1.0, 2.0, 3.0]] * 5}, 2, 1, sch)
    with pytest.raises(BadDriverParams):
        build_driver("soft_nonlinear", {"squash": [-1.0]}, 2, 1, sch)


def test_linear_z_constant_is_operator_norm(sch):
    alpha = np.array([[0.3, 0.1], [0.0, 0.4]])
    d = build_driver("linear_z", {"alpha": alpha}, 2, 2, sch)
    assert d.lipschitz_c == pytest.approx(np.linalg.norm(alpha, 2))
    assert d.f_depends_z and not d.f_depends_y


def test_linear_y_constant_two_state():
    sch = asymmetric_2state(lam01=1.2, lam10=0.6)
    d = build_driver("linear_y", {"beta": [[[0.7]], [[-0.7]]]}, 2, 1, sch)
    assert d.lipschitz_c == pytest.approx(0.7 / np.sqrt(0.6))


def test_linear_y_no_constant_when_not_zero_sum(sch):
    d = build_driver("linear_y", {"beta": [[[0.7]], [[0.0]]]}, 2, 1, sch)
    assert d.lipschitz_c is None


def test_linear_full_combines_constants(sch):
    d = build_driver("linear_full",
                     {"alpha": [[0.3]], "beta": [[[0.4]], [[-0.4]]],
                      "eps": 0.2, "ghat": [[1.0, -1.0]]}, 2, 1, sch)
    c_f = np.hypot(0.3, 0.4 / 1.0)
    c_g = 0.2 * np.sqrt(max(1.0 * 4.0, 1.0 * 4.0))  # rate * ||col diff||^2
    assert d.lipschitz_c == pytest.approx(max(c_f, c_g))
    assert d.f_depends_z and d.f_depends_y and d.g_depends_z


def test_batch_matches_pointwise(sch):
    rng = np.random.default_rng(1)
    for family, params in [
        ("linear_full", {"alpha": [[0.4]], "beta": [[[0.2]], [[-0.2]]],
                         "f0": [[0.1], [0.2]], "eps": 0.1, "ghat": [[0.5, -0.5]],
                         "f0_amp": [0.3], "f0_freq": 2.0}),
        ("soft_nonlinear", {"alpha": [[0.4]], "beta": [[[0.2]], [[-0.2]]],
                            "f0": [[0.1], [0.2]], "squash": [1.7],
                            "eps": 0.1, "ghat": [[0.5, -0.5]]}),
    ]:
        d = build_driver(family, params, 2, 1, sch)
        t = 0.37
        zmat = rng.uniform(-1, 1, size=(2, 1))
        ymat = rng.uniform(-1, 1, size=(2, 1, 2))
        fb = d.f_batch(t, zmat, ymat)
        gb = d.g_batch(t, zmat)
        for i in range(2):
            np.testing.assert_allclose(fb[i], d.F(t, i, zmat[i], ymat[i]), atol=1e-14)
            np.testing.assert_allclose(gb[i], d.G(t, i, zmat[i]), atol=1e-14)


def test_soft_nonlinear_is_bounded(sch):
    d = build_driver("soft_nonlinear",
                     {"alpha": [[1.0]], "f0": [[0.5], [0.0]], "squash": [2.0]},
                     2, 1, sch)
    big = d.F(0.0, 0, np.array([1e6]), np.zeros((1, 2)))
    assert abs(big[0] - 0.5) <= 2.0 + 1e-12


def test_lipschitz_override(sch):
    d = build_driver("linear_z", {"alpha": [[0.5]]}, 2, 1, sch, lipschitz_c=2.0)
    assert d.lipschitz_c == 2.0
