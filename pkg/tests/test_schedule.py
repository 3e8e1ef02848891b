import numpy as np
import pytest

from triobs.schedule import (MatrixSchedule, ScalarSchedule, merge_grids, monotone_slopes, ramp_nodes,
                             smoothstep, uniform_grid)


def test_uniform_grid():
    g = uniform_grid(1.0, 2.0, 0.5)
    np.testing.assert_array_equal(g, [1.0, 1.5, 2.0, 2.5, 3.0])
    with pytest.raises(ValueError):
        uniform_grid(0.0, 1.0, 0.0)


def test_merge_keeps_tiny_spacing_near_zero():
    g = merge_grids([0.0, 1e-12, 2e-12], [40.0], [1e-12 * (1 + 1e-17)])
    assert g.size == 4


def test_hermite_reproduces_cubics():
    t = np.array([0.0, 0.3, 1.0, 2.5])
    f = lambda s: 2 * s ** 3 - s ** 2 + 0.5 * s - 1
    df = lambda s: 6 * s ** 2 - 2 * s + 0.5
    sch = ScalarSchedule(t, f(t), df(t))
    s = np.linspace(0, 2.5, 101)
    np.testing.assert_allclose(sch(s), f(s), atol=1e-12)
    np.testing.assert_allclose(sch.derivative(s), df(s), atol=1e-11)


def test_constant_extrapolation():
    sch = ScalarSchedule([0.0, 1.0], [1.0, 2.0], [1.0, 1.0])
    assert sch(-1.0) == 1.0 and sch(5.0) == 2.0
    assert sch.derivative(5.0) == 0.0


def test_refine_preserves_curve(rng):
    t = np.sort(rng.uniform(0, 5, 12))
    v = np.cumsum(rng.random(12))
    sch = ScalarSchedule.fit_monotone(t, v, nondecreasing=True)
    fine = sch.refine(np.linspace(t[0], t[-1], 37))
    s = np.linspace(t[0], t[-1], 400)
    np.testing.assert_allclose(fine(s), sch(s), rtol=1e-12)


def test_monotone_fit_stays_monotone(rng):
    t = np.linspace(0, 1, 20)
    v = np.maximum.accumulate(rng.random(20) * 10)
    sch = ScalarSchedule(t, v, monotone_slopes(t, v))
    assert np.all(np.diff(sch(np.linspace(0, 1, 2000))) >= -1e-12)


def test_flags_are_enforced():
    with pytest.raises(ValueError):
        ScalarSchedule([0.0, 1.0], [2.0, 1.0], [0.0, 0.0], nondecreasing=True)
    with pytest.raises(ValueError):
        ScalarSchedule([0.0, 1.0], [0.0, 1.0], [0.0, 0.0], positive=True)
    with pytest.raises(ValueError):
        ScalarSchedule([1.0, 0.0], [0.0, 1.0], [0.0, 0.0])


def test_csv_round_trip_is_exact(rng):
    t = np.linspace(0, 1, 7)
    sch = ScalarSchedule(t, rng.normal(size=7) * 1e30, rng.normal(size=7))
    back = ScalarSchedule.from_csv(sch.to_csv())
    np.testing.assert_array_equal(back.values, sch.values)
    np.testing.assert_array_equal(back.slopes, sch.slopes)
    M = rng.normal(size=(7, 3, 3))
    M = M + np.swapaxes(M, 1, 2)
    ms = MatrixSchedule(t, M, 2 * M)
    mb = MatrixSchedule.from_csv(ms.to_csv())
    np.testing.assert_array_equal(mb.values, ms.values)
    assert mb.to_csv() == ms.to_csv()


def test_matrix_schedule_symmetry():
    V = np.zeros((2, 2, 2))
    V[:, 0, 1] = 1.0
    with pytest.raises(ValueError):
        MatrixSchedule([0.0, 1.0], V, np.zeros_like(V))
    ms = MatrixSchedule.constant([0.0, 1.0], [[2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_array_equal(ms.min_eig(), [2.0, 2.0])
    np.testing.assert_array_equal(ms.scaled(0.5).min_eig(), [1.0, 1.0])


def test_smoothstep_and_ramp_nodes():
    v, d = smoothstep(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
    np.testing.assert_array_equal(v, [0.0, 0.0, 0.5, 1.0, 1.0])
    np.testing.assert_array_equal(d, [0.0, 0.0, 1.5, 0.0, 0.0])
    n = ramp_nodes(0.0, 1.0, 4)
    assert n.min() == 0.0 and n.max() == 1.0 and 0.5 in n
