import numpy as np
import pytest

from triobs.errors import DivergenceError
from triobs.model import GainDecay, TriangularSystem
from triobs.runtime import (OBSERVER_COLUMNS, Trace, check_error_envelope, gains_with_residual, integrate_plant,
                            rk4_order_ratio, run_observer)
from triobs.schedule import MatrixSchedule, ScalarSchedule
from triobs.synthesis import ObserverGainSchedule


def low_gain_schedule(T=5.0):
    t = np.linspace(0.0, T, 11)
    P = MatrixSchedule.constant(t, [[3.0, 1.0], [1.0, 3.0]])
    phi = ScalarSchedule.constant(t, 20.0)
    return ObserverGainSchedule(P, ScalarSchedule.constant(t, 2.0), phi, 10.0, 0.0, 1.0,
                                GainDecay.exponential(), 4.0, ScalarSchedule.constant(t, 1.0))


def test_equilibrium_stays_put(example):
    sys, _ = example
    tr = integrate_plant(sys, 0.0, [0.0, 0.0], 10.0, 1e-3)
    assert np.max(np.abs(tr.states)) <= 1e-12


def test_plant_respects_growth_bound(example):
    sys, beta = example
    tr = integrate_plant(sys, 0.0, [1.0, 1.0], 20.0, 1e-3)
    bound = np.maximum(np.sqrt(2.0), 2 * np.sqrt(2))
    assert np.max(np.linalg.norm(tr.states, axis=1)) <= bound + 1e-6
    np.testing.assert_array_equal(tr.y, tr.states[:, 0])


def test_rk4_is_fourth_order(example):
    sys, _ = example
    ratio = rk4_order_ratio(sys, 0.0, [1.0, 1.0], 1.0, 0.01)
    assert 16 * 0.7 <= ratio <= 16 * 1.3


def test_plant_divergence_reports_time():
    sys = TriangularSystem(2, (lambda t, x: x[0] ** 2 + x[1], lambda t, x: 0.0 * x[1]), (1,))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError) as info:
        integrate_plant(sys, 0.0, [1.0, 0.0], 3.0, 1e-2)
    assert 0.9 < info.value.last_t < 1.1


def test_grid_validation(example):
    sys, _ = example
    with pytest.raises(ValueError):
        integrate_plant(sys, 0.0, [1.0, 1.0], 1.0, 0.3)
    with pytest.raises(ValueError):
        integrate_plant(sys, 1.0, [1.0, 1.0], 1.0, 0.1)


def test_rk4_and_bdf_agree_at_low_gain(example):
    sys, _ = example
    sched = low_gain_schedule()
    xt = integrate_plant(sys, 0.0, [0.5, -0.5], 5.0, 1e-3)
    a = run_observer(sched, xt, sys, h=1e-3, method="rk4")
    b = run_observer(sched, xt, sys, h=1e-3, method="bdf")
    assert run_observer(sched, xt, sys, h=1e-3).method == "rk4"
    assert np.max(np.abs(a.trace.states - b.trace.states)) < 1e-7


def test_observer_from_the_true_state_stays_on_it(example, example_schedule):
    sys, _ = example
    xt = integrate_plant(sys, 0.0, [1.0, 1.0], 10.0, 1e-3)
    run = run_observer(example_schedule, xt, sys, T=10.0, h=1e-3, z0=[1.0, 1.0])
    assert run.method == "bdf"
    # BDF4 truncation amplified by the gain stays at the 1e-9 level
    assert np.max(run.trace.aux["abs_e"]) < 1e-8


def test_observer_run_meets_envelopes(example, example_schedule):
    sys, _ = example
    xt = integrate_plant(sys, 0.0, [1.0, 1.0], 40.0, 1e-3)
    run = run_observer(example_schedule, xt, sys, h=1e-3)
    rep = check_error_envelope(xt, run.trace, example_schedule)
    assert rep.passed and rep.max_ratio < 1
    assert run.trace.aux["abs_e"][-1] <= 1e-2
    assert run.gain_residual <= 1e-10


def test_callable_output_matches_trace(example, example_schedule):
    sys, _ = example
    xt = integrate_plant(sys, 0.0, [1.0, -1.0], 2.0, 1e-3)
    a = run_observer(example_schedule, xt, sys, T=2.0, h=1e-3)
    curve = ScalarSchedule(xt.t, xt.y, sys.eval_f(1, xt.t, xt.states.T))
    b = run_observer(example_schedule, lambda t: float(curve(t)), sys, T=2.0, h=1e-3)
    np.testing.assert_allclose(a.trace.states, b.trace.states, rtol=0, atol=1e-12)
    assert np.all(np.isnan(b.trace.aux["abs_e"]))


def test_gain_residual(example_schedule):
    K, res = gains_with_residual(example_schedule, np.linspace(0, 40, 1001))
    assert res <= 1e-10
    P = example_schedule.P(np.array([3.0]))[0]
    np.testing.assert_allclose(P @ K[np.searchsorted(np.linspace(0, 40, 1001), 3.0)],
                               [float(example_schedule.phi(3.0)), 0.0], rtol=1e-10, atol=1e-10 * np.abs(P).max())


def test_envelope_check_on_constructed_traces(example, example_schedule):
    sys, _ = example
    xt = integrate_plant(sys, 0.0, [1.0, 1.0], 3.0, 1e-3)
    same = Trace(xt.h, xt.t, xt.states, xt.y, prefix="z")
    rep = check_error_envelope(xt, same, example_schedule)
    assert rep.passed and rep.max_ratio == 0.0
    far = Trace(xt.h, xt.t, xt.states - 2 * example_schedule.xi, xt.y, prefix="z")
    rep = check_error_envelope(xt, far, example_schedule)
    assert rep.violations_bound == xt.t.size and rep.first_violation_t == 0.0


def test_envelope_check_rejects_misaligned(example, example_schedule):
    sys, _ = example
    a = integrate_plant(sys, 0.0, [1.0, 1.0], 1.0, 1e-3)
    b = integrate_plant(sys, 0.0, [1.0, 1.0], 1.0, 2e-3)
    with pytest.raises(ValueError):
        check_error_envelope(a, b, example_schedule)


def test_trace_csv(example, example_schedule):
    sys, _ = example
    xt = integrate_plant(sys, 0.0, [1.0, 1.0], 0.01, 1e-3)
    lines = xt.to_csv().splitlines()
    assert lines[0] == "t,x1,x2" and len(lines) == 12
    run = run_observer(example_schedule, xt, sys, T=0.01, h=1e-3)
    text = run.trace.to_csv(OBSERVER_COLUMNS)
    assert text.splitlines()[0] == "t,z1,z2,y,abs_e,bound_exp,bound_g,window"
    row = text.splitlines()[5].split(",")
    assert float(row[1]) == run.trace.states[4, 0]
    assert text == run_observer(example_schedule, xt, sys, T=0.01, h=1e-3).trace.to_csv(OBSERVER_COLUMNS)
