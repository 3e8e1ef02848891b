import math

import numpy as np
import pytest

from triobs.certify import d_checks, full_check, kernel_check, matrix_checks, verify
from triobs.errors import SynthesisError
from triobs.model import make_chain3_flipped
from triobs.schedule import ScalarSchedule
from triobs.synthesis import (ObserverGainSchedule, SynthesisConfig, d_integral_min, load_schedule,
                              p_R1_completion, save_schedule, synthesize)
from triobs.schedule import MatrixSchedule


def dense_min_eig(P, t0, t1):
    t = np.concatenate([np.linspace(t0, t1, 20001), t0 + np.logspace(-14, 0, 4001)])
    return float(np.min(np.linalg.eigvalsh(P(t))[:, 0]))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(L=1.0)
    with pytest.raises(ValueError):
        SynthesisConfig(R=0.0)
    with pytest.raises(ValueError):
        SynthesisConfig(xi=0.5)


def test_requires_increasing_form():
    sys, beta = make_chain3_flipped()
    with pytest.raises(SynthesisError, match="precondition"):
        synthesize(sys, beta, SynthesisConfig(horizon=1.0))


def test_completion_makes_bordered_matrix_definite():
    t = np.linspace(0, 1, 5)
    lower = MatrixSchedule.constant(t, [[2.0]])
    pR = ScalarSchedule(t, -np.linspace(0, 100, 5), -100 * np.ones(5))
    pR1 = p_R1_completion(lower, pR, 2.0)
    P = np.zeros((5, 2, 2))
    P[:, 0, 0], P[:, 0, 1], P[:, 1, 0], P[:, 1, 1] = pR1.values, pR.values, pR.values, 2.0
    assert np.all(np.linalg.eigvalsh(P)[:, 0] >= 1.0)
    # (1 + L)/2 + 1.1 p^2 / (L - 1) at p = -100
    assert pR1.values[-1] == pytest.approx(1.5 + 1.1 * 1e4)


def test_example_schedule_shape(example_schedule):
    s = example_schedule
    assert s.n == 2
    assert s.xi == pytest.approx(math.sqrt(2) * math.exp(4) * 4, rel=1e-15)
    assert s.t0 == 0.0 and s.t_end == 40.0
    # sigma = 1.1 * sup |delta22| with the closed-form sup 99140.9
    assert float(s.sigma(0.0)) == pytest.approx(1.1 * 99140.9, rel=1e-5)
    assert np.all(s.phi.values > 0)
    assert [lv.k for lv in s.levels] == [2]


def test_example_schedule_node_conditions(example_schedule):
    s = example_schedule
    assert all(c.passed for c in matrix_checks(s) + d_checks(s))
    assert np.linalg.norm(s.P(s.t0), 2) <= s.L
    assert d_integral_min(s.d, s.t0) > -s.n


def test_example_P_stays_definite_between_nodes(example_schedule):
    assert dense_min_eig(example_schedule.P, 0.0, 40.0) >= 1.0


def test_chain3_schedule_certifies(chain3, chain3_schedule):
    sys, beta = chain3
    s = chain3_schedule
    assert s.n == 3 and [lv.k for lv in s.levels] == [2, 3]
    assert dense_min_eig(s.P, s.t0, s.t_end) >= 1.0
    rep = verify(s, sys, beta, samples=20_000, seed=11, holdout=500)
    assert rep.passed, [c.as_dict() for c in rep.checks if not c.passed]


def test_schedule_files_round_trip(example_schedule, tmp_path):
    save_schedule(example_schedule, tmp_path / "a")
    back = load_schedule(tmp_path / "a")
    save_schedule(back, tmp_path / "b")
    for name in ("manifest.json", "P.csv", "d.csv", "phi.csv", "sigma.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    np.testing.assert_array_equal(back.gain_vector([0.5, 20.0]), example_schedule.gain_vector([0.5, 20.0]))


def _modified(s, **kw):
    fields = dict(P=s.P, d=s.d, phi=s.phi, xi=s.xi, t0=s.t0, R=s.R, g=s.g, L=s.L, sigma=s.sigma,
                  dbar_offset=s.dbar_offset)
    fields.update(kw)
    return ObserverGainSchedule(**fields)


def test_lowered_d_fails_bound(example_schedule):
    bad = _modified(example_schedule, d=example_schedule.d.shifted(-2.0))
    names = {c.name: c.passed for c in d_checks(bad)}
    assert not names["d_lower_bound"]


def test_halved_P_fails_min_eig(example_schedule):
    bad = _modified(example_schedule, P=example_schedule.P.scaled(0.5))
    names = {c.name: c.passed for c in matrix_checks(bad)}
    assert not names["P_min_eig"]


def test_shrunken_gain_fails_full_inequality(example, example_schedule):
    sys, beta = example
    s = example_schedule
    bad = _modified(s, phi=ScalarSchedule(s.phi.t, 1e-3 * s.phi.values, 1e-3 * s.phi.slopes, positive=True))
    assert not full_check(bad, sys, beta, samples=5000, seed=2).passed
    assert kernel_check(s, sys, beta, samples=5000, seed=2).passed
