"""Sampled certificates for a synthesized observer gain schedule.

Every check returns a `CheckResult`; a check passes exactly when it found no
violations. Inequalities of the form N <= 0 are judged against a rounding
scale: a sample violates when N exceeds 1e-10 times the sum of the absolute
sizes of the terms that make up N. The matrices reach 1e40 and beyond, so an
absolute tolerance would be meaningless.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .divdiff import delta
from .envelopes import holdout_sigma
from .lyapunov import (log_magnitudes, lyap_terms, quad, random_q,
                       sample_directions, sample_states, worst_q)
from .synthesis import ObserverGainSchedule, d_integral_min

REL_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    samples: int
    violations: int
    worst_margin: float
    location: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


@dataclass
class ViolationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.as_dict() for c in self.checks]}


def _sample_times(rng, sched, count):
    """Mostly uniform times, a fifth log-spaced close to t0 to cover the start-up ramps."""
    t0, t1 = sched.t0, sched.t_end
    t = t0 + (t1 - t0) * rng.random(count)
    m = count // 5
    t[:m] = np.minimum(t0 + 10.0 ** rng.uniform(-12.0, 0.0, m), t1)
    return t


def _beta_at(beta, R, t):
    return np.broadcast_to(beta(t, R + 0.0 * t), t.shape).astype(float)


def _record(name, margin_rel, total, t, extra=None):
    bad = margin_rel > REL_TOL
    worst = int(np.argmax(margin_rel)) if margin_rel.size else 0
    loc = {"t": float(t[worst])} if t.size else {}
    if extra is not None and t.size:
        loc.update({k: np.asarray(v)[worst].tolist() for k, v in extra.items()})
    return CheckResult(name, total, int(bad.sum()), float(-margin_rel[worst]) if margin_rel.size else 0.0, loc)


def kernel_check(sched: ObserverGainSchedule, sys, beta, samples: int = 100_000, seed: int = 0,
                 chunk: int = 20_000) -> CheckResult:
    """e'PAe + 1/2 e'Pd e + d e'Pe <= 0 for e_1 = 0, |e| <= xi, e'Pe >= g."""
    n = sched.n
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 35]))
    rels, ts, es = [], [], []
    done = 0
    while done < samples:
        c = min(chunk, samples - done)
        t = _sample_times(rng, sched, c)
        P, Pd, d = sched.P(t), sched.P.derivative(t), sched.d(t)
        g, sig = sched.g(t), sched.sigma(t)
        x, y = sample_states(rng, n, _beta_at(beta, sched.R, t), (c,))
        u = np.concatenate([np.zeros((c, 1)), sample_directions(rng, n - 1, (c,))], axis=1)
        rmin = np.sqrt(g / quad(P, u))
        mag = log_magnitudes(rng, np.minimum(rmin, sched.xi), sched.xi, (c,))
        mag[: c // 4] = np.minimum(rmin[: c // 4], sched.xi)
        e = u * mag[:, None]
        q = random_q(rng, n, n, sig, (c,))
        half = c // 2
        q[half:] = worst_q(n, n, P[half:], e[half:], sig[half:])
        ePAe, ePde, ePe, scale = lyap_terms(sys, n, t, P, Pd, q, x, e, y)
        feasible = ePe >= g * (1 - 1e-9)
        N = ePAe + 0.5 * ePde + d * ePe
        rel = np.where(feasible, N / (scale + np.abs(d) * ePe), -np.inf)
        rels.append(rel)
        ts.append(t)
        es.append(e)
        done += c
    rel = np.concatenate(rels)
    return _record("kernel_inequality", rel, samples, np.concatenate(ts), {"e": np.concatenate(es)})


def full_check(sched: ObserverGainSchedule, sys, beta, samples: int = 100_000, seed: int = 0,
               chunk: int = 20_000) -> CheckResult:
    """e'PAe + 1/2 e'Pd e + dbar e'Pe <= phi e_1^2 for |e| <= xi, e'Pe >= g."""
    n = sched.n
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 16]))
    rels, ts, es = [], [], []
    done = 0
    while done < samples:
        c = min(chunk, samples - done)
        t = _sample_times(rng, sched, c)
        P, Pd = sched.P(t), sched.P.derivative(t)
        dbar = sched.d(t) - sched.dbar_offset
        g, sig, phi = sched.g(t), sched.sigma(t), sched.phi(t)
        x, y = sample_states(rng, n, _beta_at(beta, sched.R, t), (c,))
        u = sample_directions(rng, n, (c,))
        third = c // 3
        # a third of the directions hug the kernel, where the ratio peaks
        u[:third, 0] *= 10.0 ** rng.uniform(-18.0, 0.0, third)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        rmin = np.sqrt(g / quad(P, u))
        mag = log_magnitudes(rng, np.minimum(rmin, sched.xi), sched.xi, (c,))
        e = u * mag[:, None]
        q = random_q(rng, n, n, sig, (c,))
        half = c // 2
        q[half:] = worst_q(n, n, P[half:], e[half:], sig[half:])
        ePAe, ePde, ePe, scale = lyap_terms(sys, n, t, P, Pd, q, x, e, y)
        feasible = ePe >= g * (1 - 1e-9)
        N = ePAe + 0.5 * ePde + dbar * ePe - phi * e[:, 0] ** 2
        rel = np.where(feasible, N / (scale + np.abs(dbar) * ePe + phi * e[:, 0] ** 2), -np.inf)
        rels.append(rel)
        ts.append(t)
        es.append(e)
        done += c
    rel = np.concatenate(rels)
    return _record("full_inequality", rel, samples, np.concatenate(ts), {"e": np.concatenate(es)})


def matrix_checks(sched: ObserverGainSchedule) -> list:
    lam = sched.P.min_eig()
    j = int(np.argmin(lam))
    eig = CheckResult("P_min_eig", lam.size, int(np.sum(lam < 1.0)), float(lam[j] - 1.0),
                      {"t": float(sched.P.t[j])})
    norm0 = float(np.linalg.norm(sched.P(sched.t0), 2))
    nrm = CheckResult("P_norm_at_t0", 1, int(norm0 > sched.L * (1 + 1e-12)), sched.L - norm0,
                      {"t": sched.t0})
    return [eig, nrm]


def d_checks(sched: ObserverGainSchedule, c1: float = 1.0) -> list:
    n = sched.n
    late = sched.d.t >= sched.t0 + 1.0
    v = sched.d.values[late]
    tl = sched.d.t[late]
    if v.size:
        j = int(np.argmin(v))
        bound = CheckResult("d_lower_bound", int(v.size), int(np.sum(~(v > c1))), float(v[j] - c1),
                            {"t": float(tl[j])})
    else:
        bound = CheckResult("d_lower_bound", 0, 0, float("inf"))
    imin = d_integral_min(sched.d, sched.t0)
    integ = CheckResult("d_integral", int(np.sum(sched.d.t <= sched.t0 + 1.0)), int(not imin > -n),
                        imin + n, {})
    return [bound, integ]


def g_checks(sched: ObserverGainSchedule, points: int = 10_000) -> CheckResult:
    horizon = sched.t_end - sched.t0
    res = sched.g.check(sched.t0, horizon, points)
    bad = sum(1 for ok in res.values() if not ok)
    return CheckResult("g_conditions", points, bad, 0.0, {k: bool(v) for k, v in res.items()})


def superdiagonal_holdout(sys, beta, sched: ObserverGainSchedule, samples: int = 1000, seed: int = 0) -> CheckResult:
    """Fresh points with e_{i+1} != 0 must give a positive superdiagonal quotient."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 21]))
    n = sys.n
    bad, worst = 0, np.inf
    for i in range(1, n):
        t = sched.t0 + (sched.t_end - sched.t0) * rng.random(samples)
        b = _beta_at(beta, sched.R, t)
        x, y = sample_states(rng, i + 1, b, (samples,))
        e = sample_directions(rng, i, (samples,)) * log_magnitudes(rng, 1e-6 * sched.xi, sched.xi, (samples,))[:, None]
        v = delta(sys, i, i + 1, t, y, x[:, 1:].T, e.T)
        bad += int(np.sum(~(v > 0)))
        worst = min(worst, float(np.min(v)))
    return CheckResult("superdiagonal_positive", samples * (n - 1), bad, worst)


def verify(sched: ObserverGainSchedule, sys, beta, samples: int = 100_000, seed: int = 0,
           holdout: int = 1000) -> ViolationReport:
    """Run every sampled certificate and node check on a schedule."""
    checks = [kernel_check(sched, sys, beta, samples, seed),
              full_check(sched, sys, beta, samples, seed)]
    checks += matrix_checks(sched)
    checks += d_checks(sched)
    checks.append(g_checks(sched))
    h = holdout_sigma(sys, beta, sched.R, sched.xi, sched.sigma, holdout, seed)
    checks.append(CheckResult("sigma_holdout", h["samples"], h["violations"], 1.0 - h["worst_ratio"]))
    checks.append(superdiagonal_holdout(sys, beta, sched, holdout, seed))
    return ViolationReport(checks)
