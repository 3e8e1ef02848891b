"""Construction of the time-varying observer gains.

The construction runs level by level. Level 2 (`base_case`) works on the last
two states and yields a 2x2 matrix P_2(t) and a rate d_2(t). Each
`induction_step` borders the previous matrix with one more row and column,
using the scalar gain phi_k(t) produced by `injection_gain` for the previous
level. At level n, `injection_gain` gives the injection gain phi(t) of the
observer

    z' = F(t, z, y) + phi(t) P(t)^{-1} H' (y - z_1).

All schedules live on a grid that is the uniform synthesis grid plus
refinement nodes inside the short start-up ramps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .divdiff import assemble_A
from .envelopes import (D_min, SearchBudget, minorant_mu, sigma_majorant,
                        window_majorant)
from .errors import SynthesisError
from .lyapunov import (log_magnitudes, lyap_terms, quad, sample_directions,
                       sample_states, worst_q)
from .model import GainDecay, GrowthEnvelope, TriangularSystem
from .schedule import (MatrixSchedule, ScalarSchedule, merge_grids, ramp_nodes,
                       smoothstep, uniform_grid)


@dataclass
class SynthesisConfig:
    """Parameters of one synthesis run; `xi=None` selects the smallest admissible threshold."""

    R: float = 3.0
    xi: float | None = None
    L: float = 2.0
    t0: float = 0.0
    grid_dt: float = 0.05
    horizon: float = 40.0
    lam: float = 0.5
    g0: float = 0.5
    sigma_safety: float = 1.1
    D_safety: float = 0.9
    mu_factor: float = 0.95
    phi_safety: float = 1.25
    phi_min: float = 1e-6
    schur_margin: float = 1.1
    starts: int = 64
    candidates: int = 2048
    phi_samples: int = 1024
    ramp_nodes: int = 8
    check_t: int = 200
    check_r: int = 50
    check_starts: int = 16
    check_candidates: int = 256
    kernel_samples: int = 20_000
    eps_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.L > 1:
            raise ValueError("L must exceed 1")
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.xi is not None and self.xi < 1:
            raise ValueError("xi must be at least 1")
        if self.t0 < 0 or self.grid_dt <= 0 or self.horizon <= 0:
            raise ValueError("need t0 >= 0, grid_dt > 0, horizon > 0")

    c1 = 1.0

    def c2(self, n: int) -> float:
        return float(n)

    @property
    def budget(self) -> SearchBudget:
        return SearchBudget(starts=self.starts, candidates=self.candidates)

    @property
    def check_budget(self) -> SearchBudget:
        return SearchBudget(starts=self.check_starts, candidates=self.check_candidates)


def xi_threshold(beta: GrowthEnvelope, n: int, L: float, t0: float, R: float) -> float:
    """Smallest admissible error threshold sqrt(L) e^{2n} beta(t0, R+1)."""
    return float(np.sqrt(L) * np.exp(2.0 * n) * beta(t0, R + 1.0))


@dataclass
class LevelCertificate:
    k: int
    P: MatrixSchedule
    d: ScalarSchedule
    dbar: ScalarSchedule
    pR: ScalarSchedule
    pR1: ScalarSchedule
    M: float
    tau: float
    phi: ScalarSchedule | None = None
    mu: ScalarSchedule | None = None
    margin: float = float("nan")


@dataclass
class ObserverGainSchedule:
    """Gains of the level-n observer together with what is needed to re-verify them."""

    P: MatrixSchedule
    d: ScalarSchedule
    phi: ScalarSchedule
    xi: float
    t0: float
    R: float
    g: GainDecay
    L: float
    sigma: ScalarSchedule
    dbar_offset: float = 0.25
    levels: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.P.k

    @property
    def t_end(self) -> float:
        return float(self.P.t[-1])

    def gain_vector(self, t):
        """phi(t) P(t)^{-1} e_1 for an array of times, shape (len(t), n)."""
        t = np.atleast_1d(np.asarray(t, float))
        P = self.P(t)
        rhs = np.zeros(P.shape[:-1])
        rhs[..., 0] = 1.0
        col = np.linalg.solve(P, rhs[..., None])[..., 0]
        return self.phi(t)[:, None] * col


@dataclass
class SynthesisContext:
    sys: TriangularSystem
    beta: GrowthEnvelope
    cfg: SynthesisConfig
    g: GainDecay
    xi: float
    sigma: ScalarSchedule
    grid: np.ndarray

    @property
    def t0(self) -> float:
        return self.cfg.t0

    @property
    def t_end(self) -> float:
        return float(self.grid[-1])

    def b(self, t):
        t = np.asarray(t, float)
        return np.broadcast_to(self.beta(t, self.cfg.R + 0.0 * t), t.shape).astype(float)

    def D(self, i, t, r, stage, budget=None, safety=None):
        cfg = self.cfg
        return D_min(self.sys, self.beta, cfg.R, self.xi, i, t, np.minimum(r, self.xi),
                     seed=cfg.seed, safety=cfg.D_safety if safety is None else safety,
                     budget=budget or cfg.budget, seed_base=stage * 10_000_019)


def _ramp(t, t0, tau):
    """Smoothstep weight on [t0 + tau/2, t0 + tau] and its time derivative."""
    half = 0.5 * tau
    s, ds = smoothstep((np.asarray(t, float) - t0 - half) / half)
    return s, ds / half


def p_R1_completion(P_lower: MatrixSchedule, pR: ScalarSchedule, L: float, margin: float = 1.1) -> ScalarSchedule:
    """Top-left entry making the bordered matrix at least the identity.

    pR1 = (1 + L)/2 + margin * pR^2 * [(P_lower - I)^{-1}]_{11}; the Schur complement
    of the bordered matrix minus I is then (1 + L)/2 - 1 + (margin - 1) pR^2 w11 > 0.
    """
    t = pR.t
    Pl = P_lower(t)
    Pld = P_lower.derivative(t)
    k = Pl.shape[-1]
    shifted = Pl - np.eye(k)
    low = np.linalg.eigvalsh(shifted)[:, 0]
    if np.any(low <= 0):
        j = int(np.argmin(low))
        raise SynthesisError("completion", f"lower block not above the identity at t={t[j]!r} "
                             f"(min eig - 1 = {low[j]!r})", {"t": float(t[j])})
    W = np.linalg.inv(shifted)
    w11 = W[:, 0, 0]
    w11d = -(W @ Pld @ W)[:, 0, 0]
    p, pd = pR.values, pR.slopes
    vals = 0.5 * (1.0 + L) + margin * p * p * w11
    slopes = margin * (2.0 * p * pd * w11 + p * p * w11d)
    return ScalarSchedule(t, vals, slopes, positive=True)


def bordered(pR1: ScalarSchedule, pR: ScalarSchedule, P_lower: MatrixSchedule) -> MatrixSchedule:
    t = pR.t
    Pl = P_lower(t)
    Pld = P_lower.derivative(t)
    k = Pl.shape[-1]
    V = np.zeros((t.size, k + 1, k + 1))
    S = np.zeros_like(V)
    V[:, 0, 0] = pR1.values
    S[:, 0, 0] = pR1.slopes
    V[:, 0, 1] = V[:, 1, 0] = pR.values
    S[:, 0, 1] = S[:, 1, 0] = pR.slopes
    V[:, 1:, 1:] = 0.5 * (Pl + np.swapaxes(Pl, 1, 2))
    S[:, 1:, 1:] = 0.5 * (Pld + np.swapaxes(Pld, 1, 2))
    return MatrixSchedule(t, V, S)


def _max_on(sched_vals_fn, t0, grid, width=0.5, dense=2001):
    """Maximum of a curve over [t0, t0 + width] from its nodes and a dense sweep."""
    pts = merge_grids(grid[(grid >= t0) & (grid <= t0 + width)], np.linspace(t0, t0 + width, dense))
    return float(np.max(sched_vals_fn(pts)))


def refine_until_definite(build, grid, stage, probes=7, max_rounds=80):
    """Bisect grid intervals until the interpolated P(t) stays >= I between nodes.

    `build(grid)` returns a tuple whose first item is the MatrixSchedule P.
    Entrywise cubic interpolation can dip below the identity where an entry
    grows much faster than cubically, as at the very start of a ramp.
    """
    frac = np.arange(1, probes + 1) / (probes + 1)
    for _ in range(max_rounds):
        out = build(grid)
        P = out[0]
        left, width = grid[:-1], np.diff(grid)
        pts = (left[:, None] + frac[None, :] * width[:, None]).ravel()
        ev = np.linalg.eigvalsh(P(pts))[:, 0].reshape(left.size, probes)
        bad = np.any(ev < 1.0, axis=1)
        if not np.any(bad):
            return grid, out
        grid = merge_grids(grid, left[bad] + 0.5 * width[bad])
    raise SynthesisError(stage, "P(t) dips below the identity between nodes after refinement")


def base_case(sys: TriangularSystem, cfg: SynthesisConfig, env: SynthesisContext) -> LevelCertificate:
    """Level 2: P_2 = [[pR1, pR], [pR, L]] with rate d_2 ramping from -M_2 up to n."""
    n, L, t0 = sys.n, cfg.L, cfg.t0
    sig = env.sigma
    M = _max_on(sig, t0, env.grid)
    tau = min(1.0 / M, 1.0) if M > 0 else 1.0
    grid0 = merge_grids(env.grid, ramp_nodes(t0, tau, cfg.ramp_nodes))
    r = np.sqrt(env.g(grid0) / L)
    D0 = env.D(n - 1, grid0, r, stage=1)
    mu = minorant_mu(grid0, D0, cfg.mu_factor)

    def build(grid):
        th, thd = _ramp(grid, t0 - 0.5 * tau, tau)
        sv, sd = sig(grid), sig.derivative(grid)
        c, cd = L * (n + sv), L * sd
        mv, md = mu(grid), mu.derivative(grid)
        p = -th * c / mv
        pd = -(thd * c / mv + th * cd / mv - th * c * md / mv ** 2)
        pR = ScalarSchedule(grid, p, pd)
        lower = MatrixSchedule.constant(grid, [[L]])
        pR1 = p_R1_completion(lower, pR, L, cfg.schur_margin)
        return bordered(pR1, pR, lower), pR, pR1

    grid, (P, pR, pR1) = refine_until_definite(build, grid0, "base_case")
    s, ds = _ramp(grid, t0, tau)
    d = ScalarSchedule(grid, -M + (n + M) * s, (n + M) * ds)
    # D is known at the original nodes; elsewhere mu <= D is the conservative stand-in
    Dv = mu(grid)
    known = np.isin(grid, grid0)
    Dv[known] = D0[np.searchsorted(grid0, grid[known])]
    sv = sig(grid)
    p = pR.values
    margin = -L * d.values - (p * Dv + L * sv)
    scale = np.abs(L * d.values) + np.abs(p * Dv) + np.abs(L * sv)
    if np.any(margin < -1e-12 * scale):
        j = int(np.argmin(margin / scale))
        raise SynthesisError("base_case", f"target inequality fails at t={grid[j]!r} "
                             f"with margin {margin[j]!r}", {"t": float(grid[j]), "margin": float(margin[j])})
    return LevelCertificate(2, P, d, d.shifted(-0.5), pR, pR1, M, tau, mu=mu,
                            margin=float(np.min(margin / scale)))


# Injection gain ---------------------------------------------------------------

def _injection_sup(env, k, t, P, Pd, dbar, rng, samples, eps):
    """Sampled sup over (q, x, y, e) of N(e)/e_1^2 at one node, and the kernel coefficient check.

    For fixed q and frozen A the numerator is a quadratic a e1^2 + b e1 + c in e_1,
    so the best e_1 is a critical point of a + b/e1 + c/e1^2 or a boundary point of
    the feasible set (|e1| >= eps, |e| <= xi, e'Pe >= g). q is then moved to the worst
    case for the current e and the step repeated.
    """
    sys, xi, n = env.sys, env.xi, env.sys.n
    g = float(env.g(t))
    b = float(env.b(t))
    sig = float(env.sigma(t))
    batch = (samples,)
    x, y = sample_states(rng, n, b, batch)
    u = sample_directions(rng, k - 1, batch)
    mag = log_magnitudes(rng, 1e-7 * xi, xi, batch)
    half = samples // 2
    mag[:half] = xi * rng.random(half) ** (1.0 / (k - 1))
    eh = u * mag[:, None]
    e = np.concatenate([np.zeros((samples, 1)), eh], axis=1)
    Pb = np.broadcast_to(P, (samples, k, k))
    Pdb = np.broadcast_to(Pd, (samples, k, k))
    tt = np.full(samples, t)
    P11 = P[0, 0]
    beta1 = eh @ P[0, 1:]
    gam = quad(P[1:, 1:], eh)
    e1max = np.sqrt(np.maximum(xi * xi - mag * mag, 0.0))
    disc = beta1 ** 2 - P11 * (gam - g)
    sq = np.sqrt(np.maximum(disc, 0.0))
    roots = np.stack([(-beta1 + sq) / P11, (-beta1 - sq) / P11], axis=1)
    roots = np.where(disc[:, None] >= 0, roots, np.nan)
    kernel_feasible = (gam >= g)
    kernel_bad = 0
    best = np.full(samples, -np.inf)
    for it in range(3):
        q = worst_q(n, k, Pb, e, sig)
        A = assemble_A(sys, k, tt, q, x, e, y)
        PA = Pb @ A
        Mq = 0.5 * (PA + np.swapaxes(PA, 1, 2)) + 0.5 * Pdb + dbar * Pb
        a = Mq[:, 0, 0]
        bb = 2.0 * np.einsum("si,si->s", Mq[:, 0, 1:], eh)
        c = quad(Mq[:, 1:, 1:], eh)
        if it == 0:
            scale = quad(np.abs(PA[:, 1:, 1:]) + np.abs(Pdb[:, 1:, 1:]) + abs(dbar) * np.abs(Pb[:, 1:, 1:]), np.abs(eh))
            kernel_bad = int(np.sum(kernel_feasible & (c > 1e-10 * scale)))
        with np.errstate(divide="ignore", invalid="ignore"):
            crit = np.where(bb != 0, -2.0 * c / bb, np.nan)
        cand = np.concatenate([crit[:, None], np.stack([eps * np.ones(samples), -eps * np.ones(samples),
                                                        e1max, -e1max], axis=1), roots], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            feas = (np.abs(cand) > 0) & (np.abs(cand) >= eps * (1 - 1e-12)) & (cand ** 2 + (mag ** 2)[:, None] <= xi * xi * (1 + 1e-12))
            ePe = P11 * cand ** 2 + 2 * beta1[:, None] * cand + gam[:, None]
            feas &= ePe >= g * (1 - 1e-9)
            feas &= np.isfinite(cand)
            ratio = a[:, None] + bb[:, None] / cand + c[:, None] / cand ** 2
        ratio = np.where(feas & np.isfinite(ratio), ratio, -np.inf)
        j = np.argmax(ratio, axis=1)
        e1 = cand[np.arange(samples), j]
        ok = np.isfinite(ratio[np.arange(samples), j])
        e1 = np.where(ok, e1, np.nan)
        e = np.concatenate([e1[:, None], eh], axis=1)
    q = worst_q(n, k, Pb, e, sig)
    ePAe, ePde, ePe, _ = lyap_terms(sys, k, tt, Pb, Pdb, q, x, e, y)
    feasible = np.isfinite(e[:, 0]) & (np.abs(e[:, 0]) > 0) & (np.abs(e[:, 0]) >= eps * (1 - 1e-12)) & (ePe >= g * (1 - 1e-9)) & \
        (np.sum(e * e, axis=1) <= xi * xi * (1 + 1e-12))
    num = ePAe + 0.5 * ePde + dbar * ePe
    val = np.where(feasible, num / e[:, 0] ** 2, -np.inf)
    best = float(np.max(val)) if np.any(feasible) else -np.inf
    return best, kernel_bad


def injection_gain(cert: LevelCertificate, sys: TriangularSystem, cfg: SynthesisConfig,
                    env: SynthesisContext, dbar_offset: float = 0.5) -> ScalarSchedule:
    """Positive C1 gain phi_k with N(e) <= phi_k e_1^2 on the sampled feasible set."""
    k = cert.k
    t = cert.P.t
    eps = cfg.eps_floor * np.sqrt(float(env.g(env.t_end)))
    sups = np.empty(t.size)
    bad_nodes = []
    for idx, tn in enumerate(t):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 20_000_003 + 7 * k, idx]))
        dbar = float(cert.d.values[idx]) - dbar_offset
        s, bad = _injection_sup(env, k, tn, cert.P.values[idx], cert.P.slopes[idx], dbar, rng,
                            cfg.phi_samples, eps)
        if bad:
            bad_nodes.append((float(tn), bad))
        sups[idx] = s
    if bad_nodes:
        tn, cnt = bad_nodes[0]
        raise SynthesisError("injection_gain", f"kernel margin insufficient at level {k}: "
                             f"{cnt} kernel samples with non-negative numerator at t={tn!r}",
                             {"t": tn, "nodes": len(bad_nodes)})
    floor = np.maximum(sups, cfg.phi_min)
    return window_majorant(t, floor, cfg.phi_safety)


def induction_step(cert: LevelCertificate, sys: TriangularSystem, cfg: SynthesisConfig,
                   env: SynthesisContext) -> LevelCertificate:
    """Border P_k into P_{k+1} using the gain phi_k of level k."""
    if cert.phi is None:
        raise SynthesisError("induction_step", f"level {cert.k} has no gain phi")
    n, k, t0, xi = sys.n, cert.k, cfg.t0, env.xi
    i = n - k
    phi, dbar = cert.phi, cert.dbar

    def m_curve(tq):
        return np.abs(dbar(tq)) + 0.25 + xi * xi * phi(tq) / env.g(tq)

    M = _max_on(m_curve, t0, cert.P.t)
    tau = min(1.0 / (4.0 * M), 0.5)
    grid0 = merge_grids(cert.P.t, ramp_nodes(t0, tau, cfg.ramp_nodes))
    zeta = 0.5 * np.sqrt(env.g(grid0) / phi(grid0))
    D0 = env.D(i, grid0, zeta, stage=10 + k)
    mu = minorant_mu(grid0, D0, cfg.mu_factor)

    def build(grid):
        phv, phd = phi(grid), phi.derivative(grid)
        th, thd = _ramp(grid, t0 - 0.5 * tau, tau)
        mv, md = mu(grid), mu.derivative(grid)
        p = -th * phv / mv
        pd = -(thd * phv / mv + th * phd / mv - th * phv * md / mv ** 2)
        pR = ScalarSchedule(grid, p, pd)
        P_lower = cert.P.refine(grid)
        pR1 = p_R1_completion(P_lower, pR, cfg.L, cfg.schur_margin)
        return bordered(pR1, pR, P_lower), pR, pR1

    grid, (P, pR, pR1) = refine_until_definite(build, grid0, f"induction_step {k}->{k + 1}")
    s, ds = _ramp(grid, t0, tau)
    target, target_d = dbar(grid) - 0.25, dbar.derivative(grid)
    d = ScalarSchedule(grid, (1 - s) * (-M) + s * target, ds * (target + M) + s * target_d)
    new = LevelCertificate(k + 1, P, d, d.shifted(-0.5), pR, pR1, M, tau, mu=mu)
    new.margin = check_reduction_grid(new, cert, sys, cfg, env)
    return new


def check_reduction_grid(new: LevelCertificate, old: LevelCertificate, sys, cfg, env) -> float:
    """Verify r^2 (pR D(t, r) + phi_k) <= (dbar_k - d_{k+1}) g on a (t, r) grid; returns the worst margin."""
    t0, xi = cfg.t0, env.xi
    i = sys.n - old.k
    ts = merge_grids(np.linspace(t0, env.t_end, cfg.check_t), ramp_nodes(t0, new.tau, 4))
    rs = xi * np.logspace(-12, 0, cfg.check_r)
    T, Rr = np.meshgrid(ts, rs, indexing="ij")
    Dv = env.D(i, T.ravel(), Rr.ravel(), stage=30 + old.k, budget=cfg.check_budget).reshape(T.shape)
    p = new.pR(ts)[:, None]
    phi = old.phi(ts)[:, None]
    gap = (old.dbar(ts) - new.d(ts))[:, None]
    g = env.g(ts)[:, None]
    lhs = Rr ** 2 * (p * Dv + phi)
    rhs = gap * g
    margin = rhs - lhs
    scale = Rr ** 2 * (np.abs(p * Dv) + phi) + np.abs(rhs)
    rel = margin / scale
    if np.any(rel < -1e-12):
        a, b_ = np.unravel_index(np.argmin(rel), rel.shape)
        raise SynthesisError("induction_step", f"(t, r) check fails at t={ts[a]!r}, r={rs[b_]!r}: "
                             f"margin {margin[a, b_]!r}", {"t": float(ts[a]), "r": float(rs[b_])})
    return float(np.min(rel))


# Checks on the final schedule ---------------------------------------------

def d_integral_min(d: ScalarSchedule, t0: float, width: float = 1.0) -> float:
    """Smallest trapezoid integral of d between two nodes in [t0, t0 + width]."""
    t = d.t[(d.t >= t0) & (d.t <= t0 + width)]
    v = d.values[(d.t >= t0) & (d.t <= t0 + width)]
    if t.size < 2:
        return 0.0
    C = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
    run_max = np.maximum.accumulate(C)
    return float(np.min(C - run_max)) if C.size else 0.0


def level_checks(cert: LevelCertificate, n: int, t0: float, L: float) -> dict:
    """Conditions every level must meet at the nodes: P >= I, |P(t0)| <= L, bounds on d."""
    k = cert.k
    late = cert.d.t >= t0 + 1.0
    P0 = cert.P(t0)
    return {
        "min_eig": float(np.min(cert.P.min_eig())),
        "norm_at_t0": float(np.linalg.norm(P0, 2)),
        "d_late_min": float(np.min(cert.d.values[late])) if np.any(late) else float("inf"),
        "d_late_bound": float(n - k + 1),
        "d_integral_min": d_integral_min(cert.d, t0),
        "d_integral_bound": float(-k),
    }


def _assert_level(cert, n, t0, L):
    c = level_checks(cert, n, t0, L)
    stage = f"level {cert.k}"
    if c["min_eig"] < 1.0:
        raise SynthesisError(stage, f"P below the identity (min eig {c['min_eig']!r})", c)
    if c["norm_at_t0"] > L * (1 + 1e-12):
        raise SynthesisError(stage, f"|P(t0)| = {c['norm_at_t0']!r} exceeds L", c)
    if not c["d_late_min"] > c["d_late_bound"]:
        raise SynthesisError(stage, f"d drops to {c['d_late_min']!r} after t0+1", c)
    if not c["d_integral_min"] > c["d_integral_bound"]:
        raise SynthesisError(stage, f"integral of d reaches {c['d_integral_min']!r}", c)
    return c


def synthesize(sys: TriangularSystem, beta: GrowthEnvelope, cfg: SynthesisConfig,
               log=None) -> ObserverGainSchedule:
    """Run every level and return the observer gain schedule."""
    if not sys.increasing:
        raise SynthesisError("precondition", "system must be normalized to increasing form first")
    say = log or (lambda msg: None)
    n = sys.n
    xi = cfg.xi if cfg.xi is not None else xi_threshold(beta, n, cfg.L, cfg.t0, cfg.R)
    g = GainDecay.exponential(cfg.lam, cfg.t0, cfg.g0)
    grid = uniform_grid(cfg.t0, cfg.horizon, cfg.grid_dt)
    sigma = sigma_majorant(sys, beta, cfg.R, xi, grid, seed=cfg.seed, safety=cfg.sigma_safety,
                           budget=cfg.budget)
    say(f"sigma in [{sigma.values[0]:.6g}, {sigma.values[-1]:.6g}]")
    env = SynthesisContext(sys, beta, cfg, g, xi, sigma, grid)
    cert = base_case(sys, cfg, env)
    _assert_level(cert, n, cfg.t0, cfg.L)
    say(f"level 2: M={cert.M:.6g} tau={cert.tau:.6g}")
    levels = [cert]
    while cert.k < n:
        cert.phi = injection_gain(cert, sys, cfg, env, dbar_offset=0.5)
        say(f"level {cert.k}: phi in [{cert.phi.values.min():.6g}, {cert.phi.values.max():.6g}]")
        cert = induction_step(cert, sys, cfg, env)
        _assert_level(cert, n, cfg.t0, cfg.L)
        say(f"level {cert.k}: M={cert.M:.6g} tau={cert.tau:.6g}")
        levels.append(cert)
    cert.phi = injection_gain(cert, sys, cfg, env, dbar_offset=0.25)
    say(f"level {n}: phi in [{cert.phi.values.min():.6g}, {cert.phi.values.max():.6g}]")
    sched = ObserverGainSchedule(cert.P, cert.d, cert.phi, xi, cfg.t0, cfg.R, g, cfg.L,
                                 sigma.refine(cert.P.t), 0.25, levels)
    final = level_checks(cert, n, cfg.t0, cfg.L)
    if final["d_late_min"] <= cfg.c1:
        raise SynthesisError("synthesize", f"d drops to {final['d_late_min']!r} <= c1 after t0+1", final)
    if cfg.kernel_samples:
        from .certify import kernel_check
        rep = kernel_check(sched, sys, beta, samples=cfg.kernel_samples, seed=cfg.seed + 1)
        if rep.violations:
            raise SynthesisError("synthesize", f"kernel inequality fails at {rep.violations} samples",
                                 rep.as_dict())
    return sched


# Schedule files --------------------------------------------------------------

def save_schedule(sched: ObserverGainSchedule, directory, extra: dict | None = None) -> Path:
    """Write manifest.json plus P.csv, d.csv, phi.csv and sigma.csv into `directory`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    t = sched.P.t
    manifest = {
        "format": "observer-gain-schedule/1",
        "n": sched.n,
        "t0": sched.t0,
        "T": float(t[-1] - t[0]),
        "h": float(np.min(np.diff(t))) if t.size > 1 else 0.0,
        "nodes": int(t.size),
        "xi": sched.xi,
        "R": sched.R,
        "L": sched.L,
        "dbar_offset": sched.dbar_offset,
        "g": sched.g.params,
        "files": {"P": "P.csv", "d": "d.csv", "phi": "phi.csv", "sigma": "sigma.csv"},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "P.csv").write_text(sched.P.to_csv())
    (out / "d.csv").write_text(sched.d.to_csv())
    (out / "phi.csv").write_text(sched.phi.to_csv())
    (out / "sigma.csv").write_text(sched.sigma.to_csv())
    return out


def load_schedule(directory) -> ObserverGainSchedule:
    src = Path(directory)
    man = json.loads((src / "manifest.json").read_text())
    files = man["files"]
    P = MatrixSchedule.from_csv((src / files["P"]).read_text())
    d = ScalarSchedule.from_csv((src / files["d"]).read_text())
    phi = ScalarSchedule.from_csv((src / files["phi"]).read_text(), positive=True)
    sigma = ScalarSchedule.from_csv((src / files["sigma"]).read_text())
    if P.k != man["n"]:
        raise ValueError("manifest dimension disagrees with P.csv")
    return ObserverGainSchedule(P, d, phi, float(man["xi"]), float(man["t0"]), float(man["R"]),
                                GainDecay.from_params(man["g"]), float(man["L"]), sigma,
                                float(man["dbar_offset"]))


def with_overrides(cfg: SynthesisConfig, **kw) -> SynthesisConfig:
    return replace(cfg, **kw)
