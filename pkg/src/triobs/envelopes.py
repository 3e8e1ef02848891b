"""Numerical envelopes of the divided differences.

Three quantities are estimated over sample sets of the form

    |y| <= b,   |(x_2, .., x_{m+1})| <= b,   |(e_2, .., e_{d+1})| <= xi,   |e_{d+1}| >= r,

with b = beta(t, R):

* the majorant sigma(t) of sum_{i>=2, 2<=j<=i} sup |delta_ij|,
* the constrained minimum D_i(t, r) of the superdiagonal quotient delta_{i,i+1},
* positive C1 minorants mu(t) of sampled D values.

Sups and mins are found by multistart search: a cloud of random feasible
candidates, the best `starts` of them refined by per-coordinate golden-section
sweeps. Many problems (grid nodes, (t, r) pairs) are solved in one vectorized
batch; every problem draws its candidates from its own generator seeded by
(master seed, problem index), so results do not depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divdiff import delta
from .errors import EnvelopeError
from .model import GrowthEnvelope, TriangularSystem
from .schedule import ScalarSchedule, monotone_slopes

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SampleBox:
    """Bounds of one sample set: y and x-tail within beta, errors within xi, last error at least r."""

    t: float
    beta: float
    xi: float
    r: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and np.isfinite(self.xi) and np.isfinite(self.r)):
            raise ValueError("sample box bounds must be finite")
        if self.beta < 0 or self.xi <= 0 or not 0 <= self.r <= self.xi:
            raise ValueError("sample box needs beta >= 0 and 0 <= r <= xi")


@dataclass
class SearchBudget:
    starts: int = 64
    candidates: int = 2048
    golden_iters: int = 40
    sweeps: int = 2


def _seed_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _ball(rng, dim, count, radius):
    """Points in a ball: half uniform, a quarter on the sphere, a quarter log-spaced radii."""
    if dim == 0:
        return np.zeros((0, count))
    u = rng.normal(size=(dim, count))
    u /= np.maximum(np.linalg.norm(u, axis=0), 1e-300)
    w = rng.random(count)
    rad = radius * w ** (1.0 / dim)
    q = count // 4
    rad[:q] = radius
    rad[q:2 * q] = radius * np.exp(np.log(1e-6) * w[q:2 * q])
    return u * rad


def _candidates(rng, count, beta, xi, r, m, d):
    """Random feasible points (y, xs, es) stacked as a (1+m+d, count) array."""
    y = beta * rng.uniform(-1.0, 1.0, count)
    xs = _ball(rng, m, count, beta)
    if r > 0:
        w = rng.random(count)
        mag = r + (xi - r) * w
        q = count // 4
        mag[:q] = r * (xi / r) ** w[:q]
        mag[q:q + q // 4] = r
        last = mag * np.where(rng.random(count) < 0.5, -1.0, 1.0)
        rest = _ball(rng, d - 1, count, 1.0) * np.sqrt(np.maximum(xi ** 2 - last ** 2, 0.0))
        es = np.vstack([rest, last[None, :]])
    else:
        es = _ball(rng, d, count, xi)
    return np.vstack([y[None, :], xs, es])


def multistart(objective, t, beta, xi, r, m, d, maximize, seed=0, budget=SearchBudget(),
               seed_offsets=None):
    """Optimize `objective(t, y, xs, es)` over a batch of sample sets.

    t, beta, r are arrays of shape (P,); xi is a scalar. Returns (best values (P,),
    best points (1+m+d, P)). `seed_offsets` gives the per-problem generator index.
    """
    t = np.asarray(t, float)
    P = t.size
    beta = np.broadcast_to(np.asarray(beta, float), (P,))
    r = np.broadcast_to(np.asarray(r, float), (P,))
    if seed_offsets is None:
        seed_offsets = np.arange(P)
    D = 1 + m + d
    S = min(budget.starts, budget.candidates)
    sign = 1.0 if maximize else -1.0

    def score(X, tt):
        v = objective(tt, X[0], X[1:1 + m], X[1 + m:])
        return sign * np.asarray(v, float)

    starts = np.empty((D, P, S))
    for p in range(P):
        rng = _seed_rng(seed, seed_offsets[p])
        C = _candidates(rng, budget.candidates, beta[p], xi, r[p], m, d)
        v = score(C, t[p])
        if not np.all(np.isfinite(v)):
            raise EnvelopeError("envelope", f"non-finite objective at t={t[p]!r}", {"t": float(t[p])})
        order = np.argsort(-v, kind="stable")[:S]
        starts[:, p, :] = C[:, order]
    tt = np.broadcast_to(t[:, None], (P, S))
    X = starts
    best = score(X, tt)
    groups = [(0, 1, "y")] + ([(1, 1 + m, "x")] if m else []) + [(1 + m, D, "e")]
    rr = r[:, None]
    bb = beta[:, None]

    def feasible(Z):
        tol = 1e-12
        ok = np.abs(Z[0]) <= bb * (1 + tol)
        if m:
            ok &= np.sqrt(np.sum(Z[1:1 + m] ** 2, axis=0)) <= bb * (1 + tol)
        ok &= np.sqrt(np.sum(Z[1 + m:] ** 2, axis=0)) <= xi * (1 + tol)
        ok &= np.abs(Z[D - 1]) >= rr
        return ok

    for _ in range(budget.sweeps):
        X_prev = X
        for lo_g, hi_g, kind in groups:
            for c in range(lo_g, hi_g):
                if kind == "y":
                    a = np.broadcast_to(beta[:, None], (P, S)).copy()
                else:
                    others = np.sum(X[lo_g:hi_g] ** 2, axis=0) - X[c] ** 2
                    rad = beta[:, None] if kind == "x" else xi
                    a = np.sqrt(np.maximum(rad ** 2 - others, 0.0))
                floor = np.broadcast_to(r[:, None], (P, S)) if (kind == "e" and c == D - 1) else None
                X, best = _refine_coordinate(score, X, best, tt, c, a, floor, budget.golden_iters)
        X, best = _extrapolate(score, feasible, X, best, X - X_prev, tt, budget.golden_iters)
    return sign * best.max(axis=1), _pick(X, best)


def _extrapolate(score, feasible, X, best, u, tt, iters):
    """Line search along the net displacement of the last sweep (Powell-style step)."""

    def at(a):
        Z = X + a * u
        return np.where(feasible(Z), score(Z, tt), -np.inf)

    best_a = np.zeros(best.shape)
    best_val = best
    for a in (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0):
        s = at(a)
        better = s > best_val
        best_val = np.where(better, s, best_val)
        best_a = np.where(better, a, best_a)
    lo = 0.5 * best_a
    hi = 2.0 * best_a
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = at(x1), at(x2)
    for _ in range(iters // 2):
        right = f1 < f2
        lo = np.where(right, x1, lo)
        hi = np.where(right, hi, x2)
        nx1 = np.where(right, x2, hi - GOLDEN * (hi - lo))
        nx2 = np.where(right, lo + GOLDEN * (hi - lo), x1)
        nf = at(np.where(right, nx2, nx1))
        f1, f2 = np.where(right, f2, nf), np.where(right, nf, f1)
        x1, x2 = nx1, nx2
    for a, s in ((x1, f1), (x2, f2)):
        better = s > best_val
        best_val = np.where(better, s, best_val)
        best_a = np.where(better, a, best_a)
    Xn = X + best_a * u
    return Xn, np.where(best_a > 0, score(Xn, tt), best)


def _pick(X, best):
    idx = np.argmax(best, axis=1)
    return X[:, np.arange(X.shape[1]), idx]


def _refine_coordinate(score, X, best, tt, c, a, floor, iters):
    """Golden-section search along coordinate c over its feasible interval(s)."""
    if floor is None:
        intervals = [(-a, a)]
    else:
        ok = a >= floor
        lo_pos = np.where(ok, floor, 0.0)
        hi_pos = np.where(ok, a, 0.0)
        intervals = [(-hi_pos, -lo_pos), (lo_pos, hi_pos)]
    Xc = X.copy()

    def at(v):
        Xc[c] = v
        return score(Xc, tt)

    cur = X[c].copy()
    best_v, best_val = cur, best
    for lo, hi in intervals:
        for v in (lo, hi):
            s = at(v)
            better = s > best_val
            best_val = np.where(better, s, best_val)
            best_v = np.where(better, v, best_v)
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1, f2 = at(x1), at(x2)
        lo, hi = lo.copy(), hi.copy()
        for _ in range(iters):
            right = f1 < f2
            lo = np.where(right, x1, lo)
            hi = np.where(right, hi, x2)
            nx1 = np.where(right, x2, hi - GOLDEN * (hi - lo))
            nx2 = np.where(right, lo + GOLDEN * (hi - lo), x1)
            nf = at(np.where(right, nx2, nx1))
            f1, f2 = np.where(right, f2, nf), np.where(right, nf, f1)
            x1, x2 = nx1, nx2
        for v, s in ((x1, f1), (x2, f2)):
            better = s > best_val
            best_val = np.where(better, s, best_val)
            best_v = np.where(better, v, best_v)
    Xn = X.copy()
    Xn[c] = best_v
    if floor is not None:
        bad = (np.abs(Xn[c]) < floor) & (np.abs(X[c]) >= floor)
        Xn[c] = np.where(bad, X[c], Xn[c])
    return Xn, score(Xn, tt)


def _beta_nodes(beta: GrowthEnvelope, t, R):
    return np.broadcast_to(beta(np.asarray(t, float), R + 0.0 * np.asarray(t, float)), np.shape(t)).astype(float)


def sup_abs_delta(sys, beta, R, xi, i, j, t, seed=0, budget=SearchBudget(), seed_base=0):
    """Estimated sup |delta_ij| over the sigma sample set at each time in t."""
    t = np.atleast_1d(np.asarray(t, float))
    m = sys.tail_len(i)

    def obj(tt, y, xs, es):
        return np.abs(delta(sys, i, j, tt, y, xs, es))

    b = _beta_nodes(beta, t, R)
    try:
        vals, _ = multistart(obj, t, b, xi, np.zeros_like(t), m, j - 1, True, seed, budget,
                             seed_offsets=seed_base + np.arange(t.size))
    except EnvelopeError as exc:
        raise EnvelopeError("sigma", f"overflow in delta({i},{j}): {exc}", {"i": i, "j": j, **exc.detail}) from None
    bad = ~np.isfinite(vals)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise EnvelopeError("sigma", f"non-finite sup of delta({i},{j}) at t={t[k]!r}", {"i": i, "j": j, "t": float(t[k])})
    return vals


def sigma_pairs(n: int):
    return [(i, j) for i in range(2, n + 1) for j in range(2, i + 1)]


def sigma_majorant(sys: TriangularSystem, beta: GrowthEnvelope, R: float, xi: float, grid,
                   seed: int = 0, safety: float = 1.1, budget: SearchBudget = SearchBudget()) -> ScalarSchedule:
    """Nondecreasing C1 majorant of the summed sups of |delta_ij|, i >= 2, j <= i."""
    if xi < 1 or R <= 0:
        raise ValueError("sigma_majorant needs xi >= 1 and R > 0")
    grid = np.asarray(grid, float)
    total = np.zeros(grid.size)
    for k, (i, j) in enumerate(sigma_pairs(sys.n)):
        total += sup_abs_delta(sys, beta, R, xi, i, j, grid, seed, budget, seed_base=k * 1_000_003)
    vals = np.maximum.accumulate(safety * total)
    return ScalarSchedule(grid, vals, monotone_slopes(grid, vals), nondecreasing=True,
                          positive=bool(np.all(vals > 0)))


def D_min(sys: TriangularSystem, beta: GrowthEnvelope, R: float, xi: float, i: int, t, r,
          seed: int = 0, safety: float = 0.9, budget: SearchBudget = SearchBudget(), seed_base: int = 0):
    """Minimum of delta_{i,i+1} over the sample set with |e_{i+1}| >= r, times `safety`.

    t and r broadcast against each other; the result has their common shape.
    """
    if not 1 <= i <= sys.n - 1:
        raise ValueError(f"superdiagonal row i={i} outside 1..{sys.n - 1}")
    t, r = np.broadcast_arrays(np.asarray(t, float), np.asarray(r, float))
    shape = t.shape
    t, r = t.ravel(), r.ravel()
    if np.any(r <= 0) or np.any(r > xi * (1 + 1e-12)):
        raise ValueError("D_min needs 0 < r <= xi")
    r = np.minimum(r, xi)

    def obj(tt, y, xs, es):
        return delta(sys, i, i + 1, tt, y, xs, es)

    b = _beta_nodes(beta, t, R)
    vals, _ = multistart(obj, t, b, xi, r, i, i, False, seed, budget, seed_offsets=seed_base + np.arange(t.size))
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        k = int(np.flatnonzero(~(vals > 0))[0])
        raise EnvelopeError("D_min", f"H1 margin violated: min delta({i},{i + 1}) = {vals[k]!r} "
                            f"at t={t[k]!r}, r={r[k]!r}", {"t": float(t[k]), "r": float(r[k])})
    return (safety * vals).reshape(shape)


def minorant_mu(t, samples, factor: float = 0.95) -> ScalarSchedule:
    """Positive C1 schedule below `factor` times the sampled values on every grid interval.

    Each node takes the smallest sample among itself and its neighbours, so the
    monotone interpolant on an interval stays below both endpoint samples.
    """
    t = np.asarray(t, float)
    v = np.asarray(samples, float)
    if t.shape != v.shape:
        raise ValueError("minorant_mu needs one sample per node")
    if np.any(~(v > 0)):
        raise EnvelopeError("minorant", "samples must be positive")
    low = v.copy()
    low[1:] = np.minimum(low[1:], v[:-1])
    low[:-1] = np.minimum(low[:-1], v[1:])
    vals = factor * low
    return ScalarSchedule(t, vals, monotone_slopes(t, vals), positive=True)


def window_majorant(t, samples, factor: float) -> ScalarSchedule:
    """Positive C1 schedule above `factor` times the samples at each node and its neighbours."""
    t = np.asarray(t, float)
    v = np.asarray(samples, float)
    high = v.copy()
    high[1:] = np.maximum(high[1:], v[:-1])
    high[:-1] = np.maximum(high[:-1], v[1:])
    vals = factor * high
    return ScalarSchedule(t, vals, monotone_slopes(t, vals), positive=bool(np.all(vals > 0)))


def random_box_points(rng, count, beta, xi, m, d, r=None):
    """Uniform-ish feasible points for hold-out checks: returns y (N,), xs (m,N), es (d,N)."""
    beta = np.broadcast_to(np.asarray(beta, float), (count,))
    y = beta * rng.uniform(-1.0, 1.0, count)
    u = rng.normal(size=(m, count))
    u /= np.maximum(np.linalg.norm(u, axis=0), 1e-300)
    xs = u * beta * rng.random(count) ** (1.0 / max(m, 1))
    ue = rng.normal(size=(d, count))
    ue /= np.maximum(np.linalg.norm(ue, axis=0), 1e-300)
    mag = xi * np.where(rng.random(count) < 0.5, rng.random(count) ** (1.0 / d),
                        np.exp(np.log(1e-6) * rng.random(count)))
    es = ue * mag
    if r is not None:
        r = np.broadcast_to(np.asarray(r, float), (count,))
        last = r + (xi - r) * rng.random(count)
        last *= np.where(rng.random(count) < 0.5, -1.0, 1.0)
        rest = es[:-1]
        nr = np.linalg.norm(rest, axis=0)
        room = np.sqrt(np.maximum(xi ** 2 - last ** 2, 0.0))
        scale = np.where(nr > room, room / np.maximum(nr, 1e-300), 1.0)
        es = np.vstack([rest * scale, last[None, :]])
    return y, xs, es


def holdout_sigma(sys, beta, R, xi, sigma: ScalarSchedule, samples=1000, seed=0):
    """Count fresh points where the summed |delta_ij| exceeds sigma(t)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    t = rng.uniform(sigma.t[0], sigma.t[-1], samples)
    b = _beta_nodes(beta, t, R)
    total = np.zeros(samples)
    for i, j in sigma_pairs(sys.n):
        y, xs, es = random_box_points(rng, samples, b, xi, sys.tail_len(i), j - 1)
        total += np.abs(delta(sys, i, j, t, y, xs, es))
    bound = sigma(t)
    bad = total > bound
    return {"samples": samples, "violations": int(bad.sum()),
            "worst_ratio": float(np.max(total / bound))}


def holdout_mu(sys, beta, R, xi, i, mu: ScalarSchedule, r_of_t, samples=1000, seed=0):
    """Count fresh points in the constrained set where delta_{i,i+1} falls below mu(t)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
    t = rng.uniform(mu.t[0], mu.t[-1], samples)
    b = _beta_nodes(beta, t, R)
    r = np.minimum(np.asarray(r_of_t(t), float), xi)
    y, xs, es = random_box_points(rng, samples, b, xi, i, i, r=r)
    v = delta(sys, i, i + 1, t, y, xs, es)
    m = mu(t)
    bad = v < m
    return {"samples": samples, "violations": int(bad.sum()), "worst_ratio": float(np.max(m / v))}
