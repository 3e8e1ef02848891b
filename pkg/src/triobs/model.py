"""Triangular systems, growth envelopes and gain-decay functions.

Evaluators follow one convention throughout the package: ``f(t, x)`` where
``x`` is a sequence whose first axis runs over the state prefix
``x1, ..., x_m``. Any trailing axes are batch axes, so an evaluator written
with numpy operations (``x[0] - x[0] ** 3 + ...``) works on one point and on
a whole batch of points alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Evaluator = Callable[[object, np.ndarray], object]


class EvaluationError(ArithmeticError):
    """An evaluator returned a non-finite value."""


@dataclass(frozen=True)
class TriangularSystem:
    """x_i' = f_i(t, x_1..x_{i+1}) for i < n and x_n' = f_n(t, x_1..x_n), y = x_1.

    `mono[i-1]` is +1 when f_i increases strictly in its last argument and -1
    when it decreases strictly (i = 1..n-1). `signs` records the sign map
    applied by `normalize_increasing`, if any.
    """

    n: int
    f: tuple
    mono: tuple
    name: str = ""
    domain_hint: tuple | None = None
    signs: tuple | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("state dimension must be at least 2")
        if len(self.f) != self.n:
            raise ValueError(f"expected {self.n} evaluators, got {len(self.f)}")
        if len(self.mono) != self.n - 1 or any(m not in (1, -1) for m in self.mono):
            raise ValueError("mono must hold n-1 flags in {+1, -1}")

    def arity(self, i: int) -> int:
        """Number of state arguments of f_i (1-based i)."""
        return min(i + 1, self.n)

    def tail_len(self, i: int) -> int:
        """Number of arguments of f_i after x_1."""
        return self.arity(i) - 1

    @property
    def increasing(self) -> bool:
        return all(m == 1 for m in self.mono)

    def eval_f(self, i: int, t, prefix) -> np.ndarray:
        return np.asarray(self.f[i - 1](t, prefix), float)


def eval_rhs(sys: TriangularSystem, t, x) -> np.ndarray:
    """Right-hand side of the plant; batch axes after the first are allowed."""
    x = np.asarray(x, float)
    if x.shape[0] != sys.n:
        raise ValueError(f"state has length {x.shape[0]}, system has n={sys.n}")
    out = np.empty(x.shape)
    for i in range(1, sys.n + 1):
        v = sys.eval_f(i, t, x[: sys.arity(i)])
        if not np.all(np.isfinite(v)):
            raise EvaluationError(f"non-finite value from f{i} at t={t!r}")
        out[i - 1] = v
    return out


@dataclass(frozen=True)
class GrowthEnvelope:
    """Forward-completeness bound |x(t)| <= beta(t, |x0|)."""

    beta: Callable
    description: str = ""

    def __call__(self, t, s):
        return np.asarray(self.beta(t, s), float)

    def check_monotone(self, t_grid, s_grid) -> bool:
        """Nondecreasing in t and in s, and nonnegative, on the given grids."""
        tt, ss = np.meshgrid(np.asarray(t_grid, float), np.asarray(s_grid, float), indexing="ij")
        b = np.broadcast_to(self(tt, ss), tt.shape)
        return bool(np.all(b >= 0) and np.all(np.diff(b, axis=0) >= 0) and np.all(np.diff(b, axis=1) >= 0))


@dataclass(frozen=True)
class GainDecay:
    """Threshold g(t) in (0, 1) with exact derivative, decaying to zero."""

    g: Callable
    gdot: Callable
    description: str = ""
    params: dict | None = None

    @classmethod
    def exponential(cls, lam: float = 0.5, t0: float = 0.0, g0: float = 0.5) -> "GainDecay":
        if not 0 < lam <= 1:
            raise ValueError("decay rate must lie in (0, 1]")
        if not 0 < g0 < 1:
            raise ValueError("g(t0) must lie in (0, 1)")

        def g(t):
            return g0 * np.exp(-lam * (np.asarray(t, float) - t0))

        def gdot(t):
            return -lam * g(t)

        return cls(g, gdot, f"{g0}*exp(-{lam}*(t-{t0}))",
                   {"kind": "exponential", "lam": float(lam), "t0": float(t0), "g0": float(g0)})

    @classmethod
    def from_params(cls, params: dict) -> "GainDecay":
        if params.get("kind") != "exponential":
            raise ValueError(f"unsupported gain decay {params!r}")
        return cls.exponential(params["lam"], params["t0"], params["g0"])

    def __call__(self, t):
        return np.asarray(self.g(t), float)

    def check(self, t0: float, horizon: float, points: int = 10_000) -> dict:
        """Range, derivative bound and strict decrease on a uniform grid."""
        t = np.linspace(t0, t0 + horizon, points)
        g = self(t)
        gd = np.asarray(self.gdot(t), float)
        return {
            "in_unit_interval": bool(np.all((g > 0) & (g < 1))),
            "derivative_bound": bool(np.all(gd >= -g)),
            "decreasing": bool(np.all(np.diff(g) < 0)),
        }


@dataclass
class MonotoneReport:
    samples: int
    skipped: int = 0
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def certify_monotone(sys: TriangularSystem, box, samples: int, seed: int = 0,
                     t_range=(0.0, 10.0)) -> MonotoneReport:
    """Sample the strict monotonicity of each f_i (i < n) in its last argument.

    `box` is either a sequence of (lo, hi) pairs, one per state, or a pair
    (lo, hi) applied to every state. Points where the increment e is zero are
    skipped since the quotient is undefined there.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    box = np.asarray(box, float)
    if box.ndim == 1:
        box = np.tile(box, (sys.n, 1))
    lo, hi = box[:, 0], box[:, 1]
    rng = np.random.default_rng(seed)
    report = MonotoneReport(samples=samples)
    rows = rng.integers(1, sys.n, size=samples)
    t = rng.uniform(*t_range, size=samples)
    z = lo[:, None] + (hi - lo)[:, None] * rng.random((sys.n, samples))
    e = (hi - lo)[:, None] * rng.uniform(-1.0, 1.0, size=(sys.n, samples))
    for i in range(1, sys.n):
        sel = np.flatnonzero(rows == i)
        if sel.size == 0:
            continue
        m = sys.arity(i)
        last = e[m - 1, sel]
        zp = z[:m, sel]
        zm = zp.copy()
        zm[m - 1] -= last
        with np.errstate(divide="ignore", invalid="ignore"):
            q = sys.mono[i - 1] * (sys.eval_f(i, t[sel], zp) - sys.eval_f(i, t[sel], zm)) / last
        skip = last == 0
        report.skipped += int(skip.sum())
        for k in np.flatnonzero(~skip & ~(q > 0)):
            report.violations.append({"i": int(i), "t": float(t[sel[k]]),
                                      "x": zp[:, k].tolist(), "e": float(last[k])})
    report.violations.sort(key=lambda v: (v["i"], v["t"]))
    return report


def apply_sign_map(sys: TriangularSystem, signs: Sequence[int]) -> TriangularSystem:
    """Change coordinates by x_i -> s_i x_i; applying it twice is the identity."""
    s = np.asarray(signs, float)
    if s.shape != (sys.n,) or s[0] != 1 or not np.all(np.abs(s) == 1):
        raise ValueError("signs must be n entries in {+1, -1} with s_1 = +1")
    fs = []
    for i in range(1, sys.n + 1):
        m = sys.arity(i)
        fs.append(_flipped(sys.f[i - 1], s[i - 1], s[:m]))
    mono = tuple(int(sys.mono[i] * s[i] * s[i + 1]) for i in range(sys.n - 1))
    return TriangularSystem(sys.n, tuple(fs), mono, name=sys.name, domain_hint=sys.domain_hint,
                            signs=tuple(int(v) for v in s))


def _flipped(fi, si, sp):
    sp = np.asarray(sp, float)

    def g(t, x):
        x = np.asarray(x, float)
        return si * np.asarray(fi(t, sp.reshape((-1,) + (1,) * (x.ndim - 1)) * x), float)

    return g


def normalize_increasing(sys: TriangularSystem) -> TriangularSystem:
    """Equivalent system whose every f_i increases in its last argument.

    The sign map is s_1 = 1, s_{i+1} = s_i * mono[i]; the output x_1 is unchanged.
    The identity map is returned untouched when all flags are already +1.
    """
    if sys.increasing:
        return sys
    s = [1]
    for m in sys.mono:
        s.append(s[-1] * m)
    return apply_sign_map(sys, s)


# Built-in systems ----------------------------------------------------------

def _ex_f1(t, x):
    x1, x2 = x[0], x[1]
    return x1 - x1 ** 3 + x1 ** 2 * x2 + 1.5 * x1 * x2 ** 2 + x2 ** 3


def _ex_f2(t, x):
    x1, x2 = x[0], x[1]
    return -x1 ** 3 - x1 * x2 ** 2 + x2 - x2 ** 3


def make_example() -> tuple[TriangularSystem, GrowthEnvelope]:
    """The two-dimensional polynomial system with |x(t)| <= max(|x0|, 2 sqrt 2)."""
    sys = TriangularSystem(2, (_ex_f1, _ex_f2), (1,), name="example2d",
                           domain_hint=((-3.0, 3.0), (-3.0, 3.0)))
    bound = 2.0 * np.sqrt(2.0)
    env = GrowthEnvelope(lambda t, s: np.maximum(np.asarray(s, float) + 0.0 * np.asarray(t, float), bound),
                         "max(s, 2*sqrt(2))")
    return sys, env


# A contracting chain: x' = A x + b(t, x) with sym(A) negative definite
# (largest eigenvalue -1 + 1/sqrt(2)) and |b| <= sqrt(3)/4, so every solution
# satisfies |x(t)| <= max(|x0|, 1.48).
_CHAIN_BOUND = 1.6


def _ch_f1(t, x):
    return -x[0] + x[1] + 0.25 * np.sin(x[1])


def _ch_f2(t, x):
    return -x[1] + x[2] + 0.25 * np.sin(x[0] + t)


def _ch_f3(t, x):
    return -x[0] - x[1] - x[2] + 0.25 * np.cos(x[1])


def make_chain3() -> tuple[TriangularSystem, GrowthEnvelope]:
    """Three-state increasing chain used for tests of the general-n paths."""
    sys = TriangularSystem(3, (_ch_f1, _ch_f2, _ch_f3), (1, 1), name="chain3",
                           domain_hint=((-2.0, 2.0),) * 3)
    env = GrowthEnvelope(lambda t, s: np.maximum(np.asarray(s, float) + 0.0 * np.asarray(t, float), _CHAIN_BOUND),
                         "max(s, 1.6)")
    return sys, env


def make_chain3_flipped() -> tuple[TriangularSystem, GrowthEnvelope]:
    """chain3 written in the coordinates (x1, -x2, x3): mono = (-1, -1)."""
    base, env = make_chain3()
    flipped = apply_sign_map(base, (1, -1, 1))
    return TriangularSystem(3, flipped.f, flipped.mono, name="chain3-flipped",
                            domain_hint=base.domain_hint), env


SYSTEMS: dict[str, Callable[[], tuple[TriangularSystem, GrowthEnvelope]]] = {
    "example2d": make_example,
    "chain3": make_chain3,
    "chain3-flipped": make_chain3_flipped,
}


def register_system(name: str, factory: Callable[[], tuple[TriangularSystem, GrowthEnvelope]]) -> None:
    SYSTEMS[name] = factory


def get_system(name: str) -> tuple[TriangularSystem, GrowthEnvelope]:
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
