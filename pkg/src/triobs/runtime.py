"""Fixed-step simulation of the plant and the observer, and error-envelope checks.

The plant is integrated with classical RK4. The observer

    z' = F(t, z, y) + phi(t) P(t)^{-1} H' (y - z_1),   F_i = f_i(t, y, z_2, ..., z_{i+1}),

is integrated either with RK4 or, when the gain is too large for an explicit
method at the chosen step, with fixed-step BDF (orders 1 to 4). In the BDF
step the innovation y - z_1 is eliminated analytically, so the huge gain only
enters through bounded ratios and never multiplies a rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .model import TriangularSystem, eval_rhs
from .schedule import ScalarSchedule, fmt
from .synthesis import ObserverGainSchedule

# sum_j a_j z^{m+1-j} = b h f(z^{m+1})
BDF = {
    1: ((1.0, -1.0), 1.0),
    2: ((1.0, -4.0 / 3.0, 1.0 / 3.0), 2.0 / 3.0),
    3: ((1.0, -18.0 / 11.0, 9.0 / 11.0, -2.0 / 11.0), 6.0 / 11.0),
    4: ((1.0, -48.0 / 25.0, 36.0 / 25.0, -16.0 / 25.0, 3.0 / 25.0), 12.0 / 25.0),
}

RESIDUAL_TOL = 1e-10

# polynomial extrapolation to the next node from the last 1..4 nodes
EXTRAPOLATE = {1: (1.0,), 2: (2.0, -1.0), 3: (3.0, -3.0, 1.0), 4: (4.0, -6.0, 4.0, -1.0)}
# a Newton update this small leaves an error of its square, far below rounding
NEWTON_TOL = 1e-10


@dataclass
class Trace:
    """Records on the grid t0 + m h; `aux` holds extra per-record columns."""

    h: float
    t: np.ndarray
    states: np.ndarray
    y: np.ndarray
    prefix: str = "x"
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.states = np.asarray(self.states, float)
        self.y = np.asarray(self.y, float)
        if self.states.ndim != 2 or self.states.shape[0] != self.t.size or self.y.shape != self.t.shape:
            raise ValueError("trace records disagree in length")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trace times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def index_of(self, t: float) -> int:
        """Record index of a grid time; raises if t is not on the grid."""
        m = int(round((t - self.t[0]) / self.h))
        if m < 0 or m >= self.t.size or abs(self.t[m] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t!r} is not a node of this trace")
        return m

    def to_csv(self, columns: list[str] | None = None) -> str:
        """CSV with t, the states and the named extra columns ("y" or an aux key)."""
        columns = list(columns or [])
        head = ["t"] + [f"{self.prefix}{i + 1}" for i in range(self.n)] + columns
        cols = [self.t[:, None], self.states]
        cols += [np.asarray(self.y if c == "y" else self.aux[c], float)[:, None] for c in columns]
        data = np.concatenate(cols, axis=1)
        lines = [",".join(head)] + [",".join(fmt(v) for v in row) for row in data]
        return "\n".join(lines) + "\n"


def _time_grid(t0: float, T: float, h: float) -> np.ndarray:
    if not h > 0:
        raise ValueError("step h must be positive")
    if not T > t0:
        raise ValueError("end time must exceed the start time")
    m = int(round((T - t0) / h))
    if abs(t0 + m * h - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon {T - t0!r} is not a multiple of the step {h!r}")
    return t0 + h * np.arange(m + 1)


def integrate_plant(sys: TriangularSystem, t0: float, x0, T: float, h: float) -> Trace:
    """Classical RK4 on the plant; records y = x_1."""
    t = _time_grid(t0, T, h)
    x = np.array(x0, float)
    if x.shape != (sys.n,):
        raise ValueError(f"x0 must have length {sys.n}")
    out = np.empty((t.size, sys.n))
    out[0] = x
    for m in range(t.size - 1):
        tm = t[m]
        try:
            k1 = eval_rhs(sys, tm, x)
            k2 = eval_rhs(sys, tm + 0.5 * h, x + 0.5 * h * k1)
            k3 = eval_rhs(sys, tm + 0.5 * h, x + 0.5 * h * k2)
            k4 = eval_rhs(sys, tm + h, x + h * k3)
        except ArithmeticError as exc:
            raise DivergenceError(f"plant evaluation failed: {exc}", float(tm)) from exc
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("plant state became non-finite", float(tm))
        out[m + 1] = x
    return Trace(h, t, out, out[:, 0].copy(), prefix="x")


def observer_rhs(sys: TriangularSystem, t, z, y) -> np.ndarray:
    """F(t, z, y): every f_i with x_1 replaced by the measured y."""
    z = np.asarray(z, float)
    w = z.copy()
    w[0] = y
    return np.stack([sys.eval_f(i, t, w[: sys.arity(i)]) for i in range(1, sys.n + 1)])


def gains_with_residual(schedule: ObserverGainSchedule, t) -> tuple[np.ndarray, float]:
    """Gain vectors phi P^{-1} e_1 at times t and the worst relative solve residual."""
    t = np.atleast_1d(np.asarray(t, float))
    K = schedule.gain_vector(t)
    P = schedule.P(t)
    phi = schedule.phi(t)
    res = np.einsum("mij,mj->mi", P, K)
    res[:, 0] -= phi
    scale = np.linalg.norm(P, 2, axis=(1, 2)) * np.linalg.norm(K, axis=1) + np.abs(phi)
    worst = float(np.max(np.linalg.norm(res, axis=1) / scale)) if t.size else 0.0
    if not np.all(np.isfinite(K)):
        raise np.linalg.LinAlgError("gain solve produced non-finite values")
    return K, worst


class _YSource:
    """Output samples at grid nodes and, for RK4 stages, at midpoints."""

    def __init__(self, source, sys: TriangularSystem, t: np.ndarray, h: float):
        self.t = t
        if isinstance(source, Trace):
            if abs(source.h - h) > 1e-12 * h:
                raise ValueError("observer step must equal the output trace step")
            i0 = source.index_of(t[0])
            if i0 + t.size > source.t.size:
                raise ValueError("output trace ends before the observer horizon")
            self.nodes = source.y[i0:i0 + t.size]
            st = source.states[i0:i0 + t.size]
            # y' = f_1(t, x_1, x_2) at the nodes, for cubic Hermite midpoints
            ydot = sys.eval_f(1, t, st[:, : sys.arity(1)].T)
            self.curve = ScalarSchedule(t, self.nodes, np.broadcast_to(ydot, t.shape))
            self.mid = self.curve(t[:-1] + 0.5 * h)
            self.x = st
        elif callable(source):
            self.nodes = np.array([float(source(tt)) for tt in t])
            self.mid = np.array([float(source(tt + 0.5 * h)) for tt in t[:-1]])
            self.curve = source
            self.x = None
        else:
            raise TypeError("y_source must be a Trace or a callable t -> y")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("output samples contain non-finite values")

    def at(self, tq) -> np.ndarray:
        """Output at arbitrary times inside the grid (cubic Hermite for traces)."""
        if isinstance(self.curve, ScalarSchedule):
            return self.curve(tq)
        return np.array([float(self.curve(tt)) for tt in np.atleast_1d(tq)])


def _rk4_observer(sys, t, h, z, K, Kmid, ys):
    out = np.empty((t.size, sys.n))
    out[0] = z
    for m in range(t.size - 1):
        tm = t[m]
        y0, ym, y1 = ys.nodes[m], ys.mid[m], ys.nodes[m + 1]

        def G(tt, zz, y, k):
            return observer_rhs(sys, tt, zz, y) + k * (y - zz[0])

        k1 = G(tm, z, y0, K[m])
        k2 = G(tm + 0.5 * h, z + 0.5 * h * k1, ym, Kmid[m])
        k3 = G(tm + 0.5 * h, z + 0.5 * h * k2, ym, Kmid[m])
        k4 = G(tm + h, z + h * k3, y1, K[m + 1])
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise DivergenceError("observer state became non-finite", float(tm))
        out[m + 1] = z
    return out


def _bdf_core(sys, t, h, out, start, K, ynodes, order, newton_iters=30):
    """BDF steps from out[start] onward; rows 0..start of `out` hold the history.

    The innovation v = (1 + hb k_1)(y - z_1) replaces z_1 as an unknown.
    """
    n = sys.n
    cols = np.arange(n)
    v = 0.0
    for m in range(start, t.size - 1):
        q = min(order, m + 1)
        a, b = BDF[q]
        zhat = -sum(a[j] * out[m + 1 - j] for j in range(1, q + 1))
        hb = b * h
        tn = t[m + 1]
        y = ynodes[m + 1]
        k = K[m + 1]
        den = 1.0 + hb * k[0]
        rho = hb * k[1:] / den
        c = EXTRAPOLATE[min(4, m + 1)]
        w = sum(c[j] * out[m - j] for j in range(len(c)))
        w[0] = y
        def residual(v, w, F0):
            r = np.empty(n)
            r[0] = v - (y - zhat[0] - hb * F0[0])
            r[1:] = w[1:] - zhat[1:] - hb * F0[1:] - rho * v
            return r

        def field(w):
            return np.array([float(sys.eval_f(i, tn, w[: sys.arity(i)])) for i in range(1, n + 1)])

        for _ in range(newton_iters):
            # columns: base point, then a central pair per unknown z_2..z_n
            step = 1e-7 * np.maximum(1.0, np.abs(w[1:]))
            W = np.repeat(w[:, None], 2 * n - 1, axis=1)
            W[cols[1:], 1 + 2 * (cols[1:] - 1)] += step
            W[cols[1:], 2 + 2 * (cols[1:] - 1)] -= step
            F = np.stack([np.broadcast_to(sys.eval_f(i, tn, W[: sys.arity(i)]), (2 * n - 1,))
                          for i in range(1, n + 1)])
            J_F = (F[:, 1::2] - F[:, 2::2]) / (2.0 * step)
            # r_1 = v - (y - zhat_1 - hb F_1), r_i = z_i - zhat_i - hb F_i - rho_i v
            r = residual(v, w, F[:, 0])
            J = np.zeros((n, n))
            J[0, 0] = 1.0
            J[0, 1:] = hb * J_F[0]
            J[1:, 0] = -rho
            J[1:, 1:] = np.eye(n - 1) - hb * J_F[1:]
            dx = np.linalg.solve(J, -r)
            # z_i is only determined up to rounding of the largest term in its equation
            size = np.r_[max(1.0, abs(v)), np.maximum(np.maximum(1.0, np.abs(w[1:])), np.abs(rho * v))]
            if np.all(np.abs(dx) <= NEWTON_TOL * size):
                v += dx[0]
                w[1:] += dx[1:]
                break
            # backtrack on the scaled residual; large rho with cubic terms overshoots otherwise
            norm0 = np.max(np.abs(r) / size)
            lam = 1.0
            while True:
                vt = v + lam * dx[0]
                wt = w.copy()
                wt[1:] += lam * dx[1:]
                with np.errstate(over="ignore", invalid="ignore"):
                    rt = residual(vt, wt, field(wt))
                if np.all(np.isfinite(rt)) and np.max(np.abs(rt) / size) < norm0 or lam < 1e-12:
                    break
                lam *= 0.5
            v, w = vt, wt
        else:
            if not np.all(np.abs(dx) <= 1e-8 * size):
                raise DivergenceError("implicit step did not converge", float(t[m]))
        w[0] = y - v / den
        if not np.all(np.isfinite(w)):
            raise DivergenceError("observer state became non-finite", float(t[m]))
        out[m + 1] = w
    return out


STARTUP_SUBSTEPS = 64


def _bdf_observer(sys, schedule, t, h, z, K, ys, order):
    """BDF of the given order; the first order-1 steps run on a 64 times finer grid.

    Without the fine start-up the first (implicit Euler) step leaves an O(h^2)
    error that the observer then has to remove.
    """
    out = np.empty((t.size, sys.n))
    out[0] = z
    lead = min(order - 1, t.size - 1)
    if lead > 0:
        sub = STARTUP_SUBSTEPS
        tf = t[0] + (h / sub) * np.arange(lead * sub + 1)
        tf[-1] = t[lead]
        fine = np.empty((tf.size, sys.n))
        fine[0] = z
        yf = ys.at(tf)
        yf[::sub] = ys.nodes[: lead + 1]
        _bdf_core(sys, tf, h / sub, fine, 0, schedule.gain_vector(tf), yf, order)
        out[1: lead + 1] = fine[sub::sub]
    return _bdf_core(sys, t, h, out, lead, K, ys.nodes, order)


@dataclass
class ObserverRun:
    trace: Trace
    method: str
    gain_residual: float


def run_observer(schedule: ObserverGainSchedule, y_source, sys: TriangularSystem, t0: float | None = None,
                 T: float | None = None, h: float = 1e-3, z0=None, method: str = "auto",
                 bdf_order: int = 4, window: int = 0) -> ObserverRun:
    """Integrate the observer from t0 (default schedule.t0) to T (default schedule end).

    `y_source` is a plant Trace or a callable t -> y. With a plant Trace the
    returned trace also carries abs_e together with both envelope bounds.
    """
    t0 = schedule.t0 if t0 is None else float(t0)
    T = schedule.t_end if T is None else float(T)
    if method not in ("auto", "rk4", "bdf"):
        raise ValueError(f"unknown observer method {method!r}")
    if bdf_order not in BDF:
        raise ValueError("BDF order must be 1, 2, 3 or 4")
    t = _time_grid(t0, T, h)
    z = np.zeros(sys.n) if z0 is None else np.array(z0, float)
    if z.shape != (sys.n,):
        raise ValueError(f"z0 must have length {sys.n}")
    if schedule.n != sys.n:
        raise ValueError("schedule and system dimensions differ")
    ys = _YSource(y_source, sys, t, h)
    K, resid = gains_with_residual(schedule, t)
    if resid > RESIDUAL_TOL:
        raise np.linalg.LinAlgError(f"gain solve residual {resid:.3g} exceeds {RESIDUAL_TOL}")
    if method == "auto":
        method = "bdf" if h * float(np.max(np.abs(K[:, 0]))) > 1.0 else "rk4"
    if method == "rk4":
        Kmid, r2 = gains_with_residual(schedule, t[:-1] + 0.5 * h)
        if r2 > RESIDUAL_TOL:
            raise np.linalg.LinAlgError(f"gain solve residual {r2:.3g} exceeds {RESIDUAL_TOL}")
        resid = max(resid, r2)
        states = _rk4_observer(sys, t, h, z, K, Kmid, ys)
    else:
        states = _bdf_observer(sys, schedule, t, h, z, K, ys, bdf_order)
    b_exp, b_g = envelope_bounds(schedule, t)
    aux = {"bound_exp": b_exp, "bound_g": b_g, "window": np.full(t.size, float(window))}
    if ys.x is not None:
        aux["abs_e"] = np.linalg.norm(ys.x - states, axis=1)
    else:
        aux["abs_e"] = np.full(t.size, np.nan)
    trace = Trace(h, t, states, ys.nodes.copy(), prefix="z", aux=aux)
    return ObserverRun(trace, method, resid)


OBSERVER_COLUMNS = ["y", "abs_e", "bound_exp", "bound_g", "window"]


def envelope_bounds(schedule: ObserverGainSchedule, t, rate: float = 0.5):
    """xi exp(-rate (t - t0 - 1)) and sqrt(g(t))."""
    t = np.asarray(t, float)
    return schedule.xi * np.exp(-rate * (t - schedule.t0 - 1.0)), np.sqrt(schedule.g(t))


@dataclass
class EnvelopeReport:
    samples: int
    violations_bound: int
    violations_decay: int
    max_ratio: float
    first_violation_t: float | None = None

    @property
    def violations(self) -> int:
        return self.violations_bound + self.violations_decay

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {"samples": self.samples, "violations_bound": self.violations_bound,
                "violations_decay": self.violations_decay, "max_ratio": self.max_ratio,
                "first_violation_t": self.first_violation_t, "passed": self.passed}


def check_error_envelope(x_trace: Trace, z_trace: Trace, schedule: ObserverGainSchedule,
                         rate: float = 0.5) -> EnvelopeReport:
    """|e| < xi for t >= t0, and |e| <= max(xi e^{-rate(t-t0-1)}, sqrt g) for t >= t0 + 1.

    The ratio reported is the worst |e| over the active bound (xi before t0 + 1).
    """
    if abs(x_trace.h - z_trace.h) > 1e-12 * z_trace.h:
        raise ValueError("traces use different steps")
    i0 = x_trace.index_of(z_trace.t[0])
    if i0 + z_trace.t.size > x_trace.t.size:
        raise ValueError("plant trace is shorter than the observer trace")
    x = x_trace.states[i0:i0 + z_trace.t.size]
    if x.shape[1] != z_trace.n:
        raise ValueError("traces differ in dimension")
    t = z_trace.t
    e = np.linalg.norm(x - z_trace.states, axis=1)
    active = t >= schedule.t0
    late = t >= schedule.t0 + 1.0
    b_exp, b_g = envelope_bounds(schedule, t, rate)
    bound = np.where(late, np.maximum(b_exp, b_g), schedule.xi)
    bad_a = active & ~(e < schedule.xi)
    bad_b = late & ~(e <= bound)
    ratio = np.where(active, e / bound, 0.0)
    bad = bad_a | bad_b
    first = float(t[np.argmax(bad)]) if np.any(bad) else None
    return EnvelopeReport(int(np.sum(active)), int(bad_a.sum()), int(bad_b.sum()),
                          float(np.max(ratio)) if ratio.size else 0.0, first)


def endpoint_error(trace_a: Trace, trace_b: Trace) -> float:
    return float(np.linalg.norm(trace_a.states[-1] - trace_b.states[-1]))


def rk4_order_ratio(sys: TriangularSystem, t0: float, x0, T: float, h: float) -> float:
    """Endpoint error ratio e(h)/e(h/2) against a Richardson reference built from h/4 and h/8."""
    runs = [integrate_plant(sys, t0, x0, T, h / 2 ** j).states[-1] for j in range(4)]
    ref = runs[3] + (runs[3] - runs[2]) / 15.0
    return float(np.linalg.norm(runs[0] - ref) / np.linalg.norm(runs[1] - ref))

