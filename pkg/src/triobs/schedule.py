"""Cubic Hermite schedules of scalar and matrix quantities over time.

A schedule stores node times, values and slopes. Between nodes it is the
cubic Hermite interpolant, outside the node range it is held constant with
zero slope. Schedules round-trip through CSV text bit-exactly because every
float is written with 17 significant digits.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

FLOAT_FMT = "%.17g"


def fmt(value: float) -> str:
    return FLOAT_FMT % float(value)


def uniform_grid(t0: float, horizon: float, h: float) -> np.ndarray:
    """Nodes t0, t0+h, ..., t0+horizon (the last step is snapped to the end)."""
    if h <= 0 or horizon <= 0:
        raise ValueError("grid step and horizon must be positive")
    m = int(round(horizon / h))
    m = max(m, 1)
    return t0 + horizon * np.arange(m + 1) / m


def ramp_nodes(t0: float, tau: float, per_half: int) -> np.ndarray:
    """Refinement nodes inside [t0, t0+tau], including both ramp corners."""
    a = t0 + 0.5 * tau * np.linspace(0.0, 1.0, per_half + 1)
    b = t0 + 0.5 * tau + 0.5 * tau * np.linspace(0.0, 1.0, per_half + 1)
    return np.concatenate([a, b])


def merge_grids(*grids: np.ndarray) -> np.ndarray:
    """Sorted union of node sets; nodes within a few ulps of their neighbour are merged."""
    t = np.unique(np.concatenate([np.asarray(g, float) for g in grids]))
    if t.size < 2:
        return t
    local = np.maximum(np.abs(t[1:]), np.abs(t[:-1]))
    keep = np.concatenate([[True], np.diff(t) > 16 * np.finfo(float).eps * local])
    return t[keep]


def smoothstep(s):
    """Cubic smoothstep s^2 (3 - 2 s) clipped to [0, 1], with its derivative."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s)


def monotone_slopes(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Slope-limited (Fritsch-Butland) node slopes that preserve monotonicity."""
    if t.size < 2:
        return np.zeros_like(v)
    if t.size == 2:
        s = (v[1] - v[0]) / (t[1] - t[0])
        return np.array([s, s])
    # subnormal secants overflow inside the harmonic mean; the resulting slope is 0
    with np.errstate(over="ignore"):
        return PchipInterpolator(t, v).derivative()(t)


def _hermite_eval(t, nodes, values, slopes, derivative=False):
    """Evaluate a piecewise cubic Hermite curve; values may carry trailing axes."""
    tq = np.asarray(t, float)
    scalar = tq.ndim == 0
    tq = np.atleast_1d(tq)
    n = nodes.size
    if n == 1:
        out = np.repeat(values[:1], tq.size, axis=0)
        if derivative:
            out = np.zeros_like(out)
        return out[0] if scalar else out
    idx = np.clip(np.searchsorted(nodes, tq, side="right") - 1, 0, n - 2)
    t0 = nodes[idx]
    hs = nodes[idx + 1] - t0
    s = np.clip((tq - t0) / hs, 0.0, 1.0)
    outside = (tq < nodes[0]) | (tq > nodes[-1])
    extra = (1,) * (values.ndim - 1)
    s_ = s.reshape((-1,) + extra)
    h_ = hs.reshape((-1,) + extra)
    y0, y1 = values[idx], values[idx + 1]
    m0, m1 = slopes[idx], slopes[idx + 1]
    if not derivative:
        s2 = s_ * s_
        s3 = s2 * s_
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s_
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        out = h00 * y0 + h10 * h_ * m0 + h01 * y1 + h11 * h_ * m1
        if np.any(outside):
            out[tq < nodes[0]] = values[0]
            out[tq > nodes[-1]] = values[-1]
    else:
        s2 = s_ * s_
        d00 = (6 * s2 - 6 * s_) / h_
        d10 = 3 * s2 - 4 * s_ + 1
        d01 = (-6 * s2 + 6 * s_) / h_
        d11 = 3 * s2 - 2 * s_
        out = d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1
        if np.any(outside):
            out[outside] = 0.0
    return out[0] if scalar else out


@dataclass
class ScalarSchedule:
    """Scalar C1 schedule; `nondecreasing` and `positive` describe node values."""

    t: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    nondecreasing: bool = False
    positive: bool = False

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.values = np.asarray(self.values, float)
        self.slopes = np.asarray(self.slopes, float)
        if self.t.ndim != 1 or self.t.shape != self.values.shape or self.t.shape != self.slopes.shape:
            raise ValueError("schedule arrays must be 1-d and of equal length")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("schedule nodes must be strictly increasing")
        if self.nondecreasing and np.any(np.diff(self.values) < 0):
            raise ValueError("nondecreasing flag set on decreasing node values")
        if self.positive and np.any(self.values <= 0):
            raise ValueError("positive flag set on non-positive node values")

    @classmethod
    def constant(cls, t, value: float) -> "ScalarSchedule":
        t = np.asarray(t, float)
        return cls(t, np.full(t.shape, float(value)), np.zeros(t.shape),
                   nondecreasing=True, positive=value > 0)

    @classmethod
    def fit_monotone(cls, t, values, **flags) -> "ScalarSchedule":
        t = np.asarray(t, float)
        values = np.asarray(values, float)
        return cls(t, values, monotone_slopes(t, values), **flags)

    def __call__(self, t):
        return _hermite_eval(t, self.t, self.values, self.slopes)

    def derivative(self, t):
        return _hermite_eval(t, self.t, self.values, self.slopes, derivative=True)

    def refine(self, nodes) -> "ScalarSchedule":
        """Same curve on a superset of nodes (exact for piecewise cubics)."""
        t = merge_grids(self.t, nodes)
        v = self(t)
        if self.nondecreasing:
            v = np.maximum.accumulate(v)
        return ScalarSchedule(t, v, self.derivative(t),
                              nondecreasing=self.nondecreasing, positive=self.positive)

    def shifted(self, offset: float) -> "ScalarSchedule":
        return ScalarSchedule(self.t, self.values + offset, self.slopes)

    def to_csv(self) -> str:
        lines = ["t,value,slope"]
        for a, b, c in zip(self.t, self.values, self.slopes):
            lines.append(f"{fmt(a)},{fmt(b)},{fmt(c)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, **flags) -> "ScalarSchedule":
        data = _read_csv(text, expected=["t", "value", "slope"])
        return cls(data[:, 0], data[:, 1], data[:, 2], **flags)


@dataclass
class MatrixSchedule:
    """Symmetric k x k matrix schedule with entrywise Hermite interpolation."""

    t: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    k: int = field(init=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.values = np.asarray(self.values, float)
        self.slopes = np.asarray(self.slopes, float)
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise ValueError("matrix schedule values must have shape (N, k, k)")
        if self.values.shape != self.slopes.shape or self.values.shape[0] != self.t.size:
            raise ValueError("matrix schedule arrays disagree in shape")
        if not np.array_equal(self.values, np.swapaxes(self.values, 1, 2)):
            raise ValueError("matrix schedule values must be exactly symmetric")
        if not np.array_equal(self.slopes, np.swapaxes(self.slopes, 1, 2)):
            raise ValueError("matrix schedule slopes must be exactly symmetric")
        self.k = self.values.shape[1]

    @classmethod
    def constant(cls, t, matrix) -> "MatrixSchedule":
        t = np.asarray(t, float)
        m = np.asarray(matrix, float)
        return cls(t, np.broadcast_to(m, (t.size,) + m.shape).copy(), np.zeros((t.size,) + m.shape))

    def __call__(self, t):
        return _hermite_eval(t, self.t, self.values, self.slopes)

    def derivative(self, t):
        return _hermite_eval(t, self.t, self.values, self.slopes, derivative=True)

    def refine(self, nodes) -> "MatrixSchedule":
        t = merge_grids(self.t, nodes)
        v = self(t)
        s = self.derivative(t)
        return MatrixSchedule(t, 0.5 * (v + np.swapaxes(v, 1, 2)), 0.5 * (s + np.swapaxes(s, 1, 2)))

    def min_eig(self) -> np.ndarray:
        """Smallest eigenvalue at each node."""
        return np.linalg.eigvalsh(self.values)[:, 0]

    def scaled(self, c: float) -> "MatrixSchedule":
        return MatrixSchedule(self.t, c * self.values, c * self.slopes)

    def to_csv(self) -> str:
        k = self.k
        names = [f"P{i + 1}{j + 1}" for i in range(k) for j in range(k)]
        head = ["t"] + names + ["d" + s for s in names]
        lines = [",".join(head)]
        flat_v = self.values.reshape(self.t.size, -1)
        flat_s = self.slopes.reshape(self.t.size, -1)
        for a, v, s in zip(self.t, flat_v, flat_s):
            lines.append(",".join([fmt(a)] + [fmt(x) for x in v] + [fmt(x) for x in s]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MatrixSchedule":
        data = _read_csv(text)
        width = data.shape[1] - 1
        k = int(round(np.sqrt(width / 2)))
        if 2 * k * k != width:
            raise ValueError("matrix schedule CSV has an inconsistent column count")
        v = data[:, 1:1 + k * k].reshape(-1, k, k)
        s = data[:, 1 + k * k:].reshape(-1, k, k)
        return cls(data[:, 0], v, s)


def _read_csv(text: str, expected: list[str] | None = None) -> np.ndarray:
    buf = io.StringIO(text)
    header = buf.readline().strip().split(",")
    if expected is not None and header != expected:
        raise ValueError(f"unexpected CSV header {header}, wanted {expected}")
    data = np.loadtxt(buf, delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError("CSV row width does not match header")
    return data
