"""Switching observers on overlapping windows with a piecewise published estimate.

Window k starts at t_{k-1} from z_k = 0, is designed for initial states of
size up to R_k = k rho, and is published as Z(t) = z_k(t) on [t_k, t_{k+1}).
The window lengths grow so that the transient term of the error envelope of
window k+1 has dropped below 1/(k+1) by the time that window is published.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, PlanError, SynthesisError
from .model import GrowthEnvelope, TriangularSystem
from .runtime import EnvelopeReport, Trace, check_error_envelope, integrate_plant, run_observer
from .synthesis import (ObserverGainSchedule, SynthesisConfig, load_schedule, save_schedule, synthesize,
                        with_overrides, xi_threshold)


@dataclass(frozen=True)
class SwitchingPolicy:
    """R_k = k rho; Delta_k = 1 + (ln(1 + xi_{k+1}) + ln(k + 1)) / c_eff, snapped up to the step h."""

    rho: float = 1.0
    horizon: float = 60.0
    c_eff: float = 0.5
    h: float = 1e-3

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.c_eff > 0:
            raise ValueError("c_eff must be positive")
        if not self.h > 0:
            raise ValueError("h must be positive")


@dataclass
class Window:
    k: int
    start: float
    publish: float
    end: float
    R: float
    xi: float
    schedule: ObserverGainSchedule | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"k": self.k, "start": self.start, "publish": self.publish, "end": self.end,
                "R": self.R, "xi": self.xi, "schedule": f"window_{self.k}"}


@dataclass
class SwitchingPlan:
    """Switch times t_1 = t0 < t_2 < ..., radii, thresholds and per-window schedules."""

    t0: float
    policy: SwitchingPolicy
    times: list
    windows: list

    @property
    def t_end(self) -> float:
        return self.t0 + self.policy.horizon

    def window_at(self, t: float) -> int:
        """Index k of the window published at time t."""
        for w in self.windows:
            if w.publish <= t < w.end or (w is self.windows[-1] and t <= w.end):
                return w.k
        raise ValueError(f"time {t!r} lies outside the plan")


def _radius(policy: SwitchingPolicy, k: int) -> float:
    return k * policy.rho


def _threshold(sys: TriangularSystem, beta: GrowthEnvelope, L: float, t_start: float, R: float) -> float:
    return max(1.0, xi_threshold(beta, sys.n, L, t_start, R))


def switch_times(sys: TriangularSystem, beta: GrowthEnvelope, t0: float, policy: SwitchingPolicy,
                 L: float) -> tuple[list, list, list]:
    """Switch times t_1..t_{K+1} covering the horizon, with R_k and xi_k for k = 1..K.

    Every t_k is t0 plus a whole number of steps h, so windows start on the
    integration grid. Window k starts at t_{k-1} (at t0 for k = 1).
    """
    h = policy.h
    end = t0 + policy.horizon
    steps = [0]                       # t_k = t0 + h * steps[k - 1]
    radii, xis = [], []
    k = 1
    while t0 + h * steps[k - 1] < end:
        start = t0 + h * steps[max(k - 2, 0)]
        radii.append(_radius(policy, k))
        xis.append(_threshold(sys, beta, L, start, radii[-1]))
        xi_next = _threshold(sys, beta, L, t0 + h * steps[k - 1], _radius(policy, k + 1))
        delta = 1.0 + (math.log1p(xi_next) + math.log(k + 1)) / policy.c_eff
        steps.append(steps[-1] + math.ceil(delta / h - 1e-9))
        k += 1
    return [t0 + h * m for m in steps], radii, xis


def plan_switching(sys: TriangularSystem, beta: GrowthEnvelope, t0: float, policy: SwitchingPolicy,
                   cfg: SynthesisConfig | None = None, log=None) -> SwitchingPlan:
    """Synthesize one gain schedule per window; window k covers [t_{k-1}, min(t_{k+1}, end)]."""
    cfg = cfg or SynthesisConfig()
    say = log or (lambda msg: None)
    times, radii, xis = switch_times(sys, beta, t0, policy, cfg.L)
    end = t0 + policy.horizon
    windows = []
    for k in range(1, len(radii) + 1):
        start = times[max(k - 2, 0)]
        stop = min(times[k], end)
        R, xi = radii[k - 1], xis[k - 1]
        need = xi_threshold(beta, sys.n, cfg.L, start, R)
        if xi < need:
            raise PlanError(k, ValueError(f"threshold {xi!r} below the admissible {need!r}"))
        wcfg = with_overrides(cfg, R=R, xi=xi, t0=start, horizon=stop - start, seed=cfg.seed + k)
        say(f"window {k}: [{start:.6g}, {stop:.6g}] R={R:.6g} xi={xi:.6g}")
        try:
            sched = synthesize(sys, beta, wcfg)
        except SynthesisError as exc:
            raise PlanError(k, exc) from exc
        windows.append(Window(k, start, times[k - 1], stop, R, xi, sched))
    return SwitchingPlan(t0, policy, times, windows)


def save_plan(plan: SwitchingPlan, directory) -> Path:
    """Write plan.json and one schedule directory per window."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for w in plan.windows:
        save_schedule(w.schedule, out / f"window_{w.k}", {"window": w.k})
    manifest = {
        "format": "switching-plan/1",
        "t0": plan.t0,
        "policy": asdict(plan.policy),
        "rules": {
            "radius": "R_k = k * rho",
            "threshold": "xi_k = max(1, sqrt(L) exp(2n) beta(t_{k-1}, R_k + 1))",
            "window_length": "Delta_k = 1 + (ln(1 + xi_{k+1}) + ln(k + 1)) / c_eff, rounded up to a multiple of h",
            "initial_state": "z_k(t_{k-1}) = 0",
            "window_span": "[t_{k-1}, min(t_{k+1}, t0 + horizon)], published on [t_k, t_{k+1})",
        },
        "times": plan.times,
        "windows": [w.as_dict() for w in plan.windows],
    }
    (out / "plan.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_plan(directory) -> SwitchingPlan:
    src = Path(directory)
    man = json.loads((src / "plan.json").read_text())
    if man.get("format") != "switching-plan/1":
        raise ValueError("not a switching plan manifest")
    policy = SwitchingPolicy(**man["policy"])
    windows = []
    for w in man["windows"]:
        sched = load_schedule(src / w["schedule"])
        windows.append(Window(int(w["k"]), float(w["start"]), float(w["publish"]), float(w["end"]),
                              float(w["R"]), float(w["xi"]), sched))
    return SwitchingPlan(float(man["t0"]), policy, [float(t) for t in man["times"]], windows)


@dataclass
class WindowResult:
    k: int
    failed: bool
    message: str = ""
    trace: Trace | None = field(default=None, repr=False)
    envelope: EnvelopeReport | None = None


@dataclass
class SwitchingRun:
    x: Trace
    Z: Trace
    windows: list

    def window(self, k: int) -> WindowResult:
        return self.windows[k - 1]


def run_switching(sys: TriangularSystem, x0_hidden, plan: SwitchingPlan, h: float | None = None,
                  method: str = "auto") -> SwitchingRun:
    """Simulate the plant and every window; publish Z piecewise.

    A window whose observer diverges is marked failed, its published stretch
    of Z is NaN, and the remaining windows still run.
    """
    h = plan.policy.h if h is None else h
    x = integrate_plant(sys, plan.t0, x0_hidden, plan.t_end, h)
    Z = np.full(x.states.shape, np.nan)
    abs_e = np.full(x.t.size, np.nan)
    b_exp = np.full(x.t.size, np.nan)
    b_g = np.full(x.t.size, np.nan)
    win = np.zeros(x.t.size)
    results = []
    last = plan.windows[-1].k
    for w in plan.windows:
        i0, i1 = x.index_of(w.publish), x.index_of(w.end)
        sl = slice(i0, i1 + 1 if w.k == last else i1)
        win[sl] = w.k
        try:
            run = run_observer(w.schedule, x, sys, t0=w.start, T=w.end, h=h, method=method, window=w.k)
        except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
            results.append(WindowResult(w.k, True, str(exc)))
            continue
        tr = run.trace
        j0 = tr.index_of(w.publish)
        j1 = j0 + (sl.stop - sl.start)
        Z[sl] = tr.states[j0:j1]
        abs_e[sl] = tr.aux["abs_e"][j0:j1]
        b_exp[sl] = tr.aux["bound_exp"][j0:j1]
        b_g[sl] = tr.aux["bound_g"][j0:j1]
        results.append(WindowResult(w.k, False, "", tr, check_error_envelope(x, tr, w.schedule)))
    aux = {"abs_e": abs_e, "bound_exp": b_exp, "bound_g": b_g, "window": win}
    return SwitchingRun(x, Trace(h, x.t, Z, x.y.copy(), prefix="z", aux=aux), results)


def capture_index(plan: SwitchingPlan, x0) -> int | None:
    """First window whose radius covers |x0|."""
    r = float(np.linalg.norm(np.asarray(x0, float)))
    for w in plan.windows:
        if w.R >= r:
            return w.k
    return None


def window_error_max(run: SwitchingRun, plan: SwitchingPlan) -> dict:
    """max |x - Z| over each published stretch."""
    out = {}
    for w in plan.windows:
        m = run.Z.aux["window"] == w.k
        e = run.Z.aux["abs_e"][m]
        out[w.k] = float(np.max(e)) if e.size and np.all(np.isfinite(e)) else float("nan")
    return out

