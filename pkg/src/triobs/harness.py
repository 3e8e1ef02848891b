"""Experiment configuration, orchestration and artifact writing.

An experiment is described by a JSON document validated against
`CONFIG_SCHEMA`; unknown keys are rejected. `run_experiment` writes every
artifact into the output directory and returns a summary whose checks decide
the exit status. Artifacts are deterministic given the configuration: the
summary carries no timings, and numbers are written with 17 significant digits.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .certify import verify
from .errors import DivergenceError, PlanError, SynthesisError
from .model import SYSTEMS, get_system, normalize_increasing
from .runtime import OBSERVER_COLUMNS, check_error_envelope, integrate_plant, run_observer
from .switching import (SwitchingPolicy, capture_index, load_plan, plan_switching, run_switching, save_plan,
                        window_error_max)
from .synthesis import SynthesisConfig, load_schedule, save_schedule, synthesize

MODES = ("simulate", "synthesize", "observe", "switching", "verify")

_SYNTH_PROPS = {
    "R": {"type": "number", "exclusiveMinimum": 0},
    "xi": {"type": ["number", "null"], "minimum": 1},
    "L": {"type": "number", "exclusiveMinimum": 1},
    "t0": {"type": "number", "minimum": 0},
    "grid_dt": {"type": "number", "exclusiveMinimum": 0},
    "horizon": {"type": "number", "exclusiveMinimum": 0},
    "lam": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "g0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "sigma_safety": {"type": "number", "minimum": 1},
    "D_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "mu_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "phi_safety": {"type": "number", "minimum": 1},
    "phi_min": {"type": "number", "exclusiveMinimum": 0},
    "schur_margin": {"type": "number", "exclusiveMinimum": 1},
    "starts": {"type": "integer", "minimum": 1},
    "candidates": {"type": "integer", "minimum": 1},
    "phi_samples": {"type": "integer", "minimum": 1},
    "ramp_nodes": {"type": "integer", "minimum": 1},
    "check_t": {"type": "integer", "minimum": 2},
    "check_r": {"type": "integer", "minimum": 2},
    "check_starts": {"type": "integer", "minimum": 1},
    "check_candidates": {"type": "integer", "minimum": 1},
    "kernel_samples": {"type": "integer", "minimum": 0},
    "eps_floor": {"type": "number", "minimum": 0},
}

_VECTOR = {"type": "array", "items": {"type": "number"}, "minItems": 2}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "mode"],
    "properties": {
        "name": {"type": "string"},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"type": "string"}},
        },
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "synthesis": {"type": "object", "additionalProperties": False, "properties": _SYNTH_PROPS},
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "c_eff": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "h": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "x0": {"type": "array", "items": _VECTOR},
                "random_x0": {"type": "integer", "minimum": 0},
                "z0": _VECTOR,
                "method": {"enum": ["auto", "rk4", "bdf"]},
                "final_error_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "holdout": {"type": "integer", "minimum": 1},
                "schedule": {"type": "string"},
            },
        },
        "schedule": {"type": "string"},
    },
}


class ConfigError(ValueError):
    """The configuration does not validate."""


@dataclass
class ExperimentConfig:
    system: str
    mode: str
    seed: int = 0
    out: str = "runs/default"
    name: str = ""
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    policy: dict = field(default_factory=dict)
    h: float = 1e-3
    sim_horizon: float | None = None
    x0: list = field(default_factory=list)
    random_x0: int = 0
    z0: list | None = None
    method: str = "auto"
    final_error_tol: float = 1e-2
    verify_samples: int = 100_000
    verify_holdout: int = 1000
    schedule: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        if doc["system"]["name"] not in SYSTEMS:
            raise ConfigError(f"system/name: unknown system {doc['system']['name']!r}; known: {sorted(SYSTEMS)}")
        seed = int(doc.get("seed", 0))
        syn = dict(doc.get("synthesis", {}))
        syn["seed"] = seed
        try:
            scfg = SynthesisConfig(**syn)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synthesis: {exc}") from None
        sim = doc.get("simulation", {})
        ver = doc.get("verify", {})
        return cls(system=doc["system"]["name"], mode=doc["mode"], seed=seed,
                   out=doc.get("out", "runs/default"), name=doc.get("name", ""), synthesis=scfg,
                   policy=dict(doc.get("policy", {})), h=float(sim.get("h", 1e-3)),
                   sim_horizon=sim.get("horizon"), x0=[list(map(float, v)) for v in sim.get("x0", [])],
                   random_x0=int(sim.get("random_x0", 0)), z0=sim.get("z0"),
                   method=sim.get("method", "auto"), final_error_tol=float(sim.get("final_error_tol", 1e-2)),
                   verify_samples=int(ver.get("samples", 100_000)), verify_holdout=int(ver.get("holdout", 1000)),
                   schedule=ver.get("schedule", doc.get("schedule")), raw=copy.deepcopy(doc))


def shipped_config(name: str) -> dict:
    """A configuration bundled with the package, by file stem."""
    path = resources.files("triobs").joinpath("configs", f"{name}.json")
    if not path.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return json.loads(path.read_text())


def load_config(path_or_name: str) -> dict:
    p = Path(path_or_name)
    if p.is_file():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return shipped_config(path_or_name)


def apply_overrides(doc: dict, *, mode=None, out=None, seed=None, grid_dt=None, step=None,
                    horizon=None) -> dict:
    """Command-line flags written into a config document before validation."""
    doc = copy.deepcopy(doc)
    if mode is not None:
        doc["mode"] = mode
    if out is not None:
        doc["out"] = out
    if seed is not None:
        doc["seed"] = seed
    if grid_dt is not None:
        doc.setdefault("synthesis", {})["grid_dt"] = grid_dt
    if step is not None:
        doc.setdefault("simulation", {})["h"] = step
    if horizon is not None:
        doc.setdefault("synthesis", {})["horizon"] = horizon
        doc.setdefault("simulation", {})["horizon"] = horizon
        if doc.get("mode") == "switching":
            doc.setdefault("policy", {})["horizon"] = horizon
    return doc


@dataclass
class Check:
    name: str
    passed: bool
    value: object = None

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _jsonable(self.value)}


@dataclass
class ExperimentResult:
    out: Path
    checks: list
    artifacts: list
    error: str | None = None
    stage: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def summary(self) -> dict:
        return {"passed": self.passed, "error": self.error, "stage": self.stage,
                "checks": [c.as_dict() for c in self.checks], "artifacts": sorted(self.artifacts)}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def initial_states(cfg: ExperimentConfig, n: int) -> list:
    """Explicit x0 entries, then `random_x0` seeded points uniform in the ball of radius R."""
    pts = [np.asarray(v, float) for v in cfg.x0]
    for v in pts:
        if v.shape != (n,):
            raise ConfigError(f"x0 entry {v.tolist()} does not have length {n}")
    if cfg.random_x0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77]))
        u = rng.normal(size=(cfg.random_x0, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = cfg.synthesis.R * rng.random(cfg.random_x0) ** (1.0 / n)
        pts += list(u * r[:, None])
    if not pts:
        pts = [np.ones(n)]
    return pts


class _Runner:
    def __init__(self, cfg: ExperimentConfig, log):
        self.cfg = cfg
        self.log = log
        self.out = Path(cfg.out)
        self.checks: list[Check] = []
        self.artifacts: list[str] = []
        sys, beta = get_system(cfg.system)
        self.sys_raw = sys
        self.sys = normalize_increasing(sys)
        self.beta = beta

    def write(self, rel: str, text: str):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.artifacts.append(rel)

    def check(self, name, passed, value=None):
        self.checks.append(Check(name, bool(passed), value))

    def schedule(self):
        cfg = self.cfg
        if cfg.schedule:
            self.log(f"loading schedule from {cfg.schedule}")
            return load_schedule(cfg.schedule)
        t = time.perf_counter()
        sched = synthesize(self.sys, self.beta, cfg.synthesis, log=self.log)
        self.log(f"synthesis finished in {time.perf_counter() - t:.1f}s")
        save_schedule(sched, self.out / "schedule", {"system": cfg.system, "seed": cfg.seed})
        self.artifacts += [f"schedule/{f}" for f in ("manifest.json", "P.csv", "d.csv", "phi.csv", "sigma.csv")]
        return sched

    def simulate(self):
        cfg = self.cfg
        T = cfg.sim_horizon or cfg.synthesis.horizon
        t0 = cfg.synthesis.t0
        worst = 0.0
        for i, x0 in enumerate(initial_states(cfg, self.sys.n)):
            tr = integrate_plant(self.sys_raw, t0, x0, t0 + T, cfg.h)
            self.write(f"plant_{i}.csv", tr.to_csv())
            bound = np.asarray(self.beta(tr.t, np.linalg.norm(x0)) + 0.0 * tr.t, float)
            worst = max(worst, float(np.max(np.linalg.norm(tr.states, axis=1) - bound)))
        self.check("growth_envelope", worst <= 1e-6, worst)

    def synthesize(self):
        sched = self.schedule()
        from .certify import d_checks, matrix_checks
        for c in matrix_checks(sched) + d_checks(sched):
            self.check(c.name, c.passed, c.worst_margin)

    def observe(self):
        cfg = self.cfg
        sched = self.schedule()
        T = sched.t0 + (cfg.sim_horizon or (sched.t_end - sched.t0))
        z0 = None if cfg.z0 is None else np.asarray(cfg.z0, float)
        if z0 is not None and self.sys.signs is not None:
            z0 = z0 * np.asarray(self.sys.signs, float)
        finals, viol, ratio = [], 0, 0.0
        for i, x0 in enumerate(initial_states(cfg, self.sys.n)):
            x0n = np.asarray(x0, float) * (np.asarray(self.sys.signs, float) if self.sys.signs else 1.0)
            t = time.perf_counter()
            xt = integrate_plant(self.sys, sched.t0, x0n, T, cfg.h)
            run = run_observer(sched, xt, self.sys, T=T, h=cfg.h, z0=z0, method=cfg.method)
            rep = check_error_envelope(xt, run.trace, sched)
            self.log(f"run {i}: x0={np.round(x0, 6).tolist()} method={run.method} "
                     f"|e(T)|={run.trace.aux['abs_e'][-1]:.3g} ({time.perf_counter() - t:.1f}s)")
            self.write(f"plant_{i}.csv", xt.to_csv())
            self.write(f"observer_{i}.csv", run.trace.to_csv(OBSERVER_COLUMNS))
            self.write(f"envelope_{i}.json", json.dumps(_jsonable(rep.as_dict()), indent=2, sort_keys=True) + "\n")
            finals.append(float(run.trace.aux["abs_e"][-1]))
            viol += rep.violations
            ratio = max(ratio, rep.max_ratio)
        self.check("error_envelope", viol == 0, {"violations": viol, "max_ratio": ratio})
        self.check("final_error", max(finals) <= cfg.final_error_tol, max(finals))

    def switching(self):
        cfg = self.cfg
        pol = SwitchingPolicy(h=cfg.h, **cfg.policy)
        if cfg.schedule:
            plan = load_plan(cfg.schedule)
        else:
            plan = plan_switching(self.sys, self.beta, cfg.synthesis.t0, pol, cfg.synthesis, log=self.log)
            save_plan(plan, self.out / "plan")
            self.artifacts.append("plan/plan.json")
        tail_start = plan.t0 + 0.75 * plan.policy.horizon
        worst_tail, env_ok = 0.0, True
        for i, x0 in enumerate(initial_states(cfg, self.sys.n)):
            x0n = np.asarray(x0, float) * (np.asarray(self.sys.signs, float) if self.sys.signs else 1.0)
            t = time.perf_counter()
            run = run_switching(self.sys, x0n, plan, method=cfg.method)
            e = run.Z.aux["abs_e"][run.Z.t >= tail_start]
            tail = float(np.max(e)) if np.all(np.isfinite(e)) else float("inf")
            kstar = capture_index(plan, x0n)
            captured = [w for w in run.windows if kstar is not None and w.k >= kstar]
            ok = bool(captured) and all(not w.failed and w.envelope.passed for w in captured)
            self.log(f"run {i}: x0={np.round(x0, 6).tolist()} tail max |x-Z|={tail:.3g} "
                     f"captured from window {kstar} ({time.perf_counter() - t:.1f}s)")
            self.write(f"plant_{i}.csv", run.x.to_csv())
            self.write(f"switching_{i}.csv", run.Z.to_csv(OBSERVER_COLUMNS))
            windows = [{"k": w.k, "failed": w.failed, "message": w.message,
                        "envelope": w.envelope.as_dict() if w.envelope else None} for w in run.windows]
            self.write(f"windows_{i}.json", json.dumps(_jsonable({"capture_window": kstar, "windows": windows,
                                                                  "max_error": window_error_max(run, plan)}),
                                                       indent=2, sort_keys=True) + "\n")
            worst_tail = max(worst_tail, tail)
            env_ok &= ok
        self.check("tail_error", worst_tail <= cfg.final_error_tol, worst_tail)
        self.check("captured_window_envelopes", env_ok)

    def verify(self):
        cfg = self.cfg
        sched = self.schedule()
        rep = verify(sched, self.sys, self.beta, samples=cfg.verify_samples, seed=cfg.seed,
                     holdout=cfg.verify_holdout)
        self.write("report.json", json.dumps(_jsonable(rep.as_dict()), indent=2, sort_keys=True) + "\n")
        for c in rep.checks:
            self.check(c.name, c.passed, {"samples": c.samples, "violations": c.violations,
                                          "worst_margin": c.worst_margin})


def run_experiment(cfg: ExperimentConfig, log=None) -> ExperimentResult:
    """Run one experiment and write `summary.json` plus the mode's artifacts into cfg.out."""
    say = log or (lambda msg: None)
    runner = _Runner(cfg, say)
    runner.out.mkdir(parents=True, exist_ok=True)
    runner.write("config.json", json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    error = stage = None
    try:
        getattr(runner, cfg.mode)()
    except SynthesisError as exc:
        error, stage = str(exc), exc.stage
    except PlanError as exc:
        error, stage = str(exc), f"window {exc.window}"
    except (DivergenceError, np.linalg.LinAlgError, ArithmeticError) as exc:
        error, stage = str(exc), cfg.mode
    res = ExperimentResult(runner.out, runner.checks, runner.artifacts, error, stage)
    res.artifacts.append("summary.json")
    (runner.out / "summary.json").write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    return res


def config_fields() -> list[str]:
    return [f.name for f in fields(SynthesisConfig)]
