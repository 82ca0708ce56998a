"""``delayhb`` command line: solve, spectrum, continue, simulate, verify.

Every command reads one JSON experiment file (``--config``), applies any
``--override dotted.path=value`` edits and writes its artifacts to ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from threadpoolctl import threadpool_limits

from . import continuation as cont
from .floquet import StabilityOperator, roots_to_json, spectrum, write_scan_csv
from .model import (NodeModel, PrimerParams, RingTopology, SigmoidParams, WilsonCowanParams)
from .simulate import (HistoryFunction, NonFiniteState, NoOscillation, classify_pattern,
                       integrate, perturb_mode, random_history, verify_orbit)
from .solver import (CollapsedToEquilibrium, HBError, HBProblem, NewtonSettings,
                     initial_guess_from_simulation, solve_orbit)
from .spectral import OrbitSolution, orbit_from_json, orbit_to_json

log = logging.getLogger("delayhb")

EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2
EXIT_COLLAPSED = 3
EXIT_MISMATCH = 4
EXIT_FIRST_STEP = 5
EXIT_NON_FINITE = 6


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PrimerConfig(_Strict):
    kind: Literal["primer"]
    w: float
    I: float
    beta: float = Field(gt=0)
    tau: float = Field(default=2.0, ge=0)


class WilsonCowanConfig(_Strict):
    kind: Literal["wilson_cowan"]
    kappa: float = Field(default=0.5, gt=0)
    w_uu: float = Field(default=1.0, ge=0)
    w_vu: float = Field(default=2.0, ge=0)
    w_uv: float = Field(default=1.0, ge=0)
    w_vv: float = Field(default=0.25, ge=0)
    I_u: float = -0.05
    I_v: float = -0.3
    beta: float = Field(default=20.0, gt=0)
    tau0: float = Field(default=0.2, ge=0)


class ExpDecayProfile(_Strict):
    kind: Literal["exp_decay"]
    rate: float


class GeometricProfile(_Strict):
    kind: Literal["geometric"]
    g: float = Field(gt=0)


class TopologyConfig(_Strict):
    N: int = Field(ge=1)
    eps: float = Field(default=1.0, ge=0)
    profile: Union[ExpDecayProfile, GeometricProfile] = Field(discriminator="kind")
    total: float = Field(ge=0)
    tau_intra: Optional[float] = Field(default=None, ge=0)
    tau_inter: float = Field(gt=0)


class NewtonConfig(_Strict):
    tol_residual: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=50, ge=1)
    jacobian: Literal["analytic", "fd"] = "analytic"


class ScanConfig(_Strict):
    nu: tuple[float, float] = (-3.0, 1.0)
    omega_max_over_pi_T: float = Field(default=3.0, gt=0)
    resolution: tuple[int, int] = (81, 41)
    n_real: int = Field(default=400, ge=10)


class ContinuationConfig(_Strict):
    ds0: float = Field(default=0.02, gt=0)
    ds_max: float = Field(default=0.2, gt=0)
    max_halvings: int = Field(default=6, ge=0)
    max_points: int = Field(default=5000, ge=1)
    full_scan_every: int = Field(default=10, ge=1)
    monitor: bool = True


class NumericsConfig(_Strict):
    M: int = Field(default=30, ge=1)
    newton: NewtonConfig = NewtonConfig()
    scan: ScanConfig = ScanConfig()
    continuation: ContinuationConfig = ContinuationConfig()
    dt: float = Field(default=0.01, gt=0)
    dt_out: Optional[float] = Field(default=None, gt=0)


class GuessConfig(_Strict):
    source: Literal["simulation", "orbit", "cosine"] = "simulation"
    history: Optional[list[float]] = None
    t_end: float = Field(default=300.0, gt=0)
    path: Optional[str] = None
    mean: float = 0.5
    amplitude: float = 0.45
    period: Optional[float] = Field(default=None, gt=0)


class SeedConfig(_Strict):
    kind: Literal["constant", "orbit", "random"] = "constant"
    state: Optional[list[float]] = None
    q: Optional[int] = Field(default=None, ge=0)
    amplitude: float = Field(default=1e-3, ge=0)
    seed: int = 0


class TaskConfig(_Strict):
    guess: GuessConfig = GuessConfig()
    orbit: Optional[str] = None
    wave_mode: int = Field(default=0, ge=0)
    q_list: Optional[list[int]] = None
    range: Optional[tuple[float, float]] = None
    direction: Literal[1, -1] = 1
    param: str = "tau_inter"
    embed_orbits: bool = False
    seed: SeedConfig = SeedConfig()
    t_end: float = Field(default=300.0, gt=0)
    classify: bool = True
    periods: float = Field(default=5.0, gt=0)


class ExperimentConfig(_Strict):
    model: Union[PrimerConfig, WilsonCowanConfig] = Field(discriminator="kind")
    topology: Optional[TopologyConfig] = None
    numerics: NumericsConfig = NumericsConfig()
    task: TaskConfig = TaskConfig()

    @field_validator("topology")
    @classmethod
    def _weights_finite(cls, v):
        if v is not None and not np.isfinite(v.total):
            raise ValueError("total weight must be finite")
        return v

    def build_model(self) -> NodeModel:
        m = self.model
        topo = self.topology
        if isinstance(m, PrimerConfig):
            tau = m.tau if topo is None or topo.tau_intra is None else topo.tau_intra
            params = PrimerParams(w=m.w, I=m.I, sigmoid=SigmoidParams(m.beta), tau=tau)
        else:
            tau0 = m.tau0 if topo is None or topo.tau_intra is None else topo.tau_intra
            params = WilsonCowanParams(kappa=m.kappa, w_uu=m.w_uu, w_vu=m.w_vu, w_uv=m.w_uv,
                                       w_vv=m.w_vv, I_u=m.I_u, I_v=m.I_v,
                                       sigmoid=SigmoidParams(m.beta), tau0=tau0)
        ring = None
        if topo is not None:
            if isinstance(topo.profile, ExpDecayProfile):
                ring = RingTopology.exp_decay(topo.N, topo.profile.rate, topo.total,
                                              topo.tau_inter, topo.eps)
            else:
                ring = RingTopology.geometric(topo.N, topo.profile.g, topo.total,
                                              topo.tau_inter, topo.eps)
        return NodeModel(params, ring)

    def newton_settings(self) -> NewtonSettings:
        n = self.numerics.newton
        return NewtonSettings(tol_residual=n.tol_residual, max_iter=n.max_iter, jacobian=n.jacobian)


class CliError(Exception):
    def __init__(self, code: int, message: str, **context):
        super().__init__(message)
        self.code = code
        self.context = context


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(EXIT_CONFIG, f"override path {key!r} crosses a non-object", field=key)
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(path: str, overrides: list[str] = ()) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
    doc = apply_overrides(doc, list(overrides))
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"])
        raise CliError(EXIT_CONFIG, f"invalid config field {field}: {err['msg']}", field=field) from exc


# ----------------------------------------------------------------- helpers


def _resolve(cfg_path: str, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or p.exists() else Path(cfg_path).parent / p


def _read_orbit(cfg: ExperimentConfig, cfg_path: str, path: Optional[str]) -> OrbitSolution:
    if path is None:
        raise CliError(EXIT_CONFIG, "task.orbit must name an orbit file", field="task.orbit")
    try:
        orbit = orbit_from_json(_resolve(cfg_path, path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read orbit file: {exc}", field="task.orbit") from exc
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, f"orbit file rejected: {exc}") from exc
    return orbit


def _check_orbit(orbit: OrbitSolution, cfg: ExperimentConfig, model: NodeModel) -> None:
    problems = []
    if orbit.M != cfg.numerics.M:
        problems.append(f"M={orbit.M} but config has M={cfg.numerics.M}")
    if orbit.p != model.p:
        problems.append(f"p={orbit.p} but the model has p={model.p}")
    N = orbit.meta.get("N")
    if N is not None and int(N) != model.N:
        problems.append(f"N={N} but the model has N={model.N}")
    if problems:
        raise CliError(EXIT_MISMATCH, "orbit/config mismatch: " + "; ".join(problems))


def _default_history(model: NodeModel, cfg_state) -> np.ndarray:
    if cfg_state is not None:
        state = np.asarray(cfg_state, dtype=float)
        if state.size == model.p:
            return np.tile(state, (model.N, 1))
        if state.size == model.N * model.p:
            return state.reshape(model.N, model.p)
        raise CliError(EXIT_CONFIG, f"history state must have {model.p} or {model.N * model.p} entries")
    base = np.array([0.5]) if model.p == 1 else np.array([0.3, 0.1])
    return np.tile(base, (model.N, 1))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _orbit_extra(model: NodeModel) -> dict:
    return {"N": model.N}


def _sim_dt(cfg: ExperimentConfig, model: NodeModel) -> float:
    dt = cfg.numerics.dt
    positive = model.delays[model.delays > 0]
    if positive.size and dt > positive.min() / 10:
        raise CliError(EXIT_CONFIG, f"numerics.dt={dt} exceeds a tenth of the smallest delay",
                       field="numerics.dt")
    return dt


# ---------------------------------------------------------------- commands


def cmd_solve(cfg: ExperimentConfig, cfg_path: str, out: Path) -> dict:
    model = cfg.build_model()
    M = cfg.numerics.M
    g = cfg.task.guess
    phase_component = 0
    if g.source == "orbit":
        seed = _read_orbit(cfg, cfg_path, g.path)
        if seed.p != model.p:
            raise CliError(EXIT_MISMATCH, "guess orbit dimension does not match the model")
        seed = seed.resampled(M) if seed.M != M else seed
        X, T = seed.X, seed.T
    elif g.source == "cosine":
        if g.period is None:
            raise CliError(EXIT_CONFIG, "cosine guess needs task.guess.period", field="task.guess.period")
        basis = HBProblem.create(model, M).basis
        t = basis.sample_times(g.period)
        X = np.repeat(g.mean + g.amplitude * np.cos(2 * np.pi * t / g.period), model.p)
        T = g.period
    else:
        hist = HistoryFunction.constant(_default_history(model, g.history))
        sim = integrate(model, hist, g.t_end, _sim_dt(cfg, model))
        X, T = initial_guess_from_simulation(model, sim, M, phase_component)
    problem = HBProblem.create(model, M, wave_mode=cfg.task.wave_mode)
    orbit = solve_orbit((X, T), problem, cfg.newton_settings())
    _write(out / "orbit.json", orbit_to_json(orbit, _orbit_extra(model)))
    tail = float(np.abs(orbit.A[[0, -1]]).max())
    print(f"T={orbit.T:.12g} residual={orbit.residual_norm:.3e} tail={tail:.3e} "
          f"iterations={orbit.meta.get('iterations')}")
    return {"T": orbit.T, "residual": orbit.residual_norm, "tail": tail}


def _conjugate_entries(spectra, N: int) -> list:
    """Roots of modes ``N - q`` obtained by conjugating those of mode ``q``."""
    extra = []
    have = {sp.q for sp in spectra}
    for sp in spectra:
        q2 = (N - sp.q) % N
        if q2 == sp.q or q2 in have:
            continue
        for r in sp.roots:
            extra.append({"q": q2, "re": r.real, "im": -r.imag, "residual": float(r.residual),
                          "synthesised": True})
    return extra


def _region(cfg: ExperimentConfig, orbit: OrbitSolution):
    sc = cfg.numerics.scan
    return (tuple(sc.nu), (0.0, sc.omega_max_over_pi_T * np.pi / orbit.T))


def cmd_spectrum(cfg: ExperimentConfig, cfg_path: str, out: Path) -> dict:
    model = cfg.build_model()
    orbit = _read_orbit(cfg, cfg_path, cfg.task.orbit)
    _check_orbit(orbit, cfg, model)
    if orbit.wave_mode != 0:
        raise CliError(EXIT_MISMATCH, "spectra are computed for synchronous orbits only")
    N = model.N
    qs = cfg.task.q_list if cfg.task.q_list is not None else list(range(N // 2 + 1))
    bad = [q for q in qs if not 0 <= q < N]
    if bad:
        raise CliError(EXIT_CONFIG, f"q values {bad} outside 0..{N - 1}", field="task.q_list")
    sc = cfg.numerics.scan
    spectra = []
    summary = {}
    print(f"{'q':>3} {'max Re':>14} {'Im':>14}")
    for q in qs:
        op = StabilityOperator(orbit, model, q)
        sp = spectrum(op, region=_region(cfg, orbit), resolution=tuple(sc.resolution),
                      n_real=sc.n_real)
        spectra.append(sp)
        with open(out / f"scan_q{q}.csv", "w") as fh:
            write_scan_csv([sp.scan], fh)
        best = sp.max
        summary[q] = best.real
        print(f"{q:>3} {best.real:>14.8g} {best.imag:>14.8g}")
    doc = json.loads(roots_to_json(spectra)) + _conjugate_entries(spectra, N)
    _write(out / "roots.json", json.dumps(doc, indent=1))
    return summary


def cmd_continue(cfg: ExperimentConfig, cfg_path: str, out: Path) -> dict:
    model = cfg.build_model()
    orbit = _read_orbit(cfg, cfg_path, cfg.task.orbit)
    _check_orbit(orbit, cfg, model)
    if cfg.task.range is None:
        raise CliError(EXIT_CONFIG, "task.range is required", field="task.range")
    c = cfg.numerics.continuation
    sc = cfg.numerics.scan
    steps = cont.StepSettings(ds0=c.ds0, ds_max=max(c.ds_max, c.ds0), max_halvings=c.max_halvings,
                              max_points=c.max_points,
                              newton=NewtonSettings(tol_residual=cfg.numerics.newton.tol_residual,
                                                    max_iter=15))
    monitor = cont.MonitorSettings(enabled=c.monitor, real_interval=tuple(sc.nu), n_real=sc.n_real,
                                   full_scan_every=c.full_scan_every,
                                   resolution=tuple(sc.resolution))
    name = cfg.task.param
    try:
        cont.model_param(model, name)
    except (AttributeError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"unknown continuation parameter {name!r}", field="task.param") from exc
    start = cont.make_point(orbit, model, name, monitor)
    branch = cont.continue_branch(start, model, cfg.task.direction, cfg.task.range, steps, name, monitor)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "branch.csv", "w") as fh:
        cont.write_branch_csv(branch, fh)
    _write(out / "branch.json", cont.branch_to_json(branch, cfg.task.embed_orbits))
    fold_params = [branch.points[i].param for i in branch.folds]
    print(f"points={len(branch.points)} termination={branch.termination} "
          f"folds={[round(p, 6) for p in fold_params]} "
          f"events={[(e.q, round(e.param, 4), e.kind) for e in branch.events]}")
    return {"points": len(branch.points), "folds": fold_params,
            "events": [e.to_dict() for e in branch.events]}


def cmd_simulate(cfg: ExperimentConfig, cfg_path: str, out: Path) -> dict:
    model = cfg.build_model()
    s = cfg.task.seed
    if s.kind == "constant":
        hist = HistoryFunction.constant(_default_history(model, s.state))
    else:
        if cfg.task.orbit is not None:
            orbit = _read_orbit(cfg, cfg_path, cfg.task.orbit)
            if orbit.p != model.p:
                raise CliError(EXIT_MISMATCH, "seed orbit dimension does not match the model")
            base = HistoryFunction.from_orbit(orbit, model.N)
        else:
            orbit = None
            base = HistoryFunction.constant(_default_history(model, s.state))
        if s.kind == "orbit":
            if orbit is None:
                raise CliError(EXIT_CONFIG, "orbit seeds need task.orbit", field="task.orbit")
            hist = base if s.q is None or s.amplitude == 0 else perturb_mode(orbit, model.N, s.q, s.amplitude)
        else:
            hist = random_history(base, s.amplitude, s.seed)
    sim = integrate(model, hist, cfg.task.t_end, _sim_dt(cfg, model), cfg.numerics.dt_out)
    _write(out / "simulation.csv", sim.to_csv())
    result = {}
    if cfg.task.classify and model.N > 1:
        try:
            label = classify_pattern(sim)
            result = label.to_dict()
            print(f"pattern={label}")
        except (NoOscillation, ValueError) as exc:
            result = {"kind": None, "error": str(exc)}
            print(f"pattern=unclassified ({exc})")
        _write(out / "pattern.json", json.dumps(result, indent=1, default=float))
    return result


def cmd_verify(cfg: ExperimentConfig, cfg_path: str, out: Path) -> dict:
    model = cfg.build_model()
    orbit = _read_orbit(cfg, cfg_path, cfg.task.orbit)
    if orbit.p != model.p:
        raise CliError(EXIT_MISMATCH, "orbit dimension does not match the model")
    dev = verify_orbit(orbit, model, periods=cfg.task.periods)
    doc = {"T": orbit.T, "periods": cfg.task.periods, "max_deviation": dev}
    _write(out / "verify.json", json.dumps(doc, indent=1))
    print(f"max_deviation={dev:.6e} over {cfg.task.periods:g} periods")
    return doc


COMMANDS = {
    "solve": cmd_solve,
    "spectrum": cmd_spectrum,
    "continue": cmd_continue,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delayhb", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment JSON file")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted config path override, repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fail(code: int, kind: str, message: str, **context) -> int:
    doc = {"error": kind, "exit_code": code, "message": message}
    doc.update(context)
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.override)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, args.config, out)
    except CliError as exc:
        return _fail(exc.code, "CliError", str(exc), **exc.context)
    except CollapsedToEquilibrium as exc:
        return _fail(EXIT_COLLAPSED, type(exc).__name__, str(exc))
    except HBError as exc:
        return _fail(EXIT_NO_CONVERGENCE, type(exc).__name__, str(exc))
    except cont.FirstStepFailed as exc:
        return _fail(EXIT_FIRST_STEP, type(exc).__name__, str(exc))
    except NonFiniteState as exc:
        return _fail(EXIT_NON_FINITE, type(exc).__name__, str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
