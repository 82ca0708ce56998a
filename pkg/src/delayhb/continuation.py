"""Pseudo-arclength continuation of harmonic-balance orbits in one parameter.

The unknown vector is ``z = (X, T, p)``.  Distances along the branch use the
weighted norm with scales ``(1, 1/T0, 1)`` so that the many sample entries do
not swamp the period and the parameter.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .floquet import UNSTABLE_THRESHOLD, StabilityOperator, max_real_root, spectrum
from .model import NodeModel
from .solver import HBError, HBProblem, NewtonSettings, hb_jacobian, hb_residual, newton
from .spectral import OrbitSolution

__all__ = [
    "ContinuationError",
    "FirstStepFailed",
    "StepUnderflow",
    "StepSettings",
    "MonitorSettings",
    "BranchPoint",
    "StabilityEvent",
    "Branch",
    "model_with_param",
    "model_param",
    "make_point",
    "continue_branch",
    "detect_stability_events",
    "write_branch_csv",
    "branch_to_json",
]

log = logging.getLogger(__name__)


class ContinuationError(RuntimeError):
    pass


class FirstStepFailed(ContinuationError):
    pass


class StepUnderflow(ContinuationError):
    def __init__(self, msg, branch=None):
        super().__init__(msg)
        self.branch = branch


@dataclass(frozen=True)
class StepSettings:
    ds0: float = 0.02
    ds_max: float = 0.2
    max_halvings: int = 6
    grow: float = 1.3
    grow_after: int = 4
    max_points: int = 5000
    newton: NewtonSettings = field(default_factory=lambda: NewtonSettings(max_iter=15))
    param_fd_step: float = 1e-6
    on_underflow: str = "stop"  # or "raise"

    def __post_init__(self):
        if not 0 < self.ds0 <= self.ds_max:
            raise ValueError("need 0 < ds0 <= ds_max")
        if self.on_underflow not in ("stop", "raise"):
            raise ValueError("on_underflow must be 'stop' or 'raise'")

    @property
    def ds_min(self) -> float:
        return self.ds0 / 2**self.max_halvings


@dataclass(frozen=True)
class MonitorSettings:
    """How exponents are computed along a branch."""

    enabled: bool = True
    real_interval: tuple = (-3.0, 1.0)
    n_real: int = 400
    full_scan_every: int = 10
    resolution: tuple = (81, 41)
    threshold: float = UNSTABLE_THRESHOLD


@dataclass
class BranchPoint:
    param: float
    orbit: OrbitSolution
    max_exponents: list = field(default_factory=list)  # FloquetExponent or None per q
    stable: bool | None = None
    is_fold: bool = False
    full_scan: bool = False

    def max_re(self, q: int) -> float:
        e = self.max_exponents[q]
        return -np.inf if e is None else e.real


@dataclass
class StabilityEvent:
    q: int
    param_lo: float
    param_hi: float
    kind: str  # "loss" (becomes unstable with the branch direction) or "gain"
    index: int  # branch segment [index, index + 1]
    param: float = float("nan")
    exponent: float = float("nan")

    def to_dict(self) -> dict:
        return {"q": self.q, "param": self.param, "param_lo": self.param_lo,
                "param_hi": self.param_hi, "kind": self.kind, "index": self.index,
                "exponent": self.exponent}


@dataclass
class Branch:
    param_name: str
    points: list
    folds: list = field(default_factory=list)
    events: list = field(default_factory=list)
    termination: str = ""

    @property
    def params(self) -> np.ndarray:
        return np.array([pt.param for pt in self.points])

    @property
    def periods(self) -> np.ndarray:
        return np.array([pt.orbit.T for pt in self.points])


def model_with_param(model: NodeModel, name: str, value: float) -> NodeModel:
    return model.replace(**{name: float(value)})


def model_param(model: NodeModel, name: str) -> float:
    if name == "tau_inter":
        return model.topology.tau_inter
    if name == "beta":
        return model.beta
    return float(getattr(model.params, name))


def _mode_range(model: NodeModel) -> range:
    return range(model.N // 2 + 1)


def _exponents(orbit: OrbitSolution, model: NodeModel, monitor: MonitorSettings,
               full: bool) -> list:
    out = []
    for q in _mode_range(model):
        op = StabilityOperator(orbit, model, q)
        if full:
            sp = spectrum(op, region=(monitor.real_interval, (0.0, 3 * np.pi / orbit.T)),
                          resolution=monitor.resolution, n_real=monitor.n_real, leading=True)
            best = sp.max if sp.nontrivial else None
        else:
            best, _ = max_real_root(op, monitor.real_interval, monitor.n_real)
        out.append(best)
    return out


def make_point(orbit: OrbitSolution, model: NodeModel, param_name: str = "tau_inter",
               monitor: MonitorSettings | None = None, full: bool = True) -> BranchPoint:
    """Branch point with its per-mode maximal exponents and stability verdict."""
    monitor = monitor or MonitorSettings()
    pt = BranchPoint(model_param(model, param_name), orbit)
    if monitor.enabled:
        _fill_exponents(pt, model, monitor, full)
    return pt


def _fill_exponents(pt: BranchPoint, model: NodeModel, monitor: MonitorSettings, full: bool):
    pt.max_exponents = _exponents(pt.orbit, model, monitor, full)
    pt.full_scan = full
    pt.stable = all(pt.max_re(q) <= monitor.threshold for q in range(len(pt.max_exponents)))


class _Augmented:
    """Residual and Jacobian of the orbit equations extended by the parameter."""

    def __init__(self, problem: HBProblem, name: str, steps: StepSettings, scale: np.ndarray):
        self.problem, self.name, self.steps, self.scale = problem, name, steps, scale

    def problem_at(self, value: float) -> HBProblem:
        return self.problem.with_model(model_with_param(self.problem.model, self.name, value))

    def system(self, z, anchor, tangent, ds):
        prob = self.problem_at(z[-1])
        res, J = hb_jacobian(z[:-2], z[-2], prob)
        h = self.steps.param_fd_step * max(1.0, abs(z[-1]))
        col = (hb_residual(z[:-2], z[-2], self.problem_at(z[-1] + h))
               - hb_residual(z[:-2], z[-2], self.problem_at(z[-1] - h))) / (2 * h)
        n = z.size
        R = np.empty(n)
        R[:-1] = res
        w = self.scale * tangent
        R[-1] = np.dot(self.scale * (z - anchor), tangent) - ds
        JJ = np.empty((n, n))
        JJ[:-1, :-1] = J
        JJ[:-1, -1] = col
        JJ[-1] = w
        return R, JJ

    def correct(self, pred, anchor, tangent, ds):
        fun = lambda z: self.system(z, anchor, tangent, ds)
        # the period stays positive, and so does the parameter when it is a delay
        keep = [pred.size - 2] + ([pred.size - 1] if self.name.startswith("tau") else [])
        z, norm, _ = newton(fun, pred, self.steps.newton, positive_index=keep)
        return z, norm

    def wnorm(self, dz) -> float:
        return float(np.linalg.norm(self.scale * dz))


def _unit(v, scale):
    """Tangent expressed in scaled coordinates, unit length."""
    w = scale * v
    return w / np.linalg.norm(w)


def continue_branch(start: BranchPoint, model: NodeModel, direction: int, param_range,
                    steps: StepSettings | None = None, param_name: str = "tau_inter",
                    monitor: MonitorSettings | None = None, M: int | None = None) -> Branch:
    """Trace the synchronous orbit family through ``start`` until the parameter
    leaves ``param_range``.

    ``model`` supplies every parameter except the continued one, which is
    taken from ``start.param``.
    """
    steps = steps or StepSettings()
    monitor = monitor or MonitorSettings()
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    lo, hi = sorted(map(float, param_range))
    if not lo <= start.param <= hi:
        raise ValueError(f"start parameter {start.param} outside range [{lo}, {hi}]")
    orbit = start.orbit
    model = model_with_param(model, param_name, start.param)
    problem = HBProblem.create(model, orbit.M if M is None else M, wave_mode=orbit.wave_mode)
    if start.stable is None and monitor.enabled:
        _fill_exponents(start, model, monitor, True)
    scale = np.ones(orbit.X.size + 2)
    scale[-2] = 1.0 / orbit.T
    aug = _Augmented(problem, param_name, steps, scale)

    branch = Branch(param_name, [start])
    if lo == hi:
        branch.termination = "empty_range"
        return branch

    z_prev = np.concatenate([orbit.X, [orbit.T, start.param]])
    tangent = np.zeros_like(z_prev)
    tangent[-1] = direction  # first step: parameter increment
    first = True
    ds = steps.ds0
    dp = ds  # parameter increment of the first step
    successes = 0
    while len(branch.points) < steps.max_points:
        step = dp if first else ds
        pred = z_prev + step * tangent / scale
        try:
            z, norm = aug.correct(pred, z_prev, tangent, step)
            dist = aug.wnorm(z - z_prev)
            if first and dist > 2 * ds and dp > ds * 1e-6:
                # the state moves faster than the parameter; shrink the
                # increment until the first chord respects the step bound
                dp *= 0.9 * ds / dist
                continue
            if dist > 2 * ds:
                raise HBError("corrector left the arclength bound")
        except HBError as exc:
            dp *= 0.5
            ds *= 0.5
            successes = 0
            log.debug("step rejected at param=%.6g (%s); ds -> %.3g", z_prev[-1], exc, ds)
            if ds < steps.ds_min * (1 - 1e-12):
                msg = f"step size underflow at param={z_prev[-1]:.6g}"
                if first:
                    raise FirstStepFailed(msg) from exc
                branch.termination = "step_underflow"
                if steps.on_underflow == "raise":
                    raise StepUnderflow(msg, branch) from exc
                log.warning(msg)
                break
            continue
        if not lo <= z[-1] <= hi:
            branch.termination = "left_range"
            break
        new_orbit = OrbitSolution(T=float(z[-2]), M=orbit.M, p=orbit.p, X=z[:-2],
                                  residual_norm=float(norm), wave_mode=orbit.wave_mode)
        pt = BranchPoint(float(z[-1]), new_orbit)
        if monitor.enabled:
            full = len(branch.points) % monitor.full_scan_every == 0
            _fill_exponents(pt, model_with_param(model, param_name, pt.param), monitor, full)
        branch.points.append(pt)
        log.info("point %d: %s=%.6g T=%.6g stable=%s", len(branch.points) - 1, param_name,
                 pt.param, pt.orbit.T, pt.stable)
        tangent = _unit(z - z_prev, scale)
        z_prev = z
        first = False
        successes += 1
        if successes >= steps.grow_after:
            ds = min(ds * steps.grow, steps.ds_max)
            successes = 0
    else:
        branch.termination = "max_points"
    _mark_folds(branch)
    if monitor.enabled:
        branch.events = detect_stability_events(branch, model, monitor, steps)
    return branch


def _mark_folds(branch: Branch) -> None:
    p = branch.params
    dp = np.diff(p)
    folds = []
    for i in range(1, len(dp)):
        if dp[i - 1] * dp[i] < 0:
            folds.append(i)
            branch.points[i].is_fold = True
    branch.folds = folds


def _point_on_segment(branch: Branch, i: int, s: float, model: NodeModel,
                      steps: StepSettings) -> OrbitSolution | None:
    """Orbit on the branch between points ``i`` and ``i + 1`` at fraction ``s``
    of the chord, found with a chord-normal constraint (fold-safe)."""
    a, b = branch.points[i], branch.points[i + 1]
    za = np.concatenate([a.orbit.X, [a.orbit.T, a.param]])
    zb = np.concatenate([b.orbit.X, [b.orbit.T, b.param]])
    scale = np.ones(za.size)
    scale[-2] = 1.0 / a.orbit.T
    aug = _Augmented(HBProblem.create(model, a.orbit.M), branch.param_name, steps, scale)
    tangent = _unit(zb - za, scale)
    length = aug.wnorm(zb - za)
    try:
        z, norm = aug.correct(za + s * (zb - za), za, tangent, s * length)
    except HBError:
        return None
    orbit = OrbitSolution(T=float(z[-2]), M=a.orbit.M, p=a.orbit.p, X=z[:-2],
                          residual_norm=float(norm))
    orbit.meta["param"] = float(z[-1])
    return orbit


def detect_stability_events(branch: Branch, model: NodeModel,
                            monitor: MonitorSettings | None = None,
                            steps: StepSettings | None = None, width: float = 0.01,
                            refine: bool = True) -> list:
    """Segments where some mode's maximal real part crosses the threshold,
    bisected along the branch until the parameter bracket is at most ``width``."""
    monitor = monitor or MonitorSettings()
    steps = steps or StepSettings()
    pts = branch.points
    if not pts or not pts[0].max_exponents:
        return []
    events = []
    full_re: dict = {}

    def verdict(k, q):
        """Stability of mode q at point k, from a full scan when refining."""
        pt = pts[k]
        if not refine or pt.full_scan:
            return pt.max_re(q) > monitor.threshold
        if (k, q) not in full_re:
            m = model_with_param(model, branch.param_name, pt.param)
            full_re[k, q] = _mode_max(pt.orbit, m, q, monitor)
        return full_re[k, q] > monitor.threshold

    for i in range(len(pts) - 1):
        for q in range(len(pts[i].max_exponents)):
            ua = pts[i].max_re(q) > monitor.threshold
            ub = pts[i + 1].max_re(q) > monitor.threshold
            if ua == ub:
                continue
            # a complex pair seen only at a fully scanned end is not a crossing
            ua, ub = verdict(i, q), verdict(i + 1, q)
            if ua == ub:
                continue
            ev = StabilityEvent(q, min(pts[i].param, pts[i + 1].param),
                                max(pts[i].param, pts[i + 1].param),
                                "loss" if ub else "gain", i)
            if refine:
                _bisect_event(ev, branch, model, monitor, steps, width)
            else:
                ev.param = 0.5 * (ev.param_lo + ev.param_hi)
            events.append(ev)
    return events


def _mode_max(orbit, model, q, monitor):
    op = StabilityOperator(orbit, model, q)
    sp = spectrum(op, region=(monitor.real_interval, (0.0, 3 * np.pi / orbit.T)),
                  resolution=monitor.resolution, n_real=monitor.n_real, leading=True)
    return sp.max.real if sp.nontrivial else -np.inf


def _bisect_event(ev, branch, model, monitor, steps, width):
    i, q = ev.index, ev.q
    pa, pb = branch.points[i].param, branch.points[i + 1].param
    ua = ev.kind == "gain"  # unstable at the start of the segment
    sa, sb = 0.0, 1.0
    val = np.nan
    for _ in range(40):
        if abs(pb - pa) <= width:
            break
        s = 0.5 * (sa + sb)
        orbit = _point_on_segment(branch, i, s, model, steps)
        if orbit is None:
            log.warning("event bisection failed on segment %d", i)
            break
        pm = orbit.meta["param"]
        re = _mode_max(orbit, model_with_param(model, branch.param_name, pm), q, monitor)
        if (re > monitor.threshold) == ua:
            sa, pa = s, pm
        else:
            sb, pb = s, pm
            val = re
    ev.param_lo, ev.param_hi = min(pa, pb), max(pa, pb)
    ev.param = 0.5 * (pa + pb)
    ev.exponent = float(val)


def write_branch_csv(branch: Branch, stream) -> None:
    n_q = max((len(pt.max_exponents) for pt in branch.points), default=0)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["index", "param", "T", "orbit_amplitude"]
                    + [f"maxRe_q{q}" for q in range(n_q)] + ["stable", "is_fold"])
    for k, pt in enumerate(branch.points):
        res = [f"{pt.max_re(q):.10g}" if q < len(pt.max_exponents) else "" for q in range(n_q)]
        stable = "" if pt.stable is None else int(pt.stable)
        writer.writerow([k, f"{pt.param:.10g}", f"{pt.orbit.T:.10g}", f"{pt.orbit.amplitude:.10g}"]
                        + res + [stable, int(pt.is_fold)])


def branch_to_json(branch: Branch, embed_orbits: bool = False) -> str:
    from .spectral import orbit_to_json

    def exps(pt):
        return [None if e is None else e.to_dict() for e in pt.max_exponents]

    doc = {
        "param_name": branch.param_name,
        "termination": branch.termination,
        "folds": branch.folds,
        "fold_params": [branch.points[i].param for i in branch.folds],
        "events": [e.to_dict() for e in branch.events],
        "points": [],
    }
    for k, pt in enumerate(branch.points):
        d = {"index": k, "param": pt.param, "T": pt.orbit.T, "stable": pt.stable,
             "max_exponents": exps(pt)}
        if embed_orbits:
            d["orbit"] = json.loads(orbit_to_json(pt.orbit))
        doc["points"].append(d)
    return json.dumps(doc, indent=1)
