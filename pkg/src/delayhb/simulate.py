"""Direct integration of delayed ring networks and pattern classification.

The integrator is a fixed-step classical Runge-Kutta scheme.  Delayed states
are read from the stored solution through cubic Hermite interpolation using
the derivative recorded at every grid point, so the scheme keeps fourth-order
accuracy as long as discontinuities of the history derivative fall on the
grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import NodeModel
from .spectral import OrbitSolution

__all__ = [
    "SimulationError",
    "NonFiniteState",
    "StepTooLarge",
    "NoOscillation",
    "HistoryFunction",
    "SimulationResult",
    "PatternLabel",
    "ClassifierSettings",
    "integrate_dde",
    "integrate",
    "perturb_mode",
    "random_history",
    "classify_pattern",
    "verify_orbit",
    "circulant_eigenvector",
]


class SimulationError(RuntimeError):
    pass


class NonFiniteState(SimulationError):
    pass


class StepTooLarge(SimulationError):
    pass


class NoOscillation(SimulationError):
    pass


@dataclass
class HistoryFunction:
    """Initial data on ``[-tau_max, 0]``.

    ``value(t)`` and ``derivative(t)`` take an array of times and return an
    array of shape ``t.shape + state_shape``.
    """

    value: Callable
    derivative: Callable
    state_shape: tuple

    @classmethod
    def constant(cls, state) -> "HistoryFunction":
        state = np.array(state, dtype=float)
        shape = state.shape

        def value(t):
            t = np.asarray(t, dtype=float)
            return np.broadcast_to(state, t.shape + shape).copy()

        def derivative(t):
            t = np.asarray(t, dtype=float)
            return np.zeros(t.shape + shape)

        return cls(value, derivative, shape)

    @classmethod
    def from_orbit(cls, orbit: OrbitSolution, N: int = 1, wave_mode: int | None = None) -> "HistoryFunction":
        """Network history following ``orbit``; node j is advanced by
        ``j q T / N`` for a travelling-wave orbit of mode q."""
        q = orbit.wave_mode if wave_mode is None else wave_mode
        offsets = orbit.T * q * np.arange(N) / N

        def make(deriv):
            def fn(t):
                t = np.asarray(t, dtype=float)
                return orbit.evaluate(t[..., None] + offsets, derivative=deriv)
            return fn

        return cls(make(0), make(1), (N, orbit.p))

    def perturbed(self, direction: np.ndarray) -> "HistoryFunction":
        """Add a constant offset (same shape as the state)."""
        direction = np.asarray(direction, dtype=float).reshape(self.state_shape)
        base_value = self.value

        def value(t):
            return base_value(t) + direction

        return HistoryFunction(value, self.derivative, self.state_shape)


@dataclass
class SimulationResult:
    times: np.ndarray
    states: np.ndarray  # (n_t, N, p)
    dt_internal: float
    classification: "PatternLabel | None" = None

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def p(self) -> int:
        return self.states.shape[2]

    def node_states(self, node: int = 0) -> np.ndarray:
        return self.states[:, node, :]

    def flat_states(self) -> np.ndarray:
        return self.states.reshape(len(self.times), -1)

    def to_csv(self) -> str:
        if self.p == 1:
            names = [f"x_{i + 1}" for i in range(self.N)]
        else:
            names = [f"{c}_{i + 1}" for i in range(self.N) for c in ("u", "v")[: self.p]]
        lines = [",".join(["t"] + names)]
        for t, row in zip(self.times, self.flat_states()):
            lines.append(",".join(f"{v:.10g}" for v in (t, *row)))
        return "\n".join(lines) + "\n"


def _hermite_weights(theta: float):
    t2, t3 = theta * theta, theta * theta * theta
    return (2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + theta, -2 * t3 + 3 * t2, t3 - t2)


def integrate_dde(f: Callable, history: HistoryFunction, delays, t_end: float, dt: float,
                  out_every: int = 1, check_step: bool = True) -> SimulationResult:
    """Integrate ``x'(t) = f(x(t), [x(t - tau_k)]_k)`` from ``t = 0`` to ``t_end``.

    ``f`` receives the current state (``history.state_shape``) and a stacked
    array of delayed states with one leading entry per delay.
    """
    delays = np.asarray(delays, dtype=float)
    positive = delays[delays > 0]
    if positive.size and dt > positive.min() / 10 * (1 + 1e-9) and check_step:
        raise StepTooLarge(f"dt={dt} exceeds a tenth of the smallest delay {positive.min()}")
    if positive.size and dt > positive.min() * (1 + 1e-12):
        raise StepTooLarge(f"dt={dt} exceeds the smallest delay {positive.min()}")
    n_steps = int(round(t_end / dt))
    tau_max = delays.max() if delays.size else 0.0
    n_hist = int(math.ceil(tau_max / dt - 1e-9)) + 2
    shape = tuple(history.state_shape)
    total = n_hist + n_steps + 1
    xs = np.zeros((total,) + shape)
    dl = np.zeros_like(xs)
    dr = np.zeros_like(xs)
    t_hist = -dt * np.arange(n_hist, -1, -1)
    xs[: n_hist + 1] = history.value(t_hist)
    dl[: n_hist + 1] = history.derivative(t_hist)
    dr[: n_hist + 1] = dl[: n_hist + 1]

    # Lookup tables: delayed time t_n + c dt - tau = t_{n+j} + theta dt.
    lagged = np.flatnonzero(delays > 0)
    instant = np.flatnonzero(delays <= 0)
    tables = []
    for c in (0.0, 0.5, 1.0):
        s = c - delays[lagged] / dt
        j = np.floor(s + 1e-9).astype(int)
        theta = np.clip(s - j, 0.0, 1.0)
        h00, h10, h01, h11 = (np.array(w).reshape((-1,) + (1,) * len(shape)) for w in _hermite_weights(theta))
        tables.append((j, h00, h10 * dt, h01, h11 * dt))

    n_del = len(delays)
    delayed = np.zeros((n_del,) + shape)

    def gather(n, table, stage_state):
        j, a0, b0, a1, b1 = table
        i0 = n + n_hist + j
        delayed[lagged] = a0 * xs[i0] + b0 * dr[i0] + a1 * xs[i0 + 1] + b1 * dl[i0 + 1]
        if instant.size:
            delayed[instant] = stage_state
        return delayed

    # blow-up is caught by the finiteness check, so silence the overflow noise
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            i = n + n_hist
            x = xs[i]
            k1 = f(x, gather(n, tables[0], x))
            dr[i] = k1
            if n > 0:
                dl[i] = k1
            x2 = x + 0.5 * dt * k1
            k2 = f(x2, gather(n, tables[1], x2))
            x3 = x + 0.5 * dt * k2
            k3 = f(x3, gather(n, tables[1], x3))
            x4 = x + dt * k3
            k4 = f(x4, gather(n, tables[2], x4))
            xn = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(xn)):
                raise NonFiniteState(f"non-finite state at t={(n + 1) * dt:.6g}")
            xs[i + 1] = xn

    idx = np.arange(n_hist, total, out_every)
    times = (idx - n_hist) * dt
    states = xs[idx]
    if states.ndim == 2:
        states = states[:, None, :]
    return SimulationResult(times=times, states=states.reshape(len(times), -1, states.shape[-1]),
                            dt_internal=dt)


def _network_function(model: NodeModel):
    N = model.N
    B = model.coupling
    active = [k for k in range(N) if B[k].any()]
    B_act = B[active]
    kk = np.array(active)[:, None]
    nodes = (np.arange(N)[None, :] + kk) % N
    drive, ups, beta = model.drive, model.upsilon, model.beta
    from scipy.special import expit

    def f(x, delayed):
        gathered = delayed[kk, nodes]  # (n_active, N, p)
        chi = drive + np.einsum("kab,kib->ia", B_act, gathered)
        return ups * (-x + expit(beta * chi))

    return f


def integrate(model: NodeModel, history: HistoryFunction, t_end: float, dt: float,
              dt_out: float | None = None, check_step: bool = True) -> SimulationResult:
    """Simulate the full ring (or single node) defined by ``model``."""
    shape = (model.N, model.p)
    if tuple(history.state_shape) != shape:
        raise ValueError(f"history must have state shape {shape}, got {history.state_shape}")
    out_every = 1 if dt_out is None else max(1, int(round(dt_out / dt)))
    f = _network_function(model)
    return integrate_dde(f, history, model.delays, t_end, dt, out_every=out_every,
                         check_step=check_step)


def circulant_eigenvector(N: int, q: int) -> np.ndarray:
    return np.exp(2j * np.pi * q * np.arange(N) / N) / np.sqrt(N)


def perturb_mode(sync_orbit: OrbitSolution, N: int, q: int, amplitude: float = 1e-3,
                 direction=None) -> HistoryFunction:
    """Synchronous-orbit history plus ``amplitude * Re(e_q) (x) v``.

    ``v`` defaults to the unit vector along the first (excitatory) component.
    """
    if not amplitude > 0:
        raise ValueError("amplitude must be positive")
    if not 0 <= q < N:
        raise ValueError(f"mode must lie in 0..{N - 1}")
    v = np.zeros(sync_orbit.p)
    if direction is None:
        v[0] = 1.0
    else:
        v = np.asarray(direction, dtype=float)
        v = v / np.linalg.norm(v)
    offset = amplitude * np.outer(circulant_eigenvector(N, q).real, v)
    return HistoryFunction.from_orbit(sync_orbit, N, wave_mode=0).perturbed(offset)


def random_history(base: HistoryFunction, amplitude: float, seed: int = 0) -> HistoryFunction:
    rng = np.random.default_rng(seed)
    return base.perturbed(amplitude * rng.standard_normal(base.state_shape))


# ---------------------------------------------------------------- patterns


@dataclass
class PatternLabel:
    kind: str
    q: int | None = None
    count: int | None = None
    period: float = float("nan")
    lags: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in {"synchronous", "travelling_wave", "clusters", "modulated_wave", "irregular"}:
            raise ValueError(f"unknown pattern kind {self.kind}")
        if self.kind == "travelling_wave" and not (self.q and self.q >= 1):
            raise ValueError("travelling_wave requires q >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "q": self.q, "count": self.count, "period": self.period,
                "lags": [float(x) for x in self.lags], "metrics": self.metrics}

    def __str__(self):
        if self.kind == "travelling_wave":
            return f"travelling_wave({self.q})"
        if self.kind == "clusters":
            return f"clusters({self.count})"
        return self.kind


@dataclass(frozen=True)
class ClassifierSettings:
    sync_tol: float = 0.02
    wave_tol: float = 0.05
    cluster_tol: float = 0.02
    drift_tol: float = 0.05
    window_fraction: float = 0.25
    min_periods: int = 5


def _estimate_period(t, x):
    from scipy.signal import find_peaks

    span = x.max() - x.min()
    peaks, _ = find_peaks(x, prominence=0.3 * span)
    if len(peaks) < 2:
        return float("nan")
    return float(np.mean(np.diff(t[peaks])))


def _lag(ref, sig, max_shift):
    """Shift ``s`` in samples maximising ``corr(ref(t - s), sig(t))``, refined
    by a parabola, together with the peak correlation coefficient."""
    ref = ref - ref.mean()
    sig = sig - sig.mean()
    n = len(ref) - max_shift - 1
    seg = sig[max_shift:max_shift + n]
    seg_norm = np.linalg.norm(seg)
    corr = np.empty(max_shift + 1)
    for s in range(max_shift + 1):
        r = ref[max_shift - s:max_shift - s + n]
        corr[s] = seg @ r / (np.linalg.norm(r) * seg_norm + 1e-300)
    i = int(np.argmax(corr))
    lag = float(i)
    if 0 < i < max_shift:
        y0, y1, y2 = corr[i - 1], corr[i], corr[i + 1]
        den = y0 - 2 * y1 + y2
        if den != 0:
            lag += 0.5 * (y0 - y2) / den
    return lag, float(corr[i])


def _wrap(x, T):
    """Signed distance to the nearest multiple of T."""
    return (x + T / 2) % T - T / 2


def _node_lags(t, X, T, component):
    dt = t[1] - t[0]
    max_shift = int(math.ceil(T / dt)) + 1
    ref = X[:, 0, component]
    lags, corrs = [], []
    for j in range(X.shape[1]):
        s, c = _lag(ref, X[:, j, component], max_shift)
        lags.append((s * dt) % T)
        corrs.append(c)
    return np.array(lags), np.array(corrs)


def _cluster(lags, T, tol):
    """Greedy grouping of circular lags; returns group count and assignment."""
    order = np.argsort(lags)
    groups = []
    for j in order:
        for g in groups:
            if abs(_wrap(lags[j] - lags[g[0]], T)) < tol * T:
                g.append(j)
                break
        else:
            groups.append([j])
    return groups


def _neighbour_step(q: int, N: int) -> int | None:
    """Ring distance between nodes one phase step ``T / N`` apart in a mode-q
    wave, i.e. which neighbour fires next; ``None`` when q and N share a factor."""
    try:
        j = pow(q, -1, N)
    except ValueError:
        return None
    return min(j, N - j)


def classify_pattern(result: SimulationResult, settings: ClassifierSettings | None = None,
                     component: int = 0) -> PatternLabel:
    settings = settings or ClassifierSettings()
    t_all = result.times
    start = t_all[-1] - settings.window_fraction * (t_all[-1] - t_all[0])
    keep = t_all >= start
    t, X = t_all[keep], result.states[keep]
    N = X.shape[1]
    amp = X[:, :, component].max(axis=0) - X[:, :, component].min(axis=0)
    if not amp.max() > 1e-6:
        raise NoOscillation(f"oscillation amplitude {amp.max():.2e} below threshold")
    T = _estimate_period(t, X[:, 0, component])
    if not np.isfinite(T):
        raise NoOscillation("could not estimate an oscillation period")
    n_periods = (t[-1] - t[0]) / T
    if n_periods < settings.min_periods:
        raise ValueError(f"classification window holds only {n_periods:.1f} periods")

    lags, corrs = _node_lags(t, X, T, component)
    # lag drift across the two halves of the window
    half = len(t) // 2
    drift = 0.0
    if (t[half] - t[0]) / T >= 2:
        l1, _ = _node_lags(t[:half], X[:half], T, component)
        l2, _ = _node_lags(t[half:], X[half:], T, component)
        drift = float(np.max(np.abs(_wrap(l1 - l2, T))) / T)
    metrics = {
        "max_sync_deviation": float(np.max(np.abs(_wrap(lags, T))) / T),
        "amplitude_dispersion": float(amp.std() / amp.mean()) if amp.mean() > 0 else 0.0,
        "min_correlation": float(corrs.min()),
        "lag_drift": drift,
        "periods_in_window": float(n_periods),
    }

    def label(kind, **kw):
        return PatternLabel(kind=kind, period=T, lags=list(lags), metrics=metrics, **kw)

    if drift > settings.drift_tol:
        return label("modulated_wave" if corrs.min() > 0.5 else "irregular")
    if metrics["max_sync_deviation"] < settings.sync_tol:
        return label("synchronous")
    j = np.arange(N)
    best = None
    for q in range(1, N):
        err = np.max(np.abs(_wrap(lags - j * q * T / N, T))) / T
        if best is None or err < best[1]:
            best = (q, err)
    if best[1] < settings.wave_tol:
        q = best[0]
        metrics["wave_error"] = best[1]
        metrics["direction"] = 1 if q <= N // 2 else -1
        metrics["neighbour_step"] = _neighbour_step(q, N)
        return label("travelling_wave", q=min(q, N - q))
    groups = _cluster(lags, T, settings.cluster_tol)
    if 1 < len(groups) < N:
        metrics["groups"] = [sorted(int(i) for i in g) for g in groups]
        return label("clusters", count=len(groups))
    return label("irregular")


def verify_orbit(orbit: OrbitSolution, model: NodeModel, periods: float = 5.0,
                 dt: float | None = None) -> float:
    """Max deviation between a simulation seeded with the orbit and the orbit itself."""
    if dt is None:
        positive = model.delays[model.delays > 0]
        dt = orbit.T / 400
        if positive.size:
            dt = min(dt, positive.min() / 10)
    history = HistoryFunction.from_orbit(orbit, model.N)
    sim = integrate(model, history, periods * orbit.T, dt)
    expected = history.value(sim.times)
    return float(np.max(np.abs(sim.states - expected)))
