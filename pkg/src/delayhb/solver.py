"""Harmonic-balance residual and damped Newton solver for periodic orbits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import find_peaks

from .model import NodeModel, sigmoid, sigmoid_derivative
from .spectral import OrbitSolution, SpectralBasis, build_basis, diff_matrix, shift_matrix

if TYPE_CHECKING:  # pragma: no cover
    from .simulate import SimulationResult

__all__ = [
    "HBError",
    "NoConvergence",
    "CollapsedToEquilibrium",
    "SingularJacobian",
    "NoOscillationDetected",
    "HBProblem",
    "NewtonSettings",
    "hb_residual",
    "hb_jacobian",
    "solve_orbit",
    "solve_travelling_wave",
    "initial_guess_from_simulation",
]

log = logging.getLogger(__name__)

HARMONIC_CONTENT_MIN = 1e-8


class HBError(RuntimeError):
    pass


class NoConvergence(HBError):
    pass


class CollapsedToEquilibrium(HBError):
    def __init__(self, msg, orbit=None):
        super().__init__(msg)
        self.orbit = orbit


class SingularJacobian(HBError):
    pass


class NoOscillationDetected(HBError):
    pass


@dataclass(frozen=True)
class HBProblem:
    model: NodeModel
    basis: SpectralBasis
    wave_mode: int = 0
    phase_component: int = 0

    def __post_init__(self):
        if self.basis.p != self.model.p:
            raise ValueError("basis dimension does not match the model")
        if self.wave_mode and self.model.topology is None:
            raise ValueError("travelling waves need a ring topology")
        if not 0 <= self.wave_mode < self.model.N:
            raise ValueError(f"wave_mode must lie in 0..{self.model.N - 1}")
        if not 0 <= self.phase_component < self.model.p:
            raise ValueError("phase_component out of range")

    @classmethod
    def create(cls, model: NodeModel, M: int, wave_mode: int = 0, phase_component: int = 0):
        return cls(model, build_basis(M, model.p), wave_mode, phase_component)

    @property
    def size(self) -> int:
        return self.basis.K * self.basis.p + 1

    def with_model(self, model: NodeModel) -> "HBProblem":
        return replace(self, model=model)

    def wave_phases(self) -> np.ndarray:
        """Per-offset phase rotation ``2 pi q k / N`` of the travelling-wave ansatz."""
        N = self.model.N
        return 2 * np.pi * self.wave_mode * np.arange(N) / N


@dataclass(frozen=True)
class NewtonSettings:
    tol_residual: float = 1e-10
    max_iter: int = 50
    damping: float = 0.5
    min_step: float = 1e-4
    jacobian: str = "analytic"

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.jacobian not in ("analytic", "fd"):
            raise ValueError("jacobian must be 'analytic' or 'fd'")


def _operators(T: float, problem: HBProblem):
    basis = problem.basis
    DL = diff_matrix(T, basis)
    phases = problem.wave_phases()
    Dk = np.stack([shift_matrix(tau, T, basis, ph)
                   for tau, ph in zip(problem.model.delays, phases)])
    return DL, Dk


def _evaluate(X, T, problem: HBProblem):
    model, basis = problem.model, problem.basis
    Xb = np.asarray(X, dtype=float).reshape(basis.K, basis.p)
    DL, Dk = _operators(T, problem)
    delayed = np.einsum("knm,mp->nkp", Dk, Xb)  # (K, n_delays, p)
    chi = model.drive + np.einsum("kab,nkb->na", model.coupling, delayed)
    dX = DL @ Xb
    G = model.upsilon * (-Xb + sigmoid(chi, model.beta))
    return Xb, DL, Dk, delayed, chi, dX, G


def hb_residual(X, T: float, problem: HBProblem) -> np.ndarray:
    """Dynamic block ``S L S^-1 X - G(...)`` followed by the phase condition
    (the spectral derivative of the pinned component at ``t = 0``)."""
    if not T > 0:
        raise ValueError("period must be positive")
    Xb, DL, Dk, delayed, chi, dX, G = _evaluate(X, T, problem)
    res = np.empty(problem.size)
    res[:-1] = (dX - G).ravel()
    res[-1] = dX[problem.basis.M, problem.phase_component]
    return res


def _blockdiag_times(blocks, D):
    """``blockdiag(blocks[n]) @ (D kron I_p)`` as a dense matrix."""
    K, p, _ = blocks.shape
    return np.einsum("nab,nm->namb", blocks, D).reshape(K * p, K * p)


def hb_jacobian(X, T: float, problem: HBProblem) -> tuple[np.ndarray, np.ndarray]:
    """Residual and its analytic Jacobian with respect to ``(X, T)``."""
    model, basis = problem.model, problem.basis
    K, p = basis.K, basis.p
    Xb, DL, Dk, delayed, chi, dX, G = _evaluate(X, T, problem)
    res = np.empty(problem.size)
    res[:-1] = (dX - G).ravel()
    res[-1] = dX[basis.M, problem.phase_component]

    n = K * p
    ups = model.upsilon
    dF = sigmoid_derivative(chi, model.beta)  # (K, p)
    J = np.zeros((n + 1, n + 1))
    Jx = J[:n, :n]
    Jx += np.kron(DL, np.eye(p))
    Jx[np.diag_indices(n)] += np.tile(ups, K)
    dT = -dX / T
    for k, B in enumerate(model.coupling):
        if not B.any():
            continue
        blocks = (ups * dF)[:, :, None] * B  # Upsilon W_k(t_n)
        Jx -= _blockdiag_times(blocks, Dk[k])
        tau = model.delays[k]
        if tau:
            dT -= np.einsum("nab,nb->na", blocks, (tau / T) * (DL @ delayed[:, k, :]))
    J[:n, n] = dT.ravel()
    c = problem.phase_component
    J[n, c:n:p] = DL[basis.M]
    J[n, n] = -res[-1] / T
    return res, J


def _fd_jacobian(z, problem: HBProblem, h: float = 1e-7):
    f0 = hb_residual(z[:-1], z[-1], problem)
    J = np.empty((f0.size, z.size))
    for j in range(z.size):
        step = h * max(1.0, abs(z[j]))
        zp = z.copy()
        zp[j] += step
        zm = z.copy()
        zm[j] -= step
        J[:, j] = (hb_residual(zp[:-1], zp[-1], problem) - hb_residual(zm[:-1], zm[-1], problem)) / (2 * step)
    return f0, J


def newton(fun, z0, settings: NewtonSettings, positive_index=None):
    """Damped Newton iteration on ``fun(z) -> (residual, jacobian)``.

    Entries of ``z`` listed in ``positive_index`` must stay positive during
    the line search.  Returns ``(z, residual_norm, iterations)``.
    """
    z = np.array(z0, dtype=float)
    res, J = fun(z)
    norm = np.max(np.abs(res))
    for it in range(settings.max_iter + 1):
        if not np.isfinite(norm):
            raise NoConvergence("residual became non-finite")
        if norm < settings.tol_residual:
            return z, norm, it
        if it == settings.max_iter:
            break
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("Newton step is not finite")
        alpha = 1.0
        while True:
            trial = z + alpha * step
            if positive_index is None or np.all(trial[positive_index] > 0):
                res_t, J_t = fun(trial)
                norm_t = np.max(np.abs(res_t))
                if np.isfinite(norm_t) and norm_t < norm:
                    break
            alpha *= settings.damping
            if alpha < settings.min_step:
                raise NoConvergence(
                    f"line search failed at iteration {it} (residual {norm:.3e})")
        z, res, J, norm = trial, res_t, J_t, norm_t
        log.debug("newton it=%d |R|=%.3e alpha=%.3g", it, norm, alpha)
    raise NoConvergence(f"no convergence after {settings.max_iter} iterations (residual {norm:.3e})")


def solve_orbit(guess, problem: HBProblem, settings: NewtonSettings | None = None) -> OrbitSolution:
    """Solve the harmonic-balance system for ``(X, T)`` starting from ``guess``."""
    settings = settings or NewtonSettings()
    X0, T0 = guess
    X0 = np.asarray(X0, dtype=float).ravel()
    if X0.size != problem.size - 1:
        raise ValueError(f"guess has {X0.size} samples, expected {problem.size - 1}")
    if not T0 > 0:
        raise ValueError("guess period must be positive")

    if settings.jacobian == "analytic":
        fun = lambda z: hb_jacobian(z[:-1], z[-1], problem)
    else:
        fun = lambda z: _fd_jacobian(z, problem)
    z0 = np.append(X0, T0)
    if np.max(np.abs(hb_residual(X0, T0, problem))) >= settings.tol_residual:
        z, norm, iters = newton(fun, z0, settings, positive_index=z0.size - 1)
    else:
        z, norm, iters = z0, np.max(np.abs(hb_residual(X0, T0, problem))), 0
    orbit = OrbitSolution(T=float(z[-1]), M=problem.basis.M, p=problem.basis.p, X=z[:-1],
                          residual_norm=float(norm), wave_mode=problem.wave_mode,
                          meta={"iterations": iters})
    if orbit.harmonic_content <= HARMONIC_CONTENT_MIN:
        raise CollapsedToEquilibrium(
            f"converged to an equilibrium (harmonic content {orbit.harmonic_content:.2e})", orbit)
    return orbit


def solve_travelling_wave(q: int, guess, problem: HBProblem,
                          settings: NewtonSettings | None = None) -> OrbitSolution:
    """Orbit of the wave ansatz ``x_j(t) = x(t + j q T / N)``."""
    if problem.model.topology is None:
        raise ValueError("travelling waves need a ring topology")
    if not 1 <= q <= problem.model.N - 1:
        raise ValueError(f"wave mode must lie in 1..{problem.model.N - 1}")
    return solve_orbit(guess, replace(problem, wave_mode=q), settings)


def initial_guess_from_simulation(model: NodeModel, sim: "SimulationResult", M: int,
                                  phase_component: int = 0, node: int = 0,
                                  tail: float = 0.5) -> tuple[np.ndarray, float]:
    """Period and samples of the last full oscillation of a simulated node.

    ``t = 0`` of the returned samples sits on a maximum of ``phase_component``
    so the phase condition is nearly satisfied.
    """
    t = sim.times
    states = sim.node_states(node)
    keep = t >= t[0] + (1 - tail) * (t[-1] - t[0])
    t, states = t[keep], states[keep]
    x = states[:, phase_component]
    span = x.max() - x.min()
    if not span > 1e-6:
        raise NoOscillationDetected(f"peak-to-peak amplitude {span:.2e} in the simulation tail")
    peaks, _ = find_peaks(x, prominence=0.25 * span)
    if len(peaks) < 3:
        raise NoOscillationDetected("fewer than three oscillation peaks in the simulation tail")
    # parabolic refinement of the peak times
    dt = t[1] - t[0]
    inner = peaks[(peaks > 0) & (peaks < len(x) - 1)]
    y0, y1, y2 = x[inner - 1], x[inner], x[inner + 1]
    denom = y0 - 2 * y1 + y2
    shift = np.where(denom != 0, 0.5 * (y0 - y2) / np.where(denom != 0, denom, 1), 0.0)
    tp = t[inner] + shift * dt
    T = float(np.mean(np.diff(tp)))
    spline = CubicSpline(t, states, axis=0)
    K = 2 * M + 1
    offsets = T * np.arange(-M, M + 1) / K
    candidates = [c for c in tp if c - T / 2 >= t[0] and c + T / 2 <= t[-1]]
    if not candidates:
        raise NoOscillationDetected("simulation tail shorter than one period")
    X = spline(candidates[-1] + offsets)
    return X.ravel(), T
