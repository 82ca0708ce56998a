"""Synchronous equilibria of ring networks and their characteristic roots.

Used to locate the Hopf points where a synchronous oscillation is born,
which is how unstated node parameters are calibrated.  Rightmost roots come
from a Chebyshev collocation of the infinitesimal generator of the
linearised delay equation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, fsolve

from .model import NodeModel, preactivation, sigmoid, sigmoid_derivative

__all__ = [
    "synchronous_equilibrium",
    "characteristic_matrix",
    "rightmost_roots",
    "HopfPoint",
    "find_hopf",
]


def _residual(model: NodeModel, x):
    delayed = np.tile(x, (model.n_delays, 1))
    return -x + sigmoid(preactivation(model, delayed), model.beta)


def synchronous_equilibrium(model: NodeModel, guess=None) -> np.ndarray:
    """Equilibrium shared by all nodes. The scalar case is bracketed on [0, 1]
    and rejects multiple equilibria; larger states use ``fsolve``."""
    if model.p == 1:
        f = lambda x: _residual(model, np.array([x]))[0]
        grid = np.linspace(0.0, 1.0, 2001)
        vals = np.array([f(x) for x in grid])
        idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
        roots = sorted({round(brentq(f, grid[i], grid[i + 1], xtol=1e-15), 13) for i in idx})
        if len(roots) != 1:
            raise ValueError(f"expected a unique equilibrium, found {len(roots)}")
        return np.array(roots)
    x0 = np.full(model.p, 0.5) if guess is None else np.asarray(guess, dtype=float)
    x, info, ok, msg = fsolve(lambda x: _residual(model, x), x0, xtol=1e-14, full_output=True)
    # fsolve reports "no further improvement" once it sits on the root
    if np.max(np.abs(_residual(model, x))) > 1e-12:
        raise ValueError(f"equilibrium solve failed: {msg}")
    return x


def _linear_terms(model: NodeModel, xstar, q: int):
    delayed = np.tile(xstar, (model.n_delays, 1))
    dF = sigmoid_derivative(preactivation(model, delayed), model.beta)
    ups = model.upsilon
    omega_q = np.exp(2j * np.pi * q / model.N)
    coeffs = []
    for k, B in enumerate(model.coupling):
        if B.any():
            coeffs.append((model.delays[k], omega_q**k * (ups * dF)[:, None] * B))
    return -np.diag(ups), coeffs


def characteristic_matrix(model: NodeModel, lam: complex, q: int = 0, xstar=None) -> np.ndarray:
    """``lam I + Y - sum_k w_q^k e^{-lam tau_k} Y F'(chi*) B_k`` at the equilibrium."""
    xstar = synchronous_equilibrium(model) if xstar is None else xstar
    L0, coeffs = _linear_terms(model, xstar, q)
    E = lam * np.eye(model.p) - L0
    for tau, A in coeffs:
        E = E - np.exp(-lam * tau) * A
    return E


def _cheb(n: int):
    x = np.cos(np.pi * np.arange(n + 1) / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1 / c) / (dX + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    return x, D


def _bary_row(nodes, target):
    n = len(nodes) - 1
    w = (-1.0) ** np.arange(n + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    diff = target - nodes
    hit = np.isclose(diff, 0.0, atol=1e-14)
    if hit.any():
        row = np.zeros(n + 1)
        row[np.argmax(hit)] = 1.0
        return row
    t = w / diff
    return t / t.sum()


def rightmost_roots(model: NodeModel, q: int = 0, n: int = 60, xstar=None, count: int = 6):
    """Approximate rightmost characteristic roots of mode ``q`` by collocating
    the delay equation's generator on ``n + 1`` Chebyshev points."""
    xstar = synchronous_equilibrium(model) if xstar is None else xstar
    L0, coeffs = _linear_terms(model, xstar, q)
    p = model.p
    tau_max = max([tau for tau, _ in coeffs] + [1e-3])
    x, D = _cheb(n)
    theta = tau_max * (x - 1) / 2  # theta[0] = 0, theta[-1] = -tau_max
    D = D * (2 / tau_max)
    G = np.kron(D, np.eye(p)).astype(complex)
    top = np.zeros((p, (n + 1) * p), dtype=complex)
    top[:, :p] += L0
    for tau, A in coeffs:
        row = _bary_row(theta, -tau)
        top += np.kron(row[None, :], A)
    G[:p] = top
    ev = np.linalg.eigvals(G)
    ev = ev[np.argsort(-ev.real)]
    return ev[:count]


@dataclass
class HopfPoint:
    param: float
    omega: float
    q: int


def find_hopf(model: NodeModel, param_values, q: int = 0, param: str = "tau_inter",
              n: int = 60) -> list:
    """Parameter values where the rightmost root of mode ``q`` crosses the
    imaginary axis with non-zero frequency, bracketed on ``param_values`` and
    refined by bisection on the collocated spectrum."""
    def lead(v):
        ev = rightmost_roots(model.replace(**{param: float(v)}), q, n)
        return ev[0]

    vals = [lead(v) for v in param_values]
    out = []
    for a, b, la, lb in zip(param_values[:-1], param_values[1:], vals[:-1], vals[1:]):
        if np.sign(la.real) == np.sign(lb.real):
            continue
        f = lambda v: lead(v).real
        v = brentq(f, a, b, xtol=1e-8)
        ev = lead(v)
        if abs(ev.imag) > 1e-6:
            out.append(HopfPoint(float(v), float(abs(ev.imag)), q))
    return out
