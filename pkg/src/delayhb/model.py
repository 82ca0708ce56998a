"""Node dynamics and ring-network structure.

Every model handled by the package is a delayed sigmoidal rate network

    x_i'(t) = Y * (-x_i(t) + F(I + sum_k B_k x_{i+k}(t - tau_k)))

where ``Y`` is a diagonal time-scale matrix, ``I`` the drive vector, ``B_k``
the ``p x p`` coupling matrix acting on the neighbour at ring offset ``k`` and
``tau_k`` the matching delay.  Offset 0 carries the local (self-delayed) loop.
A single node is the special case ``N = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

__all__ = [
    "SigmoidParams",
    "PrimerParams",
    "WilsonCowanParams",
    "RingTopology",
    "NodeModel",
    "ring_distance",
    "sigmoid",
    "sigmoid_derivative",
    "preactivation",
    "rhs",
    "network_rhs",
    "jacobian_blocks",
]


@dataclass(frozen=True)
class SigmoidParams:
    beta: float = 20.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"sigmoid gain beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class PrimerParams:
    """Scalar DDE ``x' = -x + F(I + w x(t - tau))``."""

    w: float
    I: float
    sigmoid: SigmoidParams = field(default_factory=SigmoidParams)
    tau: float = 2.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"self-delay tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class WilsonCowanParams:
    kappa: float = 0.5
    w_uu: float = 1.0
    w_vu: float = 2.0
    w_uv: float = 1.0
    w_vv: float = 0.25
    I_u: float = -0.05
    I_v: float = -0.3
    sigmoid: SigmoidParams = field(default_factory=SigmoidParams)
    tau0: float = 0.2

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        for name in ("w_uu", "w_vu", "w_uv", "w_vv"):
            if getattr(self, name) < 0:
                raise ValueError(f"local weight {name} must be >= 0")
        if self.tau0 < 0:
            raise ValueError(f"self-delay tau0 must be >= 0, got {self.tau0}")


def ring_distance(i: int, j: int, N: int) -> int:
    d = abs(i - j) % N
    return min(d, N - d)


@dataclass(frozen=True)
class RingTopology:
    """Circulant ring: weight ``weights[k]`` and delay ``dist(k, 0) * tau_inter``
    for the neighbour at offset ``k``."""

    N: int
    eps: float
    weights: tuple
    tau_inter: float

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if len(self.weights) != self.N:
            raise ValueError(f"expected {self.N} weights, got {len(self.weights)}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if any(w < 0 for w in self.weights):
            raise ValueError("ring weights must be >= 0")
        for k in range(1, self.N):
            if abs(self.weights[k] - self.weights[self.N - k]) > 1e-12 * max(1.0, abs(self.weights[k])):
                raise ValueError("ring weights must satisfy w_k = w_{N-k}")
        if not self.tau_inter > 0:
            raise ValueError("tau_inter must be positive")

    @classmethod
    def from_profile(cls, N: int, profile, total: float, tau_inter: float,
                     eps: float = 1.0, self_weight: float = 0.0) -> "RingTopology":
        """Build weights ``w_k = C * profile(dist(k, 0))`` for k >= 1 with C chosen so
        that ``eps * sum_k w_k == total``; ``w_0 = self_weight``."""
        raw = np.array([profile(ring_distance(k, 0, N)) for k in range(1, N)], dtype=float)
        weights = np.zeros(N)
        if N > 1:
            scale = total / eps if eps > 0 else 0.0
            weights[1:] = scale * raw / raw.sum()
        weights[0] = self_weight
        return cls(N=N, eps=eps, weights=tuple(weights), tau_inter=tau_inter)

    @classmethod
    def exp_decay(cls, N: int, rate: float, total: float, tau_inter: float, eps: float = 1.0):
        return cls.from_profile(N, lambda d: np.exp(-rate * d), total, tau_inter, eps)

    @classmethod
    def geometric(cls, N: int, g: float, total: float, tau_inter: float, eps: float = 1.0):
        return cls.from_profile(N, lambda d: g**d, total, tau_inter, eps)

    @property
    def distances(self) -> np.ndarray:
        return np.array([ring_distance(k, 0, self.N) for k in range(self.N)])

    def weight_matrix(self) -> np.ndarray:
        """Dense ``eps * w_ij`` (row i, column j)."""
        N = self.N
        W = np.empty((N, N))
        for i in range(N):
            for j in range(N):
                W[i, j] = self.eps * self.weights[(j - i) % N]
        return W

    def with_tau_inter(self, tau_inter: float) -> "RingTopology":
        return RingTopology(self.N, self.eps, self.weights, tau_inter)


Params = Union[PrimerParams, WilsonCowanParams]


@dataclass(frozen=True)
class NodeModel:
    params: Params
    topology: RingTopology | None = None

    @property
    def p(self) -> int:
        return 1 if isinstance(self.params, PrimerParams) else 2

    @property
    def N(self) -> int:
        return 1 if self.topology is None else self.topology.N

    @property
    def n_delays(self) -> int:
        return self.N

    @property
    def beta(self) -> float:
        return self.params.sigmoid.beta

    @property
    def tau0(self) -> float:
        return self.params.tau if isinstance(self.params, PrimerParams) else self.params.tau0

    @property
    def upsilon(self) -> np.ndarray:
        """Diagonal of the time-scale matrix."""
        if isinstance(self.params, PrimerParams):
            return np.ones(1)
        return np.array([1.0, 1.0 / self.params.kappa])

    @property
    def drive(self) -> np.ndarray:
        if isinstance(self.params, PrimerParams):
            return np.array([self.params.I])
        return np.array([self.params.I_u, self.params.I_v])

    @property
    def delays(self) -> np.ndarray:
        taus = np.empty(self.N)
        taus[0] = self.tau0
        if self.topology is not None:
            taus[1:] = self.topology.distances[1:] * self.topology.tau_inter
        return taus

    @property
    def coupling(self) -> np.ndarray:
        """Stack of ``B_k`` matrices, shape ``(N, p, p)``."""
        p, N = self.p, self.N
        B = np.zeros((N, p, p))
        par = self.params
        if isinstance(par, PrimerParams):
            B[0, 0, 0] = par.w
        else:
            B[0] = [[par.w_uu, -par.w_vu], [par.w_uv, -par.w_vv]]
        if self.topology is not None:
            eps, w = self.topology.eps, self.topology.weights
            for k in range(N):
                B[k, 0, 0] += eps * w[k]
        return B

    def replace(self, **changes) -> "NodeModel":
        """Copy with node parameters or ``tau_inter`` changed."""
        from dataclasses import replace as _replace

        topo = self.topology
        if "tau_inter" in changes:
            topo = topo.with_tau_inter(changes.pop("tau_inter"))
        if "beta" in changes:
            changes["sigmoid"] = SigmoidParams(changes.pop("beta"))
        params = _replace(self.params, **changes) if changes else self.params
        return NodeModel(params, topo)

    def with_topology(self, topology: RingTopology | None) -> "NodeModel":
        return NodeModel(self.params, topology)


def sigmoid(x, params: SigmoidParams | float):
    beta = params.beta if isinstance(params, SigmoidParams) else params
    return expit(beta * np.asarray(x, dtype=float))


def sigmoid_derivative(x, params: SigmoidParams | float):
    beta = params.beta if isinstance(params, SigmoidParams) else params
    f = expit(beta * np.asarray(x, dtype=float))
    return beta * f * (1.0 - f)


def preactivation(model: NodeModel, delayed) -> np.ndarray:
    """Synchronous sigmoid arguments; ``delayed`` has shape ``(..., n_delays, p)``."""
    delayed = np.asarray(delayed, dtype=float)
    if delayed.shape[-2:] != (model.n_delays, model.p):
        raise ValueError(
            f"delayed states must have trailing shape {(model.n_delays, model.p)}, got {delayed.shape}")
    return model.drive + np.einsum("kab,...kb->...a", model.coupling, delayed)


def rhs(model: NodeModel, current, delayed) -> np.ndarray:
    """Right-hand side of the synchronous (or single-node) system."""
    current = np.asarray(current, dtype=float)
    if current.shape[-1] != model.p:
        raise ValueError(f"state must have {model.p} components")
    chi = preactivation(model, delayed)
    return model.upsilon * (-current + sigmoid(chi, model.beta))


def network_rhs(model: NodeModel, current, delayed) -> np.ndarray:
    """Full ring right-hand side.

    ``current`` has shape ``(N, p)``; ``delayed[k]`` is the whole network
    state at ``t - tau_k``, shape ``(n_delays, N, p)``.
    """
    current = np.asarray(current, dtype=float)
    delayed = np.asarray(delayed, dtype=float)
    B = model.coupling
    chi = np.broadcast_to(model.drive, current.shape).copy()
    for k in range(model.n_delays):
        if not B[k].any():
            continue
        shifted = np.roll(delayed[k], -k, axis=0)
        chi += shifted @ B[k].T
    return model.upsilon * (-current + sigmoid(chi, model.beta))


def jacobian_blocks(model: NodeModel, delayed) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(J1, W)`` with ``J1 = -diag(upsilon)`` and ``W[..., k, :, :]`` the
    delayed-input block for offset k (time-scale factor not applied).

    The derivative of :func:`rhs` with respect to the k-th delayed state is
    ``diag(upsilon) @ W_k``.
    """
    chi = preactivation(model, delayed)
    dF = sigmoid_derivative(chi, model.beta)
    J1 = -np.diag(model.upsilon)
    W = dF[..., None, :, None] * model.coupling
    return J1, W
