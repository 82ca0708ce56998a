"""Fourier sampling machinery for truncated periodic orbits.

Samples are taken at ``t_n = n T / (2M+1)`` for ``n = -M..M`` and stored in
that order; multi-component states are stored component-major within each
sample, i.e. a flat vector of length ``(2M+1) p`` reshapes to ``(2M+1, p)``.
Operators act on the ``(2M+1, p)`` layout with ``(2M+1) x (2M+1)`` matrices,
which is the Kronecker lift ``S (x) I_p`` without materialising it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "SpectralBasis",
    "OrbitSolution",
    "build_basis",
    "coefficients_from_samples",
    "samples_from_coefficients",
    "delay_shift",
    "diff_matrix",
    "shift_matrix",
    "evaluate_orbit",
    "orbit_to_json",
    "orbit_from_json",
]


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    M: int
    p: int
    S: np.ndarray
    S_inv: np.ndarray

    @property
    def K(self) -> int:
        return 2 * self.M + 1

    @property
    def harmonics(self) -> np.ndarray:
        return np.arange(-self.M, self.M + 1)

    @property
    def sample_fractions(self) -> np.ndarray:
        return self.harmonics / self.K

    def sample_times(self, T: float) -> np.ndarray:
        return T * self.sample_fractions

    def spectral_operator(self, diagonal) -> np.ndarray:
        """Real part of ``S diag(d) S^-1``; real whenever ``d[-m] = conj(d[m])``."""
        return ((self.S * np.asarray(diagonal)) @ self.S_inv).real


@lru_cache(maxsize=32)
def build_basis(M: int, p: int = 1) -> SpectralBasis:
    if M < 1 or p < 1:
        raise ValueError("need M >= 1 and p >= 1")
    n = np.arange(-M, M + 1)
    K = 2 * M + 1
    S = np.exp(2j * np.pi * np.outer(n, n) / K)
    S.flags.writeable = False
    S_inv = S.conj() / K
    S_inv.flags.writeable = False
    return SpectralBasis(M=M, p=p, S=S, S_inv=S_inv)


def _as_blocks(X, basis: SpectralBasis) -> np.ndarray:
    X = np.asarray(X)
    if X.size != basis.K * basis.p:
        raise ValueError(f"expected {basis.K * basis.p} samples, got {X.size}")
    return X.reshape(basis.K, basis.p)


def coefficients_from_samples(X, basis: SpectralBasis) -> np.ndarray:
    """Fourier coefficients ``a_{-M}..a_M`` as a ``(2M+1, p)`` complex array."""
    return basis.S_inv @ _as_blocks(X, basis)


def samples_from_coefficients(A, basis: SpectralBasis) -> np.ndarray:
    """Flat real sample vector from coefficients."""
    A = np.asarray(A).reshape(basis.K, basis.p)
    return (basis.S @ A).real.ravel()


def delay_shift(tau: float, T: float, basis: SpectralBasis, phase: float = 0.0) -> np.ndarray:
    """Diagonal of the delay operator, ``exp(-i w_m tau + i m phase)``.

    ``phase`` adds a per-harmonic rotation used for travelling-wave inputs.
    """
    if not T > 0:
        raise ValueError("period must be positive")
    m = basis.harmonics
    # reduce tau modulo T so that Gamma(tau + T) == Gamma(tau) to rounding
    frac = np.fmod(tau, T) / T
    return np.exp(-2j * np.pi * m * frac + 1j * m * phase)


def diff_matrix(T: float, basis: SpectralBasis) -> np.ndarray:
    """Sampled-time derivative operator ``S L S^-1``."""
    return basis.spectral_operator(2j * np.pi * basis.harmonics / T)


def shift_matrix(tau: float, T: float, basis: SpectralBasis, phase: float = 0.0) -> np.ndarray:
    """Sampled-time delay operator ``S Gamma S^-1``."""
    return basis.spectral_operator(delay_shift(tau, T, basis, phase))


@dataclass
class OrbitSolution:
    T: float
    M: int
    p: int
    X: np.ndarray
    A: np.ndarray = None
    residual_norm: float = float("nan")
    wave_mode: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("period must be positive")
        basis = build_basis(self.M, self.p)
        self.X = np.asarray(self.X, dtype=float).ravel()
        if self.A is None:
            self.A = coefficients_from_samples(self.X, basis)
        else:
            self.A = np.asarray(self.A, dtype=complex).reshape(basis.K, self.p)

    @classmethod
    def from_coefficients(cls, A, T, M, p, **kwargs) -> "OrbitSolution":
        basis = build_basis(M, p)
        A = np.asarray(A, dtype=complex).reshape(basis.K, p)
        return cls(T=T, M=M, p=p, X=samples_from_coefficients(A, basis), A=A, **kwargs)

    @property
    def basis(self) -> SpectralBasis:
        return build_basis(self.M, self.p)

    @property
    def samples(self) -> np.ndarray:
        return self.X.reshape(2 * self.M + 1, self.p)

    @property
    def mean(self) -> np.ndarray:
        return self.A[self.M].real

    @property
    def harmonic_content(self) -> float:
        """Sum of ``|a_n|`` over all ``n != 0``."""
        mags = np.abs(self.A).sum(axis=1)
        return float(mags.sum() - mags[self.M])

    @property
    def amplitude(self) -> float:
        """Peak-to-peak range of the first component at the samples."""
        x = self.samples[:, 0]
        return float(x.max() - x.min())

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        return evaluate_orbit(self, t, derivative)

    def resampled(self, M: int) -> "OrbitSolution":
        """Zero-pad or truncate the coefficient set to a new order."""
        K_new = 2 * M + 1
        A = np.zeros((K_new, self.p), dtype=complex)
        keep = min(M, self.M)
        A[M - keep:M + keep + 1] = self.A[self.M - keep:self.M + keep + 1]
        return OrbitSolution.from_coefficients(A, self.T, M, self.p, wave_mode=self.wave_mode)


def evaluate_orbit(orbit: OrbitSolution, t, derivative: int = 0) -> np.ndarray:
    """Trigonometric reconstruction at time(s) ``t``; shape ``t.shape + (p,)``."""
    t = np.asarray(t, dtype=float)
    omega = 2 * np.pi * orbit.basis.harmonics / orbit.T
    # fold into one period for accuracy at large t
    tt = np.mod(t, orbit.T)
    phase = np.exp(1j * np.multiply.outer(tt, omega))
    weights = (1j * omega) ** derivative
    return (phase @ (weights[:, None] * orbit.A)).real


def orbit_to_json(orbit: OrbitSolution, extra: dict | None = None) -> str:
    doc = {
        "T": float(orbit.T),
        "M": int(orbit.M),
        "p": int(orbit.p),
        "wave_mode": int(orbit.wave_mode),
        "coefficients": [[float(c.real), float(c.imag)] for c in orbit.A.ravel()],
        "samples": [float(x) for x in orbit.X],
        "residual_norm": float(orbit.residual_norm),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)


def orbit_from_json(text: str) -> OrbitSolution:
    doc = json.loads(text)
    try:
        T, M, p = float(doc["T"]), int(doc["M"]), int(doc["p"])
        coeffs = np.array(doc["coefficients"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed orbit document: {exc}") from exc
    K = 2 * M + 1
    if coeffs.shape != (K * p, 2):
        raise ValueError(f"expected {K * p} coefficient pairs, got shape {coeffs.shape}")
    A = (coeffs[:, 0] + 1j * coeffs[:, 1]).reshape(K, p)
    kwargs = dict(residual_norm=float(doc.get("residual_norm", float("nan"))),
                  wave_mode=int(doc.get("wave_mode", 0)))
    meta = {k: v for k, v in doc.items()
            if k not in {"T", "M", "p", "wave_mode", "coefficients", "samples", "residual_norm"}}
    if "samples" in doc:
        return OrbitSolution(T=T, M=M, p=p, X=np.array(doc["samples"], dtype=float), A=A,
                             meta=meta, **kwargs)
    return OrbitSolution.from_coefficients(A, T, M, p, meta=meta, **kwargs)
