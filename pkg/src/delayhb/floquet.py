"""Floquet exponents of synchronous orbits from the harmonic-balance
characteristic function.

For circulant mode ``q`` the linearisation about a sampled orbit is the
matrix

    E_q(lam) = lam I + S L S^-1 + I (x) Y - sum_k w_q^k exp(-lam tau_k) DJ_k (S Gamma_k S^-1 (x) I_p)

with ``DJ_k = blockdiag(Y W_k(t_n))`` and ``w_q = exp(2 pi i q / N)``.  Its
determinant overflows for realistic sizes, so every routine works with a
row-balanced indicator ``det(E) / prod_i ||row_i||_2`` that keeps the
argument (and hence the zero set) of the determinant and, by Hadamard's
inequality, never exceeds one in magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import csv
import json

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import brentq
from skimage.measure import find_contours

from .model import NodeModel, jacobian_blocks
from .spectral import OrbitSolution, diff_matrix, shift_matrix

__all__ = [
    "RefinementDiverged",
    "FloquetExponent",
    "SpectrumScan",
    "Spectrum",
    "StabilityOperator",
    "stability_operator",
    "eval_E",
    "real_roots",
    "scan_spectrum",
    "refine_root",
    "spectrum",
    "max_exponent",
    "is_unstable",
    "TRIVIAL_TOL",
    "max_real_root",
    "reduce_to_strip",
    "UNSTABLE_THRESHOLD",
    "write_scan_csv",
    "roots_to_json",
]

TRIVIAL_TOL = 1e-6
UNSTABLE_THRESHOLD = 1e-4
REFINE_TOL = 1e-8
TRIVIAL_WINDOW = 1e-2
REPLICA_TOL = 1e-4
CLUSTER_RADIUS = 1e-6
EDGE_ENERGY_MAX = 0.5
# contour candidates can sit this far from the root they converge to
LEAD_MARGIN = 0.3


class RefinementDiverged(RuntimeError):
    pass


@dataclass
class FloquetExponent:
    lam: complex
    q: int
    residual: float = 0.0
    multiplicity_hint: int = 1

    @property
    def real(self) -> float:
        return float(np.real(self.lam))

    @property
    def imag(self) -> float:
        return float(np.imag(self.lam))

    def conjugate(self) -> "FloquetExponent":
        return FloquetExponent(np.conj(self.lam), self.q, self.residual, self.multiplicity_hint)

    def to_dict(self) -> dict:
        return {"q": self.q, "re": self.real, "im": self.imag, "residual": self.residual}


class StabilityOperator:
    """Characteristic matrix ``E_q(lam)`` of a synchronous orbit, with the
    lambda-independent parts assembled once."""

    def __init__(self, orbit: OrbitSolution, model: NodeModel, q: int = 0):
        if orbit.wave_mode != 0:
            raise ValueError("stability analysis is implemented for synchronous orbits only")
        if orbit.p != model.p:
            raise ValueError("orbit and model dimensions differ")
        N = model.N
        if not 0 <= q < N:
            raise ValueError(f"mode q must lie in 0..{N - 1}")
        self.orbit, self.model, self.q = orbit, model, q
        basis = orbit.basis
        K, p = basis.K, basis.p
        self.size = K * p
        T = orbit.T
        ups = model.upsilon
        delays = model.delays
        Dk = np.stack([shift_matrix(tau, T, basis) for tau in delays])
        delayed = np.einsum("knm,mp->nkp", Dk, orbit.samples)
        _, W = jacobian_blocks(model, delayed)  # (K, N, p, p)
        self.W = W
        # without inter-node coupling every mode shares the mode-0 operator
        self.decoupled = not W[:, 1:].any()
        base = np.kron(diff_matrix(T, basis), np.eye(p))
        base[np.diag_indices(self.size)] += np.tile(ups, K)
        self.base = base
        omega_q = np.exp(2j * np.pi * q / N)
        groups: dict[float, np.ndarray] = {}
        for k in range(N):
            if not W[:, k].any():
                continue
            blocks = ups[None, :, None] * W[:, k]
            term = np.einsum("nab,nm->namb", blocks, Dk[k]).reshape(self.size, self.size)
            key = round(float(delays[k]), 12)
            groups[key] = groups.get(key, 0) + omega_q**k * term
        self.taus = np.array(list(groups))
        terms = list(groups.values())
        # symmetric rings make every group real
        if all(np.abs(t.imag).max() <= 1e-14 * max(1.0, np.abs(t.real).max()) for t in terms):
            terms = [t.real for t in terms]
        self.terms = terms

    def matrix(self, lam: complex) -> np.ndarray:
        real = np.isreal(lam) and all(np.isrealobj(t) for t in self.terms)
        dtype = float if real else complex
        lam = lam.real if real else complex(lam)
        E = self.base.astype(dtype, copy=True)
        E[np.diag_indices(self.size)] += lam
        for tau, term in zip(self.taus, self.terms):
            E -= np.exp(-lam * tau) * term
        return E

    def matrix_derivative(self, lam: complex) -> np.ndarray:
        """``dE/dlam``: identity plus the delay-weighted coupling terms."""
        lam = complex(lam)
        D = np.eye(self.size, dtype=complex)
        for tau, term in zip(self.taus, self.terms):
            D += tau * np.exp(-lam * tau) * term
        return D

    def indicator(self, lam: complex, scale: float | None = None) -> complex:
        """Row-balanced determinant; ``scale`` fixes the log row-norm sum."""
        E = self.matrix(lam)
        if scale is None:
            scale = self.log_row_scale(E)
        sign, logdet = np.linalg.slogdet(E)
        return complex(sign * np.exp(logdet - scale))

    @staticmethod
    def log_row_scale(E) -> float:
        return float(np.sum(np.log(np.linalg.norm(E, axis=1))))

    def _normalised(self, lam):
        E = self.matrix(lam)
        return E / np.linalg.norm(E, axis=1)[:, None]

    def sigma_min(self, lam: complex) -> float:
        """Smallest singular value of the row-normalised matrix."""
        return float(np.linalg.svd(self._normalised(lam), compute_uv=False)[-1])

    def null_vector(self, lam: complex) -> tuple[float, np.ndarray]:
        _, s, vh = np.linalg.svd(self._normalised(lam))
        return float(s[-1]), vh[-1].conj()

    def edge_energy(self, lam: complex) -> float:
        """Share of the null vector's energy in harmonics ``|n| > M/2``.

        Truncation produces spurious roots near the strip edge whose
        eigenfunctions live on the outermost harmonics; genuine exponents of
        a resolved orbit put almost nothing there.
        """
        _, v = self.null_vector(lam)
        basis = self.orbit.basis
        C = basis.S_inv @ v.reshape(basis.K, basis.p)
        energy = np.sum(np.abs(C) ** 2, axis=1)
        outer = np.abs(basis.harmonics) > basis.M / 2
        return float(energy[outer].sum() / energy.sum())

    def is_resolved(self, lam: complex) -> bool:
        return self.edge_energy(lam) <= EDGE_ENERGY_MAX

    def translation_mode(self, shift: int = 0) -> np.ndarray:
        """Samples of ``x0'(t) exp(-i w_shift t)``, the kernel direction of the
        trivial exponent ``2 pi i shift / T``."""
        orbit = self.orbit
        t = orbit.basis.sample_times(orbit.T)
        Z = diff_matrix(orbit.T, orbit.basis) @ orbit.samples
        Z = Z * np.exp(-2j * np.pi * shift * t / orbit.T)[:, None]
        return Z.ravel()

    def is_trivial(self, lam: complex, window: float = TRIVIAL_WINDOW,
                   min_alignment: float = 0.99) -> bool:
        """Whether ``lam`` is (a strip replica of) the time-translation exponent,
        judged by alignment of its kernel vector with the orbit derivative.

        Only mode 0 carries it, unless the ring is decoupled."""
        if self.q != 0 and not self.decoupled:
            return False
        period = 2 * np.pi / self.orbit.T
        shift = int(np.round(np.imag(lam) / period))
        if abs(np.real(lam)) > window or abs(np.imag(lam) - shift * period) > window:
            return False
        _, v = self.null_vector(lam)
        Z = self.translation_mode(shift)
        align = abs(np.vdot(Z, v)) / (np.linalg.norm(Z) * np.linalg.norm(v))
        return bool(align > min_alignment)


def stability_operator(orbit: OrbitSolution, model: NodeModel, q: int = 0) -> StabilityOperator:
    return StabilityOperator(orbit, model, q)


def eval_E(lam: complex, orbit: OrbitSolution, model: NodeModel, q: int = 0) -> complex:
    return StabilityOperator(orbit, model, q).indicator(lam)


def real_roots(op: StabilityOperator, interval=(-3.0, 1.0), n_grid: int = 400,
               xtol: float = 1e-10) -> list[FloquetExponent]:
    """Real zeros bracketed by sign changes on a uniform grid, refined by a
    bracketing root finder; sorted by decreasing value."""
    lo, hi = interval
    if not lo < hi:
        raise ValueError("empty interval")
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([op.indicator(x).real for x in grid])
    return _roots_from_grid(op, grid, vals, xtol)


def _roots_from_grid(op, grid, vals, xtol):
    f = lambda x: op.indicator(x).real
    roots = []
    for i in range(len(grid) - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0:
            roots.append(grid[i])
        elif a * b < 0:
            roots.append(brentq(f, grid[i], grid[i + 1], xtol=xtol, rtol=4 * np.finfo(float).eps))
    if vals[-1] == 0:
        roots.append(grid[-1])
    out: list[FloquetExponent] = []
    for r in sorted(roots, reverse=True):
        if out and abs(out[-1].real - r) < CLUSTER_RADIUS:
            out[-1].multiplicity_hint += 1
            continue
        out.append(FloquetExponent(complex(r, 0.0), op.q, op.sigma_min(r)))
    return out


def max_real_root(op: StabilityOperator, interval=(-3.0, 1.0), n_grid: int = 400,
                  xtol: float = 1e-10):
    """Largest non-trivial real root, scanning down from the top of the
    interval and stopping at the first qualifying sign change.

    Returns ``(exponent or None, trivial exponent or None)``.
    """
    lo, hi = interval
    grid = np.linspace(hi, lo, n_grid)
    f = lambda x: op.indicator(x).real
    prev = f(grid[0])
    trivial = None
    for i in range(1, n_grid):
        cur = f(grid[i])
        if prev * cur <= 0:
            a, b = grid[i], grid[i - 1]
            if cur == 0:
                r = a
            elif prev == 0:
                r = b
            else:
                r = brentq(f, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps)
            if trivial is None and op.is_trivial(r):
                trivial = FloquetExponent(complex(r, 0.0), op.q, 0.0)
            elif not (trivial is not None and abs(r - trivial.real) < xtol * 10) and op.is_resolved(r):
                return FloquetExponent(complex(r, 0.0), op.q, 0.0), trivial
        prev = cur
    return None, trivial


@dataclass
class SpectrumScan:
    q: int
    region: tuple
    resolution: tuple
    nu: np.ndarray
    omega: np.ndarray
    values: np.ndarray  # complex indicator, shape (n_omega, n_nu)
    re_contours: list = field(default_factory=list)
    im_contours: list = field(default_factory=list)
    intersections: list = field(default_factory=list)

    def to_csv_rows(self):
        for j, w in enumerate(self.omega):
            for i, v in enumerate(self.nu):
                z = self.values[j, i]
                yield (self.q, v, w, z.real, z.imag)


def _to_coords(contour, nu, omega):
    rows, cols = contour[:, 0], contour[:, 1]
    return np.column_stack([np.interp(cols, np.arange(len(nu)), nu),
                            np.interp(rows, np.arange(len(omega)), omega)])


def _segments_by_cell(contours):
    cells: dict[tuple, list] = {}
    for c in contours:
        for a, b in zip(c[:-1], c[1:]):
            mid = 0.5 * (a + b)
            key = (int(np.floor(mid[0])), int(np.floor(mid[1])))
            cells.setdefault(key, []).append((a, b))
    return cells


def _intersect(p1, p2, p3, p4):
    d1, d2 = p2 - p1, p4 - p3
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if den == 0:
        return None
    r = p3 - p1
    s = (r[0] * d2[1] - r[1] * d2[0]) / den
    u = (r[0] * d1[1] - r[1] * d1[0]) / den
    if -1e-9 <= s <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
        return p1 + s * d1
    return None


def scan_spectrum(op: StabilityOperator, region=None, resolution=(81, 41)) -> SpectrumScan:
    """Zero contours of Re and Im of the indicator over a rectangle of the
    complex plane and their pairwise intersections (candidate exponents)."""
    if region is None:
        region = default_region(op.orbit)
    (nu0, nu1), (om0, om1) = region
    if not (nu0 < nu1 and om0 < om1):
        raise ValueError("empty scan region")
    n_nu, n_om = resolution
    nu = np.linspace(nu0, nu1, n_nu)
    omega = np.linspace(om0, om1, n_om)
    values = np.array([[op.indicator(complex(v, w)) for v in nu] for w in omega])
    re_c = find_contours(values.real, 0.0)
    im_c = find_contours(values.imag, 0.0)
    re_cells = _segments_by_cell(re_c)
    im_cells = _segments_by_cell(im_c)
    found = []
    for key in sorted(set(re_cells) & set(im_cells)):
        for a, b in re_cells[key]:
            for c, d in im_cells[key]:
                pt = _intersect(a, b, c, d)
                if pt is not None:
                    found.append(pt)
    inter = []
    for pt in found:
        z = _to_coords(pt[None, :], nu, omega)[0]
        lam = complex(z[0], z[1])
        if nu0 <= lam.real <= nu1 and om0 <= lam.imag <= om1 and not any(abs(lam - o) < 1e-12 for o in inter):
            inter.append(lam)
    return SpectrumScan(
        q=op.q, region=region, resolution=resolution, nu=nu, omega=omega, values=values,
        re_contours=[_to_coords(c, nu, omega) for c in re_c],
        im_contours=[_to_coords(c, nu, omega) for c in im_c],
        intersections=inter,
    )


def refine_root(candidate: complex, op: StabilityOperator, tol: float = REFINE_TOL,
                max_iter: int = 40) -> FloquetExponent:
    """Complex Newton iteration on the determinant.

    The logarithmic derivative ``d/dlam log det E = tr(E^{-1} E')`` gives the
    step without forming the determinant itself.
    """
    lam = complex(candidate)
    prev = np.inf
    for _ in range(max_iter):
        try:
            lu = lu_factor(op.matrix(lam), check_finite=False)
            dlog = np.trace(lu_solve(lu, op.matrix_derivative(lam), check_finite=False))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise RefinementDiverged(f"singular matrix near {lam}") from exc
        if dlog == 0 or not np.isfinite(dlog):
            raise RefinementDiverged(f"flat determinant near {lam}")
        step = -1.0 / dlog
        # keep the iteration local
        if abs(step) > 0.5:
            step *= 0.5 / abs(step)
        lam += step
        if not np.isfinite(lam):
            raise RefinementDiverged("non-finite iterate")
        size = abs(step)
        # stop at convergence or once rounding noise stalls the steps
        if size < 1e-13 * max(1.0, abs(lam)) or (size < 1e-9 and size >= prev):
            break
        prev = size
    if abs(lam.imag) < 1e-10:
        lam = complex(lam.real, 0.0)
    res = op.sigma_min(lam)
    if not res < tol:
        raise RefinementDiverged(f"refinement from {candidate} stalled at {lam} (residual {res:.2e})")
    return FloquetExponent(lam, op.q, res)


def default_region(orbit: OrbitSolution):
    return ((-3.0, 1.0), (0.0, 3 * np.pi / orbit.T))


@dataclass
class Spectrum:
    """Exponents of one mode reduced to the strip ``|Im lam| <= pi / T``."""

    q: int
    roots: list
    trivial: FloquetExponent | None
    raw: list = field(default_factory=list)
    scan: SpectrumScan | None = None
    unresolved: list = field(default_factory=list)

    @property
    def nontrivial(self) -> list:
        return [r for r in self.roots if r is not self.trivial]

    @property
    def max(self) -> FloquetExponent:
        cands = self.nontrivial
        if not cands:
            return FloquetExponent(complex(-np.inf, 0.0), self.q, float("nan"))
        return max(cands, key=lambda e: (e.real, -abs(e.imag)))

    @property
    def unstable(self) -> bool:
        return self.max.real > UNSTABLE_THRESHOLD


def reduce_to_strip(lam: complex, T: float) -> complex:
    """Representative of ``lam`` modulo ``2 pi i / T`` with ``|Im| <= pi / T``."""
    w = 2 * np.pi / T
    im = np.imag(lam) - w * np.round(np.imag(lam) / w)
    return complex(np.real(lam), im)


def _merge(roots, T, replica_tol=REPLICA_TOL):
    """Fold strip replicas and repeated refinements into one exponent each.

    Roots nearest the real axis are kept, so the representative carries the
    residual of the best-resolved copy.
    """
    out: list[FloquetExponent] = []
    for r in sorted(roots, key=lambda e: (abs(e.imag), -e.real)):
        lam = reduce_to_strip(r.lam, T)
        if not any(abs(o.lam - lam) < replica_tol * max(1.0, abs(lam)) for o in out):
            out.append(FloquetExponent(lam, r.q, r.residual))
    return sorted(out, key=lambda e: (-e.real, e.imag))


def spectrum(op: StabilityOperator, region=None, resolution=(81, 41), n_real: int = 400,
             complex_scan: bool = True, leading: bool = False) -> Spectrum:
    """Real roots plus refined contour intersections inside ``region``.

    Every non-real root is accompanied by its conjugate, strip replicas are
    folded together, truncation artifacts (see ``edge_energy``) are set
    aside and the time-translation exponent of mode 0 is reported
    separately.

    With ``leading=True`` only candidates that could beat the current
    maximum (within ``LEAD_MARGIN``) are refined, so ``roots`` is partial
    but ``max`` is the same.
    """
    if region is None:
        region = default_region(op.orbit)
    (nu0, nu1), (om0, om1) = region
    raw = real_roots(op, (nu0, nu1), n_real)
    scan = None
    if complex_scan:
        # skip the real axis row: real roots come from the bracketing search
        h = (om1 - om0) / (resolution[1] - 1)
        lo = max(om0, h) if om0 <= 0 else om0
        scan = scan_spectrum(op, ((nu0, nu1), (lo, om1)), resolution)
        cands = sorted(scan.intersections, key=lambda c: -c.real)
        best = -np.inf
        if leading:
            best = max([r.real for r in raw if op.is_resolved(r.lam) and not op.is_trivial(r.lam)],
                       default=-np.inf)
        for cand in cands:
            if leading and cand.real < best - LEAD_MARGIN:
                break
            try:
                r = refine_root(cand, op)
            except RefinementDiverged:
                continue
            if r.imag == 0.0:
                continue
            raw += [r, r.conjugate()]
            if leading and op.is_resolved(r.lam):
                best = max(best, r.real)
    T = op.orbit.T
    roots, unresolved = [], []
    for r in _merge(raw, T):
        (roots if op.is_resolved(r.lam) else unresolved).append(r)
    trivial = None
    if op.q == 0 or op.decoupled:
        for r in sorted(roots, key=lambda e: abs(e.lam)):
            if op.is_trivial(r.lam):
                trivial = r
                break
    return Spectrum(op.q, roots, trivial, raw, scan, unresolved)


def max_exponent(orbit: OrbitSolution, model: NodeModel, q: int = 0, **kwargs) -> FloquetExponent:
    return spectrum(StabilityOperator(orbit, model, q), **kwargs).max


def is_unstable(exponent: FloquetExponent, threshold: float = UNSTABLE_THRESHOLD) -> bool:
    return exponent.real > threshold


def write_scan_csv(scans, stream) -> None:
    """Indicator grid of one or more scans as ``q, nu, omega, re_indicator, im_indicator``."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["q", "nu", "omega", "re_indicator", "im_indicator"])
    for scan in scans:
        for q, nu, om, re, im in scan.to_csv_rows():
            writer.writerow([q] + [f"{v:.10g}" for v in (nu, om, re, im)])


def roots_to_json(spectra) -> str:
    doc = []
    for sp in spectra:
        for r in sp.roots:
            d = {"q": int(sp.q), "re": r.real, "im": r.imag, "residual": float(r.residual)}
            if r is sp.trivial:
                d["trivial"] = True
            doc.append(d)
    return json.dumps(doc, indent=1)
