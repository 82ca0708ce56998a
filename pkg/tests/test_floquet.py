import io
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import brute_force_multipliers, cosine_guess, primer, primer_ring
from delayhb.floquet import (RefinementDiverged, StabilityOperator, eval_E, is_unstable,
                             max_exponent, max_real_root, real_roots, reduce_to_strip, refine_root,
                             roots_to_json, scan_spectrum, spectrum, write_scan_csv)
from delayhb.solver import HBProblem, solve_orbit


@pytest.fixture(scope="module")
def ring3():
    # beta=10 keeps the orbit resolved at M=10 (coefficient tail ~3e-6)
    model = primer_ring(3, beta=10.0)
    orbit = solve_orbit(cosine_guess(10, 5.3, amplitude=0.3), HBProblem.create(model, 10))
    return model, orbit


@pytest.fixture(scope="module")
def ring5():
    model = primer_ring(5, tau_inter=0.7)
    orbit = solve_orbit(cosine_guess(30, 5.3), HBProblem.create(model, 30))
    return model, orbit


# ------------------------------------------------------------ operator basics


def test_operator_validation(stable_primer, ring5):
    model, orbit = stable_primer
    with pytest.raises(ValueError):
        StabilityOperator(orbit, model, q=1)
    with pytest.raises(ValueError):
        StabilityOperator(orbit, primer_ring(3, beta=20.0).replace(tau_inter=1.0), q=3)
    with pytest.raises(ValueError):
        real_roots(StabilityOperator(orbit, model), (1.0, 0.0))


def test_indicator_bounded_by_one(stable_primer):
    # Hadamard: |det| <= product of row 2-norms
    op = StabilityOperator(*reversed(stable_primer))
    for lam in (0.3, -1.0 + 2j, 0.7 - 0.1j):
        assert abs(op.indicator(lam)) <= 1.0 + 1e-12


def test_indicator_zero_set_matches_det():
    # on a 1x1 problem the indicator is sign(det), so its zero is the det zero
    model = primer(20.0, -1.0, 0.5)
    orbit = solve_orbit(cosine_guess(1, 5.3), HBProblem.create(model, 1))
    op = StabilityOperator(orbit, model)
    E = op.matrix(0.3 + 0.2j)
    expected = np.linalg.det(E) / np.prod(np.linalg.norm(E, axis=1))
    assert abs(op.indicator(0.3 + 0.2j) - expected) < 1e-14


def test_eval_E_matches_operator(stable_primer):
    model, orbit = stable_primer
    assert eval_E(0.1 + 0.2j, orbit, model) == StabilityOperator(orbit, model).indicator(0.1 + 0.2j)


def test_indicator_vanishes_at_zero_for_wilson_cowan(wc_node_orbit):
    model, orbit = wc_node_orbit
    assert abs(eval_E(0.0, orbit, model)) < 1e-8


def test_indicator_far_left_for_primer(stable_primer):
    model, orbit = stable_primer
    assert abs(eval_E(-50.0, orbit, model)) > 1e-6


@pytest.mark.xfail(strict=True, reason="row-balanced determinant of the Wilson-Cowan orbit is "
                   "about 1e-31 at nu=-50: derivative entries up to 2 pi M / T dominate the rows")
def test_indicator_far_left_for_wilson_cowan(wc_node_orbit):
    model, orbit = wc_node_orbit
    assert abs(eval_E(-50.0, orbit, model)) > 1e-6


# ------------------------------------------------------------ trivial exponent


def test_kernel_contains_orbit_derivative(stable_primer):
    model, orbit = stable_primer
    op = StabilityOperator(orbit, model)
    Z = op.translation_mode()
    assert np.max(np.abs(op.matrix(0.0) @ Z)) < 1e-6 * np.linalg.norm(Z)


@settings(max_examples=20, deadline=None, derandomize=True,
          suppress_health_check=[HealthCheck.too_slow])
@given(beta=st.floats(8.0, 25.0), w=st.floats(-1.5, -0.8), shift=st.floats(-0.1, 0.1),
       tau=st.floats(1.0, 3.0))
def test_trivial_exponent_for_random_orbits(beta, w, shift, tau):
    model = primer(beta, w, -w / 2 + shift, tau=tau)
    orbit = solve_orbit(cosine_guess(50, 2 * tau + 1.5, amplitude=0.3), HBProblem.create(model, 50))
    op = StabilityOperator(orbit, model)
    roots = real_roots(op, (-0.0101, 0.0093), 9)
    assert min(abs(r.lam) for r in roots) < 1e-6
    assert any(op.is_trivial(r.lam) for r in roots)


def test_trivial_root_refinement(stable_primer):
    model, orbit = stable_primer
    r = refine_root(0.01 + 0.0j, StabilityOperator(orbit, model))
    assert abs(r.lam) < 1e-8


def test_real_roots_sorted_and_include_zero(stable_primer):
    model, orbit = stable_primer
    roots = real_roots(StabilityOperator(orbit, model))
    vals = [r.real for r in roots]
    assert vals == sorted(vals, reverse=True)
    assert min(abs(v) for v in vals) < 1e-6


def test_under_resolved_orbit_shifts_trivial_root(wc_node_orbit):
    # at M=30 the orbit's truncation error moves the trivial root off zero
    model, orbit = wc_node_orbit
    op = StabilityOperator(orbit, model)
    roots = real_roots(op, (-0.01, 0.01), 21)
    assert len(roots) == 1
    assert 1e-6 < abs(roots[0].real) < 1e-3
    assert op.is_trivial(roots[0].lam)


def test_trivial_root_converges_with_M(wc_node_orbit):
    model, orbit = wc_node_orbit
    fine = solve_orbit((orbit.resampled(80).X, orbit.T), HBProblem.create(model, 80))
    roots = real_roots(StabilityOperator(fine, model), (-0.0101, 0.0093), 9)
    assert min(abs(r.real) for r in roots) < 1e-6


# ------------------------------------------------------------ scans


def test_scan_contains_origin_candidate(stable_primer):
    model, orbit = stable_primer
    scan = scan_spectrum(StabilityOperator(orbit, model))
    h = max(np.diff(scan.nu)[0], np.diff(scan.omega)[0])
    assert min(abs(c) for c in scan.intersections) <= h


def test_unstable_primer_scan_has_right_half_plane_candidate(unstable_primer):
    model, orbit = unstable_primer
    scan = scan_spectrum(StabilityOperator(orbit, model))
    assert any(c.real > 0 for c in scan.intersections)


def test_refined_roots_are_grid_independent(unstable_primer):
    model, orbit = unstable_primer
    op = StabilityOperator(orbit, model)
    a = spectrum(op, resolution=(41, 21)).roots
    b = spectrum(op, resolution=(81, 41)).roots
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert abs(x.lam - y.lam) < 1e-6


def test_scan_validation(stable_primer):
    op = StabilityOperator(*reversed(stable_primer))
    with pytest.raises(ValueError):
        scan_spectrum(op, ((0.0, 0.0), (0.0, 1.0)))


def test_refinement_far_from_roots_fails(stable_primer):
    op = StabilityOperator(*reversed(stable_primer))
    with pytest.raises(RefinementDiverged):
        refine_root(0.9 + 0.3j, op, max_iter=1)


def test_reduce_to_strip():
    T = 2.0
    assert reduce_to_strip(0.1 + 1j * (0.2 + 2 * np.pi / T), T) == pytest.approx(0.1 + 0.2j)
    assert abs(reduce_to_strip(0.1 + 3.0j, T).imag) <= np.pi / T


def test_csv_and_json_exports(unstable_primer):
    model, orbit = unstable_primer
    op = StabilityOperator(orbit, model)
    sp = spectrum(op, resolution=(11, 5))
    buf = io.StringIO()
    write_scan_csv([sp.scan], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "q,nu,omega,re_indicator,im_indicator"
    assert len(lines) == 1 + 11 * 5
    doc = json.loads(roots_to_json([sp]))
    assert {"q", "re", "im", "residual"} <= set(doc[0])
    assert sum(1 for d in doc if d.get("trivial")) == 1


# ------------------------------------------------------------ stability verdicts


def test_unstable_primer(unstable_primer):
    model, orbit = unstable_primer
    top = max_exponent(orbit, model)
    assert top.real > 1e-4 and is_unstable(top)


def test_stable_primer(stable_primer):
    model, orbit = stable_primer
    sp = spectrum(StabilityOperator(orbit, model))
    assert sp.trivial is not None and abs(sp.trivial.lam) < 1e-6
    assert sp.max.real < -1e-4 and not sp.unstable


def test_stable_wilson_cowan_node(wc_node_orbit):
    model, orbit = wc_node_orbit
    sp = spectrum(StabilityOperator(orbit, model))
    assert sp.trivial is not None
    assert sp.max.real < 0


def test_max_real_root_skips_trivial(stable_primer):
    op = StabilityOperator(*reversed(stable_primer))
    top, trivial = max_real_root(op)
    assert trivial is not None and abs(trivial.real) < 1e-6
    assert top.real < -1e-4


# ------------------------------------------------------------ modes


def test_decoupled_modes_are_identical(stable_primer):
    node, orbit = stable_primer
    ring = primer_ring(5, eps=0.0)
    ref = StabilityOperator(orbit, node)
    rng = np.random.default_rng(5)
    lams = rng.uniform(-2, 1, 6) + 1j * rng.uniform(-1, 1, 6)
    for q in range(5):
        op = StabilityOperator(orbit, ring, q)
        for lam in lams:
            a, b = op.indicator(lam), ref.indicator(lam)
            assert abs(a - b) <= 1e-12 * abs(b)


def test_decoupled_max_exponent_identical(stable_primer):
    _, orbit = stable_primer
    ring = primer_ring(5, eps=0.0)
    tops = [max_real_root(StabilityOperator(orbit, ring, q))[0] for q in range(5)]
    # q=0 additionally carries the trivial root, which is filtered
    assert max(t.real for t in tops) - min(t.real for t in tops) < 1e-12


@settings(max_examples=15, deadline=None, derandomize=True)
@given(nu=st.floats(-2.0, 1.0), om=st.floats(-1.5, 1.5), q=st.integers(1, 4))
def test_conjugate_mode_symmetry_of_indicator(ring5, nu, om, q):
    model, orbit = ring5
    lam = complex(nu, om)
    a = StabilityOperator(orbit, model, q).indicator(lam)
    b = StabilityOperator(orbit, model, 5 - q).indicator(lam.conjugate())
    assert abs(a - b.conjugate()) <= 1e-12 * max(abs(a), 1e-300)


def test_conjugate_mode_exponents(ring5):
    model, orbit = ring5
    for q in (1, 2):
        a = spectrum(StabilityOperator(orbit, model, q), resolution=(41, 21))
        b = spectrum(StabilityOperator(orbit, model, 5 - q), resolution=(41, 21))
        assert abs(a.max.real - b.max.real) < 1e-8
        for r in a.roots:
            assert min(abs(r.lam.conjugate() - s.lam) for s in b.roots) < 1e-6


# ------------------------------------------------------------ monodromy oracle


@pytest.mark.slow
def test_brute_force_monodromy_matches_hb_exponents(ring3):
    model, orbit = ring3
    mult = brute_force_multipliers(model, orbit)
    T = orbit.T
    hb = []
    for q in range(3):
        sp = spectrum(StabilityOperator(orbit, model, q))
        hb += [r.lam for r in sp.roots if abs(r.real) < 1]
    assert len(hb) >= 3
    for lam in hb:
        mu = np.exp(lam * T)
        assert np.min(np.abs(mult - mu)) <= 1e-2 * abs(mu)
    # conversely the dominant multipliers all come from HB exponents
    hb_mu = np.exp(np.array(hb) * T)
    for mu in mult[np.abs(mult) > 0.05]:
        assert np.min(np.abs(hb_mu - mu)) <= 1e-2 * abs(mu)



def test_truncation_artifacts_are_set_aside(ring3):
    model, orbit = ring3
    sp = spectrum(StabilityOperator(orbit, model, 0))
    assert sp.unresolved
    op = StabilityOperator(orbit, model, 0)
    # artifacts cluster at the strip edge and are damped
    assert any(abs(abs(r.imag) - np.pi / orbit.T) < 0.01 for r in sp.unresolved)
    for r in sp.unresolved:
        assert r.real < 0 and op.edge_energy(r.lam) > 0.5
    assert all(op.edge_energy(r.lam) < 0.1 for r in sp.roots)
