import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delayhb.spectral import (OrbitSolution, build_basis, coefficients_from_samples, delay_shift,
                              diff_matrix, evaluate_orbit, orbit_from_json, orbit_to_json,
                              samples_from_coefficients, shift_matrix)


def random_orbit(M=12, p=2, T=3.7, seed=0, decay=0.6):
    rng = np.random.default_rng(seed)
    A = np.zeros((2 * M + 1, p), dtype=complex)
    for n in range(M + 1):
        c = (rng.normal(size=p) + 1j * rng.normal(size=p)) * decay**n
        if n == 0:
            c = c.real
        A[M + n] = c
        A[M - n] = np.conj(c)
    return OrbitSolution.from_coefficients(A, T, M, p)


def test_basis_M1_matches_definition():
    b = build_basis(1, 1)
    n = np.arange(-1, 2)
    expected = np.array([[np.exp(2j * np.pi * a * c / 3) for c in n] for a in n])
    assert np.allclose(b.S, expected, atol=1e-15)
    assert np.max(np.abs(b.S @ b.S_inv - np.eye(3))) < 1e-15


@pytest.mark.parametrize("M", [1, 10, 30, 50, 80])
def test_inverse_pair(M):
    b = build_basis(M)
    eye = np.eye(2 * M + 1)
    assert np.max(np.abs(b.S @ b.S_inv - eye)) < 1e-12
    assert np.max(np.abs(b.S_inv @ b.S - eye)) < 1e-12


@pytest.mark.parametrize("M", [1, 4, 17])
def test_zero_row_and_column_are_ones(M):
    S = build_basis(M).S
    assert np.all(S[M] == 1) and np.all(S[:, M] == 1)


def test_basis_validation_and_cache():
    with pytest.raises(ValueError):
        build_basis(0)
    assert build_basis(7, 2) is build_basis(7, 2)


def test_round_trip_M50():
    b = build_basis(50)
    x = np.random.default_rng(4).normal(size=101)
    back = samples_from_coefficients(coefficients_from_samples(x, b), b)
    assert np.max(np.abs(back - x)) < 1e-12


def test_constant_samples():
    b = build_basis(6, 2)
    X = np.tile([0.3, -1.2], 13)
    A = coefficients_from_samples(X, b)
    assert np.allclose(A[6], [0.3, -1.2], atol=1e-15)
    assert np.max(np.abs(np.delete(A, 6, axis=0))) < 1e-14


def test_single_harmonic():
    b = build_basis(8)
    T = 2.5
    A = coefficients_from_samples(np.cos(2 * np.pi * b.sample_times(T) / T), b)[:, 0]
    expected = np.zeros(17)
    expected[[7, 9]] = 0.5
    assert np.max(np.abs(A - expected)) < 1e-12


def test_length_mismatch():
    with pytest.raises(ValueError):
        coefficients_from_samples(np.zeros(10), build_basis(5))


@settings(max_examples=30, deadline=None)
@given(M=st.integers(1, 40), p=st.integers(1, 3), seed=st.integers(0, 10**6))
def test_reality_constraint(M, p, seed):
    b = build_basis(M, p)
    X = np.random.default_rng(seed).normal(size=(2 * M + 1) * p)
    A = coefficients_from_samples(X, b)
    assert np.max(np.abs(A[::-1] - A.conj())) <= 1e-13
    assert np.max(np.abs(samples_from_coefficients(A, b) - X)) < 1e-12


def test_delay_shift_trivial_cases():
    b = build_basis(9)
    assert np.allclose(delay_shift(0.0, 1.7, b), 1.0, atol=0)
    assert np.max(np.abs(delay_shift(1.7, 1.7, b) - 1.0)) < 1e-12
    with pytest.raises(ValueError):
        delay_shift(1.0, 0.0, b)


def test_delay_shift_reproduces_shifted_sine():
    b = build_basis(10)
    T, tau = 3.0, 0.77
    t = b.sample_times(T)
    A = coefficients_from_samples(np.sin(2 * np.pi * 2 * t / T), b)
    shifted = samples_from_coefficients(delay_shift(tau, T, b)[:, None] * A, b)
    assert np.max(np.abs(shifted - np.sin(2 * np.pi * 2 * (t - tau) / T))) < 1e-12


@settings(max_examples=50, deadline=None)
# the sum t1 + t2 itself carries an ulp of rounding; this range keeps that below 1e-13 in phase
@given(t1=st.floats(-15, 15), t2=st.floats(-15, 15), T=st.floats(0.5, 20))
def test_delay_shift_semigroup(t1, t2, T):
    b = build_basis(30)
    lhs = delay_shift(t1, T, b) * delay_shift(t2, T, b)
    assert np.max(np.abs(lhs - delay_shift(t1 + t2, T, b))) < 1e-12
    assert np.max(np.abs(delay_shift(t1 + T, T, b) - delay_shift(t1, T, b))) < 1e-12


def test_diff_matrix_annihilates_constants():
    D = diff_matrix(2.0, build_basis(15))
    assert np.max(np.abs(D @ np.ones(31))) < 1e-12


def test_shift_matrix_is_real_orthogonal():
    G = shift_matrix(0.3, 1.1, build_basis(12))
    assert G.dtype == float
    assert np.max(np.abs(G @ G.T - np.eye(25))) < 1e-12


def test_evaluate_interpolates_samples():
    orb = random_orbit()
    vals = evaluate_orbit(orb, orb.basis.sample_times(orb.T))
    assert np.max(np.abs(vals - orb.samples)) < 1e-10


def test_evaluate_periodic():
    orb = random_orbit(seed=2)
    t = np.random.default_rng(0).uniform(-50, 50, 40)
    assert np.max(np.abs(evaluate_orbit(orb, t) - evaluate_orbit(orb, t + orb.T))) < 1e-12


def test_derivative_matches_finite_difference():
    orb = random_orbit(seed=3)
    h = 1e-6 * orb.T
    t = np.linspace(0, orb.T, 17)
    fd = (evaluate_orbit(orb, t + h) - evaluate_orbit(orb, t - h)) / (2 * h)
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(evaluate_orbit(orb, t, derivative=1) - fd)) < 1e-6 * max(scale, 1.0)


def test_orbit_validation():
    with pytest.raises(ValueError):
        OrbitSolution(T=0.0, M=2, p=1, X=np.zeros(5))


def test_harmonic_content_and_mean():
    orb = OrbitSolution(T=1.0, M=3, p=1, X=np.full(7, 0.25))
    assert orb.harmonic_content < 1e-15
    assert orb.mean[0] == pytest.approx(0.25)


def test_resample_preserves_function():
    orb = random_orbit(M=8)
    up = orb.resampled(20)
    t = np.linspace(0, orb.T, 33)
    assert np.max(np.abs(up.evaluate(t) - orb.evaluate(t))) < 1e-12
    assert orb.resampled(20).resampled(8).A == pytest.approx(orb.A)


def test_json_round_trip_is_bit_exact():
    orb = random_orbit(M=11, p=2, seed=9)
    orb.residual_norm = 3.2e-12
    back = orbit_from_json(orbit_to_json(orb, extra={"N": 7}))
    assert back.T == orb.T and back.M == orb.M and back.p == orb.p
    assert np.array_equal(back.A, orb.A)
    assert np.array_equal(back.X, orb.X)
    assert back.meta == {"N": 7}
    doc = json.loads(orbit_to_json(orb))
    assert len(doc["coefficients"]) == 23 * 2
    # component-major within each harmonic, harmonics ordered -M..M
    assert doc["coefficients"][1] == [orb.A[0, 1].real, orb.A[0, 1].imag]


def test_json_without_samples_rebuilds_them():
    orb = random_orbit(M=5, p=1)
    doc = json.loads(orbit_to_json(orb))
    del doc["samples"]
    back = orbit_from_json(json.dumps(doc))
    assert np.max(np.abs(back.X - orb.X)) < 1e-14


def test_json_malformed():
    with pytest.raises(ValueError):
        orbit_from_json('{"T": 1.0, "M": 2}')
    with pytest.raises(ValueError):
        orbit_from_json('{"T": 1.0, "M": 2, "p": 1, "coefficients": [[0, 0]]}')
