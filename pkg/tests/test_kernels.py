"""Kernel, derivative-covariance and spectral-density unit tests."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcalib.kernels import (
    KernelParams,
    NoiseParams,
    deriv_prior_cov,
    deriv_prior_var,
    noise_cov,
    rbf,
    rbf_cross_deriv,
    rbf_hyper_grads,
    rbf_matrix,
    rbf_spectral_density,
)

KP = KernelParams(np.log(0.4), np.log(1.3))


def test_rbf_at_zero_lag_is_signal_variance():
    # [TRIVIAL] k(x, x) = sigma_f^2
    assert rbf(0.7, 0.7, KP) == pytest.approx(1.3 ** 2, rel=1e-15)


def test_rbf_one_length_scale_apart():
    # [DERIVED] k(tau = ell) = sigma_f^2 * exp(-1/2); exp(-0.5) frozen
    assert rbf(0.0, 0.4, KP) == pytest.approx(1.3 ** 2 * 0.6065306597126334, rel=1e-14)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_rbf_symmetric_and_bounded(x, x2):
    v = rbf(x, x2, KP)
    assert v == rbf(x2, x, KP)
    assert 0.0 < v <= 1.3 ** 2 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8, unique=True))
def test_rbf_matrix_positive_semidefinite(xs):
    K = rbf_matrix(np.array(xs), np.array(xs), KP)
    w = np.linalg.eigvalsh(K)
    assert w.min() >= -1e-8 * w.max()


def test_rbf_matrix_rejects_empty():
    with pytest.raises(ValueError, match="empty position set"):
        rbf_matrix(np.array([]), np.array([0.0]), KP)


@pytest.mark.parametrize("order", [1, 2])
def test_cross_deriv_matches_finite_differences(order):
    # [DERIVED] d^o k(x*, x)/dx*^o vs central finite differences of rbf
    X = np.array([-0.4, 0.1, 0.9])
    h = 1e-5
    for xstar in (-0.2, 0.35, 1.1):
        got = rbf_cross_deriv(xstar, X, KP, order)
        if order == 1:
            fd = (rbf_matrix([xstar + h], X, KP) - rbf_matrix([xstar - h], X, KP)) / (2 * h)
        else:
            fd = (rbf_matrix([xstar + h], X, KP) - 2 * rbf_matrix([xstar], X, KP)
                  + rbf_matrix([xstar - h], X, KP)) / h ** 2
        assert np.allclose(got, fd.ravel(), rtol=1e-6, atol=1e-6)


def test_cross_deriv_order_zero_is_kernel_row():
    X = np.array([0.0, 0.5])
    assert np.allclose(rbf_cross_deriv(0.2, X, KP, 0),
                       rbf_matrix([0.2], X, KP).ravel())


def test_cross_deriv_rejects_bad_order():
    with pytest.raises(ValueError):
        rbf_cross_deriv(0.0, np.array([0.0]), KP, 3)


def test_deriv_prior_var_closed_forms():
    # [TRIVIAL] sigma_f^2, sigma_f^2/ell^2, 3 sigma_f^2/ell^4
    sf2, ell = 1.3 ** 2, 0.4
    assert deriv_prior_var(0, KP) == pytest.approx(sf2, rel=1e-14)
    assert deriv_prior_var(1, KP) == pytest.approx(sf2 / ell ** 2, rel=1e-14)
    assert deriv_prior_var(2, KP) == pytest.approx(3 * sf2 / ell ** 4, rel=1e-14)


@pytest.mark.parametrize("order", [1, 2])
def test_deriv_prior_cov_matches_finite_differences(order):
    # [DERIVED] cov(f^(o)(u), f^(o)(v)) = d^{2o} k/du^o dv^o via nested FD
    grid = np.array([0.0, 0.3, 0.7])
    # order 2 needs a coarser step: the nested difference divides by h^4
    h = 1e-4 if order == 1 else 2e-2
    tol = 5e-4 if order == 1 else 5e-3

    def k(u, v):
        return rbf(u, v, KP)

    got = deriv_prior_cov(grid, KP, order)
    for i, u in enumerate(grid):
        for j, v in enumerate(grid):
            if order == 1:
                fd = (k(u + h, v + h) - k(u + h, v - h)
                      - k(u - h, v + h) + k(u - h, v - h)) / (4 * h ** 2)
            else:
                pts = [(du, dv) for du in (-h, 0, h) for dv in (-h, 0, h)]
                # separable second difference in each argument
                wu = {-h: 1.0, 0: -2.0, h: 1.0}
                fd = sum(wu[du] * wu[dv] * k(u + du, v + dv) for du, dv in pts) / h ** 4
            scale = deriv_prior_var(order, KP)
            assert abs(got[i, j] - fd) < tol * scale


def test_deriv_prior_cov_diagonal_equals_prior_var():
    grid = np.linspace(0, 1, 5)
    for order in (0, 1, 2):
        C = deriv_prior_cov(grid, KP, order)
        assert np.allclose(np.diag(C), deriv_prior_var(order, KP), rtol=1e-12)


def test_hyper_grads_match_finite_differences():
    # [DERIVED] dK/dlog ell and dK/dlog sigma_f vs central FD
    X = np.array([0.0, 0.25, 0.8])
    h = 1e-6
    g_ell, g_sf = rbf_hyper_grads(X, KP)
    up = rbf_matrix(X, X, KernelParams(KP.log_length_scale + h, KP.log_signal_sigma))
    dn = rbf_matrix(X, X, KernelParams(KP.log_length_scale - h, KP.log_signal_sigma))
    assert np.allclose(g_ell, (up - dn) / (2 * h), rtol=1e-6, atol=1e-8)
    up = rbf_matrix(X, X, KernelParams(KP.log_length_scale, KP.log_signal_sigma + h))
    dn = rbf_matrix(X, X, KernelParams(KP.log_length_scale, KP.log_signal_sigma - h))
    assert np.allclose(g_sf, (up - dn) / (2 * h), rtol=1e-6, atol=1e-8)


def test_noise_cov_diagonal():
    noise = NoiseParams(np.log(0.08), np.array([0.0, 0.5, -0.5, 0.1]), 0.5)
    active = np.array([0, 2, 3])
    C = noise_cov(noise, active)
    assert C.shape == (3, 3)
    assert np.allclose(np.diag(C), (0.08 * np.exp([0.0, -0.5, 0.1])) ** 2)
    assert np.count_nonzero(C - np.diag(np.diag(C))) == 0


def test_spectral_density_zero_frequency():
    # [DERIVED] S(0) = sigma_f^2 * sqrt(2 pi) * ell; sqrt(2 pi) frozen
    assert rbf_spectral_density(0.0, KP) == pytest.approx(
        1.3 ** 2 * 2.5066282746310002 * 0.4, rel=1e-14)


def test_spectral_density_frozen_value():
    # [DERIVED] S(0.5) for ell=0.4, sigma_f=1.3, computed independently
    assert rbf_spectral_density(0.5, KP) == pytest.approx(0.7693632749849679, rel=1e-13)


def test_spectral_density_integrates_to_variance():
    # [DERIVED] integral of S ds = k(0) = sigma_f^2
    s = np.linspace(-6, 6, 40001)
    total = np.trapezoid(rbf_spectral_density(s, KP), s)
    assert total == pytest.approx(1.3 ** 2, rel=1e-8)


def test_noise_params_sigma_property():
    noise = NoiseParams(np.log(0.08), np.array([0.0, 1.0]), 0.5)
    assert np.allclose(noise.sigma, [0.08, 0.08 * np.e])
