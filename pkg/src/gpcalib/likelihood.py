"""Gaussian marginal likelihood and log marginal posterior of the
hierarchical calibration model, with analytic gradients.

The observed covariance per profile is C = A K_f A + Sigma_n restricted
to the masked-in channels, where A = diag(a_i), K_f is the RBF kernel
matrix and Sigma_n the diagonal channel-noise covariance. Profiles are
independent given the hyperparameters, so the mini-batch likelihood is
the sum of M Gaussian log densities.

Parameter vector ordering used by the gradient (length 3 + 2N):
[log ell, log sigma_f, log sigma_b, eta_0..eta_{N-1}, log a_0..log a_{N-1}].
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .kernels import KernelParams, NoiseParams, rbf_matrix, rbf_hyper_grads
from .model import CalibrationFactors, ProfileSet, MIN_CHANNELS_PER_PROFILE

__all__ = [
    "HyperParams",
    "Priors",
    "CovarianceNotPD",
    "observed_cov",
    "chol_with_jitter",
    "log_marginal_likelihood",
    "log_marginal_posterior",
    "grad_log_marginal_posterior",
    "pack_params",
    "unpack_params",
]

DEFAULT_JITTER = 1e-10
JITTER_ESCALATIONS = 3
LOG_2PI = float(np.log(2.0 * np.pi))


class CovarianceNotPD(Exception):
    """Raised when the observed covariance stays non-PD after jitter escalation."""


@dataclass(frozen=True)
class HyperParams:
    """Full parameter vector of the hierarchical model."""

    kernel: KernelParams
    noise: NoiseParams
    factors: CalibrationFactors

    def __post_init__(self):
        if self.noise.n_channels != self.factors.n_channels:
            raise ValueError("noise and factor channel counts disagree")

    @property
    def n_channels(self) -> int:
        return self.factors.n_channels

    def with_factors(self, log_a: np.ndarray) -> "HyperParams":
        return replace(self, factors=CalibrationFactors(log_a))


@dataclass(frozen=True)
class Priors:
    """Hyperparameter priors.

    log a_i ~ Normal(0, factor_scale^2), eta_i ~ Normal(0, noise_hyper_scale^2),
    and flat bounded priors in log space for ell, sigma_f and sigma_b.
    """

    factor_scale: float = 0.1
    noise_hyper_scale: float = 0.5
    length_scale_bounds: tuple[float, float] = (np.log(1e-2), np.log(1e1))
    signal_bounds: tuple[float, float] = (np.log(1e-3), np.log(1e3))
    base_noise_bounds: tuple[float, float] = (np.log(1e-5), np.log(1e1))

    def __post_init__(self):
        if not (self.factor_scale > 0 and self.noise_hyper_scale > 0):
            raise ValueError("prior scales must be positive")
        for lo, hi in (self.length_scale_bounds, self.signal_bounds, self.base_noise_bounds):
            if not lo < hi:
                raise ValueError("prior bounds must satisfy lower < upper")

    def in_bounds(self, kernel: KernelParams, log_sigma_base: float) -> bool:
        lo, hi = self.length_scale_bounds
        if not lo <= kernel.log_length_scale <= hi:
            return False
        lo, hi = self.signal_bounds
        if not lo <= kernel.log_signal_sigma <= hi:
            return False
        lo, hi = self.base_noise_bounds
        return lo <= log_sigma_base <= hi


def pack_params(hp: HyperParams) -> np.ndarray:
    """Flatten hyperparameters to the gradient's parameter ordering."""
    return np.concatenate([
        [hp.kernel.log_length_scale, hp.kernel.log_signal_sigma, hp.noise.log_sigma_base],
        hp.noise.log_eta,
        hp.factors.log_a,
    ])


def unpack_params(theta: np.ndarray, n_channels: int, hyper_scale: float) -> HyperParams:
    """Inverse of pack_params."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3 + 2 * n_channels,):
        raise ValueError(f"expected parameter vector of length {3 + 2 * n_channels}")
    return HyperParams(
        kernel=KernelParams(theta[0], theta[1]),
        noise=NoiseParams(theta[2], theta[3:3 + n_channels], hyper_scale),
        factors=CalibrationFactors(theta[3 + n_channels:]),
    )


def observed_cov(active_positions, hp: HyperParams, active) -> np.ndarray:
    """Observed covariance C = A K_f A + Sigma_n on the active channels."""
    active = np.asarray(active, dtype=int).ravel()
    if active.size == 0:
        raise ValueError("no active channels")
    a = hp.factors.a[active]
    K = rbf_matrix(active_positions, active_positions, hp.kernel)
    C = K * np.outer(a, a)
    C[np.diag_indices_from(C)] += hp.noise.sigma[active] ** 2
    return C


def chol_with_jitter(C: np.ndarray, jitter: float = DEFAULT_JITTER):
    """Cholesky factor of C + jitter*mean(diag(C))*I, escalating the jitter
    by 10x up to three times before giving up."""
    base = jitter * float(np.trace(C)) / C.shape[0]
    if base <= 0.0:
        base = jitter
    # exact matrix first: adding jitter unconditionally would perturb the
    # density even when C is comfortably positive definite
    scale = 0.0
    for _ in range(JITTER_ESCALATIONS + 1):
        try:
            return cho_factor(C + scale * base * np.eye(C.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            scale = 10.0 * scale if scale else 1.0
    raise CovarianceNotPD("covariance not PD")


def _profile_blocks(ps: ProfileSet):
    """Yield (profile index, active channel indices, masked data vector)."""
    for j in range(ps.n_profiles):
        idx = np.nonzero(ps.mask[:, j])[0]
        if idx.size < MIN_CHANNELS_PER_PROFILE:
            raise ValueError(
                f"profile {ps.profile_ids[j]} has fewer than "
                f"{MIN_CHANNELS_PER_PROFILE} masked-in channels"
            )
        yield j, idx, ps.data[idx, j]


def log_marginal_likelihood(ps: ProfileSet, hp: HyperParams,
                            jitter: float = DEFAULT_JITTER) -> float:
    """Sum over profiles of the Gaussian log density N(d_j; 0, C_j).

    Expects a centered ProfileSet (zero-mean GP assumption). Computed via
    Cholesky; deterministic.
    """
    total = 0.0
    for _, idx, d in _profile_blocks(ps):
        C = observed_cov(ps.positions[idx], hp, idx)
        cf = chol_with_jitter(C, jitter)
        alpha = cho_solve(cf, d)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        total += -0.5 * float(d @ alpha) - 0.5 * logdet - 0.5 * d.size * LOG_2PI
    return total


def _log_normal_density(x: np.ndarray, scale: float) -> float:
    x = np.atleast_1d(x)
    return float(-0.5 * np.sum(x ** 2) / scale ** 2
                 - x.size * (0.5 * LOG_2PI + np.log(scale)))


def log_marginal_posterior(ps: ProfileSet, hp: HyperParams, pr: Priors,
                           jitter: float = DEFAULT_JITTER) -> float:
    """Marginal likelihood plus hyperparameter log priors.

    Returns -inf (not an error) when a flat-prior parameter is outside
    its bounds.
    """
    if not pr.in_bounds(hp.kernel, hp.noise.log_sigma_base):
        return -np.inf
    lp = _log_normal_density(hp.factors.log_a, pr.factor_scale)
    lp += _log_normal_density(hp.noise.log_eta, pr.noise_hyper_scale)
    return log_marginal_likelihood(ps, hp, jitter) + lp


def grad_log_marginal_posterior(ps: ProfileSet, hp: HyperParams, pr: Priors,
                                jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Analytic gradient of log_marginal_posterior in pack_params ordering.

    Per profile, d/dtheta = 0.5*[alpha' (dC/dtheta) alpha - tr(C^-1 dC/dtheta)]
    with alpha = C^-1 d. Channels masked out of a profile contribute nothing
    to that profile's terms; their eta_i and log a_i keep prior gradients.
    """
    n = ps.n_channels
    grad = np.zeros(3 + 2 * n)
    a_full = hp.factors.a
    sig2_full = hp.noise.sigma ** 2
    for _, idx, d in _profile_blocks(ps):
        x = ps.positions[idx]
        a = a_full[idx]
        C = observed_cov(x, hp, idx)
        cf = chol_with_jitter(C, jitter)
        alpha = cho_solve(cf, d)
        Cinv = cho_solve(cf, np.eye(idx.size))

        K = rbf_matrix(x, x, hp.kernel)
        B = K * np.outer(a, a)
        dK_dl, dK_ds = rbf_hyper_grads(x, hp.kernel)
        for k, dK in ((0, dK_dl), (1, dK_ds)):
            dC = dK * np.outer(a, a)
            grad[k] += 0.5 * (alpha @ dC @ alpha - float(np.sum(Cinv * dC)))

        sig2 = sig2_full[idx]
        # dC/deta_i = 2 sigma_i^2 e_i e_i'; dC/dlog sigma_b = 2 Sigma_n
        eta_terms = sig2 * (alpha ** 2 - np.diag(Cinv))
        grad[2] += float(np.sum(eta_terms))
        grad[3 + idx] += eta_terms
        # dC/dlog a_i hits row i and column i of B; quadratic and trace
        # terms reduce to 2 alpha_i (B alpha)_i and 2 (C^-1 B)_{ii}
        grad[3 + n + idx] += alpha * (B @ alpha) - np.einsum("ij,ji->i", Cinv, B)

    grad[3:3 + n] += -hp.noise.log_eta / pr.noise_hyper_scale ** 2
    grad[3 + n:] += -hp.factors.log_a / pr.factor_scale ** 2
    return grad


# ---------------------------------------------------------------------------
# Mean-removed (centered-data) likelihood
#
# Centering forces each profile's masked-in mean to exactly zero, so the
# centered data live on the mean-free subspace and their true density under
# the model d ~ N(0, C) is the Gaussian restricted to that subspace:
# y = Q'd ~ N(0, Q'CQ) with Q an orthonormal basis of 1-perp. Evaluating the
# full-space density on centered data instead treats the zero mean as an
# observation with variance ~sigma_f^2, which systematically distorts the
# gain and noise estimates; the pipeline therefore optimizes and samples the
# projected form below.
# ---------------------------------------------------------------------------

_HELMERT_CACHE: dict[int, np.ndarray] = {}


def _helmert(n: int) -> np.ndarray:
    """(n-1) x n orthonormal rows spanning the complement of the constant
    vector (Helmert contrasts)."""
    H = _HELMERT_CACHE.get(n)
    if H is None:
        H = np.zeros((n - 1, n))
        for k in range(1, n):
            H[k - 1, :k] = 1.0
            H[k - 1, k] = -k
            H[k - 1] /= np.sqrt(k * (k + 1.0))
        H.setflags(write=False)
        _HELMERT_CACHE[n] = H
    return H


def log_marginal_likelihood_centered(ps: ProfileSet, hp: HyperParams,
                                     jitter: float = DEFAULT_JITTER) -> float:
    """Gaussian log density of the mean-removed data: per profile,
    N(Q'd_j; 0, Q'C_jQ) on the subspace orthogonal to the constant vector."""
    total = 0.0
    for _, idx, d in _profile_blocks(ps):
        C = observed_cov(ps.positions[idx], hp, idx)
        H = _helmert(idx.size)
        Cp = H @ C @ H.T
        y = H @ d
        cf = chol_with_jitter(Cp, jitter)
        alpha = cho_solve(cf, y)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        total += -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * y.size * LOG_2PI
    return total


def log_marginal_posterior_centered(ps: ProfileSet, hp: HyperParams, pr: Priors,
                                    jitter: float = DEFAULT_JITTER) -> float:
    """Mean-removed marginal likelihood plus the hyperparameter priors."""
    if not pr.in_bounds(hp.kernel, hp.noise.log_sigma_base):
        return -np.inf
    lp = _log_normal_density(hp.factors.log_a, pr.factor_scale)
    lp += _log_normal_density(hp.noise.log_eta, pr.noise_hyper_scale)
    return log_marginal_likelihood_centered(ps, hp, jitter) + lp


def grad_log_marginal_posterior_centered(ps: ProfileSet, hp: HyperParams, pr: Priors,
                                         jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Analytic gradient of log_marginal_posterior_centered.

    Same trace/quadratic identities as the unprojected gradient, with
    u = Q alpha in place of alpha and W = Q (Q'CQ)^-1 Q' in place of C^-1.
    """
    n = ps.n_channels
    grad = np.zeros(3 + 2 * n)
    a_full = hp.factors.a
    sig2_full = hp.noise.sigma ** 2
    for _, idx, d in _profile_blocks(ps):
        x = ps.positions[idx]
        a = a_full[idx]
        C = observed_cov(x, hp, idx)
        H = _helmert(idx.size)
        Cp = H @ C @ H.T
        cf = chol_with_jitter(Cp, jitter)
        y = H @ d
        u = H.T @ cho_solve(cf, y)
        W = H.T @ cho_solve(cf, H)

        K = rbf_matrix(x, x, hp.kernel)
        B = K * np.outer(a, a)
        dK_dl, dK_ds = rbf_hyper_grads(x, hp.kernel)
        for k, dK in ((0, dK_dl), (1, dK_ds)):
            dC = dK * np.outer(a, a)
            grad[k] += 0.5 * (u @ dC @ u - float(np.sum(W * dC)))

        sig2 = sig2_full[idx]
        eta_terms = sig2 * (u ** 2 - np.diag(W))
        grad[2] += float(np.sum(eta_terms))
        grad[3 + idx] += eta_terms
        grad[3 + n + idx] += u * (B @ u) - np.einsum("ij,ji->i", W, B)

    grad[3:3 + n] += -hp.noise.log_eta / pr.noise_hyper_scale ** 2
    grad[3 + n:] += -hp.factors.log_a / pr.factor_scale ** 2
    return grad
