"""RBF kernel, its input and hyperparameter derivatives, channel noise
covariance, and the stationary-kernel spectral density.

All functions here are pure and operate on plain floats / numpy arrays.
Positions are one-dimensional reals (radial profile coordinate).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KernelParams",
    "NoiseParams",
    "rbf",
    "rbf_matrix",
    "rbf_cross_deriv",
    "deriv_prior_var",
    "deriv_prior_cov",
    "rbf_hyper_grads",
    "noise_cov",
    "rbf_spectral_density",
]


@dataclass(frozen=True)
class KernelParams:
    """Latent-function kernel parameters, stored in log space.

    k(x, x') = sigma_f^2 * exp(-(x - x')^2 / (2 ell^2))
    """

    log_length_scale: float
    log_signal_sigma: float

    def __post_init__(self):
        if not np.isfinite(self.log_length_scale):
            raise ValueError("log_length_scale must be finite")
        if not np.isfinite(self.log_signal_sigma):
            raise ValueError("log_signal_sigma must be finite")

    @property
    def length_scale(self) -> float:
        return float(np.exp(self.log_length_scale))

    @property
    def signal_sigma(self) -> float:
        return float(np.exp(self.log_signal_sigma))


@dataclass(frozen=True)
class NoiseParams:
    """Hierarchical channel-dependent noise: sigma_i = sigma_b * exp(eta_i).

    `hyper_scale` is the prior standard deviation of the per-channel
    offsets eta_i (the second level of the hierarchy; the prior density
    itself lives in the likelihood module).
    """

    log_sigma_base: float
    log_eta: np.ndarray
    hyper_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "log_eta", np.atleast_1d(np.asarray(self.log_eta, dtype=float)))
        if not np.isfinite(self.log_sigma_base):
            raise ValueError("log_sigma_base must be finite")
        if not np.all(np.isfinite(self.log_eta)):
            raise ValueError("log_eta entries must be finite")
        if not (self.hyper_scale > 0):
            raise ValueError("hyper_scale must be positive")

    @property
    def n_channels(self) -> int:
        return self.log_eta.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        """Per-channel noise standard deviations sigma_b * exp(eta_i)."""
        return np.exp(self.log_sigma_base + self.log_eta)


def rbf(x: float, x2: float, kp: KernelParams) -> float:
    """Squared-exponential covariance between two scalar positions."""
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    tau = x - x2
    return sf2 * float(np.exp(-0.5 * tau * tau / (ell * ell)))


def rbf_matrix(X, X2, kp: KernelParams) -> np.ndarray:
    """Kernel matrix K[i, j] = rbf(X[i], X2[j], kp).

    Symmetric positive semidefinite when X is X2.
    """
    X = np.asarray(X, dtype=float).ravel()
    X2 = np.asarray(X2, dtype=float).ravel()
    if X.size == 0 or X2.size == 0:
        raise ValueError("empty position set")
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    tau = X[:, None] - X2[None, :]
    return sf2 * np.exp(-0.5 * tau ** 2 / ell ** 2)


def rbf_cross_deriv(xstar: float, X, kp: KernelParams, order: int) -> np.ndarray:
    """Cross-covariance between the order-th derivative process at `xstar`
    and the latent function at each position in X.

    With tau = xstar - X[i] and k0 the plain RBF value:
      order 0 -> k0
      order 1 -> -(tau/ell^2) k0
      order 2 -> (tau^2/ell^4 - 1/ell^2) k0
    """
    X = np.asarray(X, dtype=float).ravel()
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    tau = xstar - X
    k0 = sf2 * np.exp(-0.5 * tau ** 2 / ell ** 2)
    if order == 0:
        return k0
    if order == 1:
        return -(tau / ell ** 2) * k0
    if order == 2:
        return (tau ** 2 / ell ** 4 - 1.0 / ell ** 2) * k0
    raise ValueError(f"unsupported derivative order: {order}")


def deriv_prior_var(order: int, kp: KernelParams) -> float:
    """Prior variance of the order-th derivative of the GP at any point.

    Equal-order mixed derivative of the RBF kernel at tau = 0:
    sigma_f^2, sigma_f^2/ell^2, 3 sigma_f^2/ell^4 for orders 0, 1, 2.
    """
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    if order == 0:
        return sf2
    if order == 1:
        return sf2 / ell ** 2
    if order == 2:
        return 3.0 * sf2 / ell ** 4
    raise ValueError(f"unsupported derivative order: {order}")


def deriv_prior_cov(grid, kp: KernelParams, order: int) -> np.ndarray:
    """Prior covariance of the order-th derivative process on a grid.

    Equal-order mixed derivatives of the RBF kernel, with k0 the plain
    RBF value and tau the pairwise separation:
      order 0 -> k0
      order 1 -> (1/ell^2 - tau^2/ell^4) k0
      order 2 -> (3/ell^4 - 6 tau^2/ell^6 + tau^4/ell^8) k0
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("empty position set")
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    tau = grid[:, None] - grid[None, :]
    k0 = sf2 * np.exp(-0.5 * tau ** 2 / ell ** 2)
    if order == 0:
        return k0
    if order == 1:
        return (1.0 / ell ** 2 - tau ** 2 / ell ** 4) * k0
    if order == 2:
        return (3.0 / ell ** 4 - 6.0 * tau ** 2 / ell ** 6 + tau ** 4 / ell ** 8) * k0
    raise ValueError(f"unsupported derivative order: {order}")


def rbf_hyper_grads(X, kp: KernelParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the kernel matrix K(X, X) with respect to the
    log-hyperparameters: (dK/dlog ell, dK/dlog sigma_f).

    dk/dlog ell = k * tau^2 / ell^2;  dk/dlog sigma_f = 2 k.
    """
    X = np.asarray(X, dtype=float).ravel()
    if X.size == 0:
        raise ValueError("empty position set")
    ell = kp.length_scale
    K = rbf_matrix(X, X, kp)
    tau = X[:, None] - X[None, :]
    return K * tau ** 2 / ell ** 2, 2.0 * K


def noise_cov(noise: NoiseParams, active) -> np.ndarray:
    """Diagonal noise covariance restricted to the `active` channels.

    Entries are sigma_i^2 = sigma_b^2 * exp(2 eta_i).
    """
    active = np.asarray(active, dtype=int).ravel()
    n = noise.n_channels
    if active.size and (active.min() < 0 or active.max() >= n):
        raise IndexError(f"channel index out of range [0, {n})")
    var = noise.sigma[active] ** 2
    return np.diag(var)


def rbf_spectral_density(s, kp: KernelParams):
    """Spectral density of the RBF kernel.

    Fourier pair convention K(tau) = int S(s) e^{2 pi i s tau} ds, so
    S(s) = sigma_f^2 * sqrt(2 pi) * ell * exp(-2 pi^2 ell^2 s^2)
    and the integral of S over all s equals K(0) = sigma_f^2.
    """
    s = np.asarray(s, dtype=float)
    ell = kp.length_scale
    sf2 = kp.signal_sigma ** 2
    out = sf2 * np.sqrt(2.0 * np.pi) * ell * np.exp(-2.0 * np.pi ** 2 * ell ** 2 * s ** 2)
    return float(out) if out.ndim == 0 else out
