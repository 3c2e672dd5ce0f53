"""Self-calibration of multichannel profile measurements via hierarchical
Gaussian-process regression: joint inference of per-channel gains and
channel-dependent noise amplitudes, with posterior bands for the latent
profile and its first two spatial derivatives."""

__version__ = "0.1.0"

from .kernels import (
    KernelParams,
    NoiseParams,
    deriv_prior_var,
    noise_cov,
    rbf,
    rbf_cross_deriv,
    rbf_hyper_grads,
    rbf_matrix,
    rbf_spectral_density,
)
from .model import (
    CalibrationFactors,
    GroundTruth,
    ProfileSet,
    center_profiles,
    post_calibrate,
    uncenter_profiles,
    validate,
)
from .io import FORMAT_VERSION, IngestError, emit_csv, ingest, write_band_csv
from .likelihood import (
    CovarianceNotPD,
    HyperParams,
    Priors,
    grad_log_marginal_posterior,
    log_marginal_likelihood,
    log_marginal_posterior,
    observed_cov,
)
from .inference import (
    DiagnosticsReport,
    MapFailedError,
    MapSettings,
    McmcChain,
    McmcConfig,
    PosteriorSummary,
    default_grid,
    diagnostics,
    fit_map,
    latent_posterior,
    sample_factors,
    summarize,
)
from .synth import SynthConfig, default_config, generate, sample_gp, sample_gp_with_derivative
