"""Command-line pipeline: ingest observation CSVs, run the two-stage
inference, and emit post-calibrated data, posterior-band CSVs, figures,
and machine-readable result summaries.

Subcommands: synth, fit, calibrate, derivatives, spectrum.
Exit codes: 0 success, 1 error, 2 finished with convergence warnings.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .inference import (
    McmcChain,
    McmcConfig,
    MapSettings,
    default_grid,
    fit_map,
    sample_factors,
    summarize,
)
from .io import (
    FORMAT_VERSION,
    IngestError,
    emit_csv,
    ingest,
    read_config_file,
    write_band_csv,
    write_json,
)
from .kernels import KernelParams, NoiseParams, rbf_spectral_density
from .likelihood import HyperParams, Priors
from .model import CalibrationFactors, center_profiles, post_calibrate
from .rng import derive_seed
from .synth import default_config, generate

__all__ = ["RunConfig", "run_pipeline", "main"]

# Mini-batch size the method is designed around; the zero-mean independence
# assumption degrades for many profiles, so larger batches get a warning.
RECOMMENDED_BATCH = 6


@dataclass(frozen=True)
class RunConfig:
    input: str = ""
    outdir: str = "out"
    # priors
    factor_scale: float = 0.1
    noise_hyper_scale: float = 0.5
    log_length_scale_min: float = float(np.log(1e-2))
    log_length_scale_max: float = float(np.log(1e1))
    log_signal_min: float = float(np.log(1e-3))
    log_signal_max: float = float(np.log(1e3))
    log_base_noise_min: float = float(np.log(1e-5))
    log_base_noise_max: float = float(np.log(1e1))
    # mcmc
    samples: int = 10000
    burn_in: int = 1000
    thin: int = 1
    chains: int = 4
    target_accept: float = 0.234
    init_step: float = 0.02
    seed: int = 0
    # reporting
    grid_size: int = 200
    orders: tuple[int, ...] = (0, 1, 2)
    renormalize_gains: bool = False
    max_summary_samples: int = 500
    draws_per_sample: int = 2
    figures: bool = True
    format_version: str = FORMAT_VERSION

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if not set(self.orders) <= {0, 1, 2}:
            raise ValueError("orders must be a subset of {0, 1, 2}")

    def priors(self) -> Priors:
        return Priors(
            factor_scale=self.factor_scale,
            noise_hyper_scale=self.noise_hyper_scale,
            length_scale_bounds=(self.log_length_scale_min, self.log_length_scale_max),
            signal_bounds=(self.log_signal_min, self.log_signal_max),
            base_noise_bounds=(self.log_base_noise_min, self.log_base_noise_max),
        )

    def mcmc(self) -> McmcConfig:
        return McmcConfig(
            n_samples=self.samples, burn_in=self.burn_in, thin=self.thin,
            n_chains=self.chains, target_accept=self.target_accept,
            seed=self.seed, init_step=self.init_step,
        )


_BOOL_KEYS = {"renormalize_gains", "figures"}
_TUPLE_KEYS = {"orders"}


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"invalid boolean for {key}: {raw!r}")
    if key in _TUPLE_KEYS:
        return tuple(int(t) for t in raw.replace(",", " ").split())
    ftype = {f.name: f.type for f in fields(RunConfig)}[key]
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def load_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- CLI overrides, in that order."""
    values: dict = {}
    if config_path:
        names = {f.name for f in fields(RunConfig)}
        for key, raw in read_config_file(config_path).items():
            if key not in names:
                raise ValueError(f"unknown config key: {key}")
            values[key] = _coerce(key, raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _geo_renormalize(log_a: np.ndarray) -> np.ndarray:
    return log_a - log_a.mean()


def _write_chain_csv(path, chain: McmcChain, channel_ids) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# format_version", FORMAT_VERSION,
                    "n_chains", chain.n_chains, "n_kept", chain.n_kept,
                    "seed", chain.seed])
        w.writerow(list(channel_ids))
        for row in chain.samples:
            w.writerow([format(v, ".17g") for v in row])


def _read_chain_csv(path) -> tuple[np.ndarray, int, int, int]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        meta = next(reader)
        n_chains = int(meta[meta.index("n_chains") + 1])
        n_kept = int(meta[meta.index("n_kept") + 1])
        seed = int(meta[meta.index("seed") + 1])
        next(reader)  # channel ids
        samples = np.array([[float(v) for v in row] for row in reader])
    return samples, n_chains, n_kept, seed


def _hyperparams_payload(theta: HyperParams) -> dict:
    return {
        "log_length_scale": float(theta.kernel.log_length_scale),
        "length_scale": theta.kernel.length_scale,
        "log_signal_sigma": float(theta.kernel.log_signal_sigma),
        "signal_sigma": theta.kernel.signal_sigma,
        "log_sigma_base": float(theta.noise.log_sigma_base),
        "sigma_base": float(np.exp(theta.noise.log_sigma_base)),
        "log_eta": [float(v) for v in theta.noise.log_eta],
        "noise_hyper_scale": float(theta.noise.hyper_scale),
        "sigma_per_channel": [float(v) for v in theta.noise.sigma],
        "log_a_map": [float(v) for v in theta.factors.log_a],
    }


def _hyperparams_from_payload(payload: dict) -> HyperParams:
    return HyperParams(
        kernel=KernelParams(payload["log_length_scale"], payload["log_signal_sigma"]),
        noise=NoiseParams(payload["log_sigma_base"], np.array(payload["log_eta"]),
                          payload["noise_hyper_scale"]),
        factors=CalibrationFactors(np.array(payload["log_a_map"])),
    )


def run_pipeline(cfg: RunConfig) -> int:
    """Full calibrate pipeline; returns the process exit code."""
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    ps = _staged("ingest", ingest, cfg.input)
    if ps.n_profiles > RECOMMENDED_BATCH:
        print(f"warning: {ps.n_profiles} profiles exceed the recommended "
              f"mini-batch of {RECOMMENDED_BATCH}; the zero-mean independence "
              "assumption over latent profiles weakens for large batches",
              file=sys.stderr)
    centered, _ = _staged("center", center_profiles, ps)
    priors = cfg.priors()
    theta = _staged("fit_map", fit_map, centered, priors)
    chain = _staged("mcmc", sample_factors, centered, theta, priors, cfg.mcmc())
    grid = default_grid(ps, cfg.grid_size)
    summary_seed = derive_seed(cfg.seed, 0x5335)
    summary = _staged(
        "summarize", summarize, ps, theta, chain.subsample(cfg.max_summary_samples),
        grid, cfg.orders, cfg.draws_per_sample, summary_seed)

    log_a_med = np.median(chain.samples, axis=0)
    log_a_lo = np.quantile(chain.samples, 0.025, axis=0)
    log_a_hi = np.quantile(chain.samples, 0.975, axis=0)
    factors_med = CalibrationFactors(log_a_med)
    calibrated = _staged("post_calibrate", post_calibrate, ps, factors_med)

    channels = []
    log_a_renorm = _geo_renormalize(log_a_med)
    for i, cid in enumerate(ps.channel_ids):
        entry = {
            "id": cid,
            "position": float(ps.positions[i]),
            "a_median": float(np.exp(log_a_med[i])),
            "a_lower95": float(np.exp(log_a_lo[i])),
            "a_upper95": float(np.exp(log_a_hi[i])),
            "sigma": float(theta.noise.sigma[i]),
        }
        if cfg.renormalize_gains:
            entry["a_median_renormalized"] = float(np.exp(log_a_renorm[i]))
        channels.append(entry)

    write_json(outdir / "calibration.json", {
        "map_hyperparams": _hyperparams_payload(theta),
        "channels": channels,
        "gain_scaling": "posterior_median",
        "renormalize_gains": cfg.renormalize_gains,
        "diagnostics": {
            "acceptance_rate": float(chain.acceptance_rate),
            "split_rhat": [float(v) for v in chain.split_rhat],
            "ess": [float(v) for v in chain.ess],
            "converged": bool(chain.converged),
        },
        "seed": cfg.seed,
    })
    for order in cfg.orders:
        write_band_csv(outdir / f"posterior_order{order}.csv", grid,
                       ps.profile_ids, summary.median[order],
                       summary.lower95[order], summary.upper95[order])
    emit_csv(calibrated, outdir / "calibrated.csv")
    _write_chain_csv(outdir / "chain.csv", chain, ps.channel_ids)
    write_json(outdir / "run_manifest.json", {
        "gpcalib_version": __version__,
        "seed": cfg.seed,
        "summary_seed": summary_seed,
        "config": {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v)
                   for f in fields(cfg)},
    })

    if cfg.figures:
        from .plots import plot_calibration_factors, plot_posterior_bands
        figdir = outdir / "figures"
        figdir.mkdir(exist_ok=True)
        for order in cfg.orders:
            plot_posterior_bands(summary, ps, order,
                                 figdir / f"posterior_order{order}.png")
        plot_calibration_factors(
            ps.channel_ids, ps.positions,
            np.exp(log_a_med), np.exp(log_a_lo), np.exp(log_a_hi),
            figdir / "calibration.png")

    if not chain.converged:
        print("warning: chains not converged (split R-hat > 1.05)", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = default_config(seed=args.seed, n_channels=args.channels,
                         n_profiles=args.profiles)
    ps, truth = generate(cfg)
    emit_csv(ps, outdir / "data.csv")
    write_json(outdir / "ground_truth.json", {
        "seed": args.seed,
        "true_log_a": [float(v) for v in truth.true_factors.log_a],
        "true_sigma": [float(v) for v in truth.true_noise.sigma],
        "kernel": {
            "log_length_scale": float(truth.kernel.log_length_scale),
            "log_signal_sigma": float(truth.kernel.log_signal_sigma),
        },
        "latents": [[float(v) for v in row] for row in truth.latents],
        "positions": [float(v) for v in ps.positions],
    })
    print(f"wrote {outdir / 'data.csv'} and {outdir / 'ground_truth.json'}")
    return 0


def _cmd_fit(args) -> int:
    cfg = load_run_config(args.config, _pipeline_overrides(args))
    ps = ingest(cfg.input)
    centered, _ = center_profiles(ps)
    theta = fit_map(centered, cfg.priors())
    print(json.dumps(_hyperparams_payload(theta), indent=2, sort_keys=True))
    return 0


def _cmd_calibrate(args) -> int:
    cfg = load_run_config(args.config, _pipeline_overrides(args))
    return run_pipeline(cfg)


def _cmd_derivatives(args) -> int:
    cfg = load_run_config(args.config, _pipeline_overrides(args))
    rundir = Path(args.rundir)
    calib = json.loads((rundir / "calibration.json").read_text())
    theta = _hyperparams_from_payload(calib["map_hyperparams"])
    samples, n_chains, n_kept, seed = _read_chain_csv(rundir / "chain.csv")
    chain = McmcChain(
        samples=samples, acceptance_rate=0.5,
        split_rhat=np.full(samples.shape[1], np.nan),
        ess=np.full(samples.shape[1], np.nan),
        seed=seed, n_chains=n_chains, n_kept=n_kept,
        n_accepted=0, n_proposed=0, converged=True,
    )
    ps = ingest(cfg.input)
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = default_grid(ps, cfg.grid_size)
    summary = summarize(ps, theta, chain.subsample(cfg.max_summary_samples), grid,
                        cfg.orders, cfg.draws_per_sample,
                        derive_seed(cfg.seed, 0x5335))
    for order in cfg.orders:
        write_band_csv(outdir / f"posterior_order{order}.csv", grid,
                       ps.profile_ids, summary.median[order],
                       summary.lower95[order], summary.upper95[order])
        if cfg.figures:
            from .plots import plot_posterior_bands
            figdir = outdir / "figures"
            figdir.mkdir(exist_ok=True)
            plot_posterior_bands(summary, ps, order,
                                 figdir / f"posterior_order{order}.png")
    return 0


def _cmd_spectrum(args) -> int:
    kp = KernelParams(np.log(args.length_scale), np.log(args.signal_sigma))
    s = np.linspace(0.0, args.smax, args.grid_size)
    sf = rbf_spectral_density(s, kp)
    sn = np.full_like(s, args.noise_sigma ** 2)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# format_version", FORMAT_VERSION])
        w.writerow(["s", "S_f", "S_n", "S_total"])
        for k in range(s.size):
            w.writerow([format(v, ".17g") for v in (s[k], sf[k], sn[k], sf[k] + sn[k])])
    print(f"wrote {out}")
    return 0


def _pipeline_overrides(args) -> dict:
    out = {
        "input": getattr(args, "input", None),
        "outdir": getattr(args, "outdir", None),
        "seed": getattr(args, "seed", None),
        "grid_size": getattr(args, "grid_size", None),
        "renormalize_gains": getattr(args, "renormalize_gains", None) or None,
        "chains": getattr(args, "chains", None),
        "samples": getattr(args, "samples", None),
        "burn_in": getattr(args, "burn_in", None),
        "thin": getattr(args, "thin", None),
        "figures": False if getattr(args, "no_figures", False) else None,
    }
    orders = getattr(args, "orders", None)
    if orders is not None:
        out["orders"] = tuple(int(t) for t in orders.replace(",", " ").split())
    return out


def _add_pipeline_flags(p: argparse.ArgumentParser, need_input: bool = True):
    p.add_argument("--input", required=need_input, help="observation CSV")
    p.add_argument("--outdir", help="output directory")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--orders", help="comma-separated derivative orders, e.g. 0,1,2")
    p.add_argument("--renormalize-gains", dest="renormalize_gains", action="store_true")
    p.add_argument("--chains", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--no-figures", dest="no_figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpcalib",
        description="Self-calibration of multichannel profile measurements "
                    "via hierarchical GP regression",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("--outdir", default="synth_out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=24)
    p.add_argument("--profiles", type=int, default=6)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("fit", help="stage 1 only: print MAP hyperparameters")
    _add_pipeline_flags(p)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("calibrate", help="full two-stage pipeline")
    _add_pipeline_flags(p)
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("derivatives",
                       help="posterior summaries for given orders from a saved chain")
    _add_pipeline_flags(p)
    p.add_argument("--rundir", required=True,
                   help="directory of a previous calibrate run (chain.csv, calibration.json)")
    p.set_defaults(fn=_cmd_derivatives)

    p = sub.add_parser("spectrum", help="spectral density table S_f, S_n, S_total")
    p.add_argument("--length-scale", dest="length_scale", type=float, required=True)
    p.add_argument("--signal-sigma", dest="signal_sigma", type=float, default=1.0)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--smax", type=float, default=10.0)
    p.add_argument("--grid-size", dest="grid_size", type=int, default=200)
    p.add_argument("--output", default="spectrum.csv")
    p.set_defaults(fn=_cmd_spectrum)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IngestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
