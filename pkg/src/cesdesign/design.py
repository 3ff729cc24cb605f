"""Two-stage targeted design: rank candidate locations, then quantify uncertainty.

The design stage spends its whole forward-model budget up front: one control
run at the prior mean (which also supplies the data sample) and one ensemble
Kalman calibration against the full statistics vector. Every candidate design
then only restricts those outputs, trains emulators and samples, so the cost
in model runs does not grow with the number of designs.

The uncertainty-quantification stage generates synthetic local data at a
chosen design from a "true" parameter, recalibrates against it, and returns
the emulator-based posterior.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from .config import PipelineConfig
from .core import (
    SEASON_NAMES,
    DesignSpace,
    GaussianPrior,
    PhysicalParams,
    Restriction,
    build_obs_noise,
    build_prior,
    enumerate_designs,
    estimate_covariance,
    expand_bounds,
    loaded_covariance,
    restrict,
    restrict_cov,
    transform_forward,
)
from .eki import TrainingSet, run_calibration
from .forward import AnalyticAquaplanet, ForwardModel, TwoScaleLorenz96, derive_seed
from .gp import GPEmulator, fit_decorrelator, fit_scalar_gp
from .mcmc import PosteriorSampleSet, SamplerError, posterior_cov, run_chain

log = logging.getLogger(__name__)

# Sub-stream addresses under the master seed.
_CONTROL, _EKI, _DESIGN = 1, 2, 3
CONTROL_STREAM = _CONTROL
_UQ_CONTROL, _UQ_DATA, _UQ_NOISE, _UQ_EKI, _UQ_GP, _UQ_CHAIN = 4, 5, 6, 7, 8, 9
UQ_CONTROL_STREAM = _UQ_CONTROL


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------


def log_det_posterior(ps: PosteriorSampleSet) -> float:
    """``log det`` of the empirical posterior covariance; ``-inf`` when singular."""
    sign, logdet = np.linalg.slogdet(posterior_cov(ps))
    return float(logdet) if sign > 0 else -math.inf


def d_utility(ps: PosteriorSampleSet) -> float:
    """``log U = -log det Cov(theta | data)``; ``+inf`` flags a degenerate sample set."""
    return -log_det_posterior(ps)


@dataclass
class DesignResult:
    design_id: str
    index: int
    latitude: float
    season: int | None
    log_utility: float = math.nan
    log_det_cov: float = math.nan
    acceptance_rate: float = math.nan
    status: str = "ok"
    message: str = ""
    samples: PosteriorSampleSet | None = None

    @property
    def season_name(self) -> str:
        return "" if self.season is None else SEASON_NAMES[self.season]

    @property
    def eligible(self) -> bool:
        return self.status == "ok" and np.isfinite(self.log_utility)


@dataclass
class UtilityTable:
    rows: list[DesignResult]
    n_evaluations: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def _argmax(self, rows) -> DesignResult:
        best = None
        for row in rows:  # ties go to the lowest design index
            if row.eligible and (best is None or row.log_utility > best.log_utility):
                best = row
        if best is None:
            raise RuntimeError("no design produced a usable posterior")
        return best

    @property
    def argmax(self) -> DesignResult:
        return self._argmax(sorted(self.rows, key=lambda r: r.index))

    def argmax_by_season(self) -> dict[int | None, DesignResult]:
        seasons = sorted({r.season for r in self.rows}, key=lambda s: -1 if s is None else s)
        return {s: self._argmax(sorted((r for r in self.rows if r.season == s), key=lambda r: r.index))
                for s in seasons}

    def log_utilities(self) -> np.ndarray:
        return np.array([r.log_utility for r in self.rows])

    def by_id(self, design_id: str) -> DesignResult:
        for row in self.rows:
            if row.design_id == design_id:
                return row
        raise KeyError(design_id)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def build_model(cfg: PipelineConfig) -> ForwardModel:
    cfg = cfg.resolved()
    cls = {"analytic": AnalyticAquaplanet, "lorenz96": TwoScaleLorenz96}[cfg.model.name]
    return cls(mode=cfg.design.mode, n_lat=cfg.model.n_lat, window_days=cfg.model.window_days)


def design_space(cfg: PipelineConfig, model: ForwardModel | None = None) -> DesignSpace:
    cfg = cfg.resolved()
    n_lat = cfg.model.n_lat if model is None else model.space.n_lat
    n_stats = 3 if model is None else model.space.n_stats
    return DesignSpace(mode=cfg.design.mode, n_lat=n_lat, stencil=cfg.design.stencil, n_stats=n_stats)


def prior_from_config(cfg: PipelineConfig) -> GaussianPrior:
    return build_prior(cfg.prior.prior_config())


@dataclass
class DesignData:
    """Everything the per-design tasks share: data sample, noise, training pairs."""

    theta_star: np.ndarray
    control: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    training: TrainingSet | None = None


def control_data(model: ForwardModel, theta, cfg: PipelineConfig, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Control run at ``theta``: (retained windows, covariance, last window).

    The last retained window doubles as the data sample, so no extra model
    run is spent on it.
    """
    cfg = cfg.resolved()
    control = model.run_control(theta, cfg.control.n_windows, cfg.control.n_spinup, seed)
    sigma = estimate_covariance(control)
    return control, sigma, control[-1].copy()


def prepare_design_data(model: ForwardModel, prior: GaussianPrior, cfg: PipelineConfig, seed,
                        calibrate: bool = True) -> DesignData:
    cfg = cfg.resolved()
    theta_star = prior.mean.copy()
    control, sigma, y = control_data(model, theta_star, cfg, derive_seed(seed, _CONTROL))
    data = DesignData(theta_star, control, sigma, y)
    if calibrate:
        weight = loaded_covariance(2.0 * sigma, control.shape[0])
        data.training = run_calibration(model, prior, y, weight, J=cfg.eki.ensemble_size,
                                        n_iter=cfg.eki.n_iter, seed=derive_seed(seed, _EKI),
                                        max_workers=1)
    return data


def fit_emulator(training: TrainingSet, decorrelator, cfg: PipelineConfig, seed,
                 design_id: str | None = None) -> GPEmulator:
    outputs = decorrelator.transform(training.outputs)
    gps = [fit_scalar_gp(training.inputs, outputs[:, i], n_starts=cfg.gp.n_starts,
                         seed=derive_seed(seed, i), subsample=cfg.gp.hyper_subsample,
                         nugget_floor=cfg.gp.nugget_floor, ls_floor=cfg.gp.lengthscale_floor)
           for i in range(outputs.shape[1])]
    return GPEmulator(gps, decorrelator, design_id)


def evaluate_design(w: Restriction, data: DesignData, prior: GaussianPrior, cfg: PipelineConfig,
                    seed) -> DesignResult:
    """Extract, decorrelate, emulate, sample and score one design."""
    result = DesignResult(w.design_id, w.index, w.center_latitude, w.season)
    try:
        dec = fit_decorrelator(restrict_cov(w, data.sigma))
        local = data.training.restricted(w)
        em = fit_emulator(local, dec, cfg, derive_seed(seed, 0), w.design_id)
        ps = run_chain(em, dec.transform(restrict(w, data.y)), prior, cfg.mcmc.chain_config(),
                       seed=derive_seed(seed, 1))
    except (np.linalg.LinAlgError, SamplerError, ValueError, FloatingPointError) as exc:
        log.warning("design %s failed: %s", w.design_id, exc)
        result.status, result.message = "failed", str(exc)
        return result
    result.samples = ps
    result.acceptance_rate = ps.acceptance_rate
    result.log_det_cov = log_det_posterior(ps)
    result.log_utility = -result.log_det_cov
    if not np.isfinite(result.log_utility):
        result.status, result.message = "degenerate", "singular posterior covariance"
    return result


def _design_task(args):
    w, data, prior, cfg, seed = args
    return evaluate_design(w, data, prior, cfg, seed)


def run_designs(designs, data: DesignData, prior: GaussianPrior, cfg: PipelineConfig, seed,
                workers: int = 1) -> list[DesignResult]:
    """Evaluate designs, in a process pool when ``workers > 1``.

    Each design's seed is derived from its index in the design space, so
    results do not depend on worker count or completion order.
    """
    jobs = [(w, data, prior, cfg, derive_seed(seed, _DESIGN, w.index)) for w in designs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_design_task, jobs))
    return [_design_task(job) for job in jobs]


def design_stage(model: ForwardModel, prior: GaussianPrior, ds: DesignSpace, cfg: PipelineConfig,
                 seed=None, designs: list[Restriction] | None = None,
                 return_data: bool = False):
    """Rank designs by D-utility using one control run and one calibration.

    ``designs`` defaults to every design in ``ds``. With ``return_data`` the
    shared :class:`DesignData` is returned alongside the table.
    """
    cfg = cfg.resolved()
    seed = cfg.seed if seed is None else seed
    designs = enumerate_designs(ds) if designs is None else list(designs)
    if not designs:
        raise ValueError("no designs to evaluate")
    start = model.n_evaluations
    data = prepare_design_data(model, prior, cfg, seed)
    used = model.n_evaluations - start
    log.info("design stage: %d forward evaluations, %d designs", used, len(designs))
    rows = run_designs(designs, data, prior, cfg, seed, workers=cfg.workers)
    table = UtilityTable(rows, n_evaluations=used)
    return (table, data) if return_data else table


# ---------------------------------------------------------------------------
# Uncertainty quantification at one design
# ---------------------------------------------------------------------------


@dataclass
class UQResult:
    samples: PosteriorSampleSet
    design_id: str
    theta_true: np.ndarray
    observation: np.ndarray
    obs_noise_sd: np.ndarray
    emulator: GPEmulator = field(repr=False, default=None)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.samples.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        return posterior_cov(self.samples)

    @property
    def log_utility(self) -> float:
        return d_utility(self.samples)


def theta_true_from_config(cfg: PipelineConfig) -> np.ndarray:
    return transform_forward(PhysicalParams(cfg.uq.rh_true, cfg.uq.tau_true_s))


def uq_stage(model: ForwardModel, w: Restriction, theta_dagger, prior: GaussianPrior, cfg: PipelineConfig,
             seed=None, obs_noise: bool | None = None) -> UQResult:
    """Posterior for ``theta`` given synthetic local data at design ``w``.

    The data are ``W G_T(theta_dagger) + delta`` with ``delta`` drawn from the
    bounded observation-noise model, centred on the control-run mean at
    ``theta_dagger``. Calibration is weighted by ``W (2 Sigma) W^T + Delta``;
    emulator outputs are whitened with ``W Sigma W^T + Delta``. The emulators
    are trained on model output, which carries internal variability but no
    observation noise, so the whitened ``Delta`` is added to the emulator
    covariance in the likelihood.
    """
    cfg = cfg.resolved()
    seed = cfg.seed if seed is None else seed
    obs_noise = cfg.uq.obs_noise if obs_noise is None else obs_noise
    theta_dagger = np.asarray(theta_dagger, dtype=float)

    control, sigma, _ = control_data(model, theta_dagger, cfg, derive_seed(seed, _UQ_CONTROL))
    sigma_k = restrict_cov(w, sigma)
    g_t = model.evaluate_batch(theta_dagger[None, :], [derive_seed(seed, _UQ_DATA)])[0]
    if not np.all(np.isfinite(g_t)):
        raise FloatingPointError("forward model failed at the true parameter")
    if obs_noise:
        space = model.space
        bounds = expand_bounds(_model_bounds(model, cfg), space.n_lat, space.n_seasons)
        noise = build_obs_noise(restrict(w, control.mean(axis=0)), sigma_k,
                                [bounds[r] for r in w.rows], C=cfg.noise.C, C_max=cfg.noise.C_max)
        d = noise.d
        delta_k = noise.delta
        rng = np.random.default_rng(derive_seed(seed, _UQ_NOISE))
        z = restrict(w, g_t) + d * rng.standard_normal(d.size)
    else:
        d = np.zeros(w.size)
        delta_k = np.zeros((w.size, w.size))
        z = restrict(w, g_t)

    weight = loaded_covariance(2.0 * sigma_k, control.shape[0]) + delta_k
    training = run_calibration(model, prior, z, weight, J=cfg.eki.ensemble_size, n_iter=cfg.eki.n_iter,
                               seed=derive_seed(seed, _UQ_EKI), restriction=w)
    dec = fit_decorrelator(loaded_covariance(sigma_k, control.shape[0]) + delta_k)
    em = fit_emulator(training, dec, cfg, derive_seed(seed, _UQ_GP), w.design_id)
    extra = dec.transform_cov(delta_k) if obs_noise else None
    ps = run_chain(em, dec.transform(z), prior, cfg.mcmc.chain_config(),
                   seed=derive_seed(seed, _UQ_CHAIN), extra_cov=extra)
    return UQResult(ps, w.design_id, theta_dagger, z, d, em)


def _model_bounds(model: ForwardModel, cfg: PipelineConfig):
    """Configured bounds for the analytic statistics, the model's own otherwise."""
    if model.kind == "analytic":
        return cfg.noise.stat_bounds()
    return list(model.stat_bounds)


# ---------------------------------------------------------------------------
# Highest-density-region membership
# ---------------------------------------------------------------------------


def in_hdr(samples, point, mass: float = 0.99) -> bool:
    """Whether ``point`` lies in the ``mass`` highest-density region.

    The density is a Gaussian KDE of the samples; the region is the set where
    it exceeds its ``1 - mass`` quantile over the samples themselves.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    kde = gaussian_kde(samples.T)
    level = np.quantile(kde(samples.T), 1.0 - mass)
    return bool(kde(np.asarray(point, dtype=float)[:, None])[0] >= level)
