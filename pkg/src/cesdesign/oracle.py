"""Brute-force reference posteriors used to check the pipeline.

Two independent routes: trapezoid quadrature of the exact posterior on a
tensor-product grid (any smooth two-parameter problem), and the conjugate
closed form for linear maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .core import GaussianPrior

log = logging.getLogger(__name__)


class GridBoundaryError(RuntimeError):
    """Too much posterior mass on the edge of the quadrature grid."""


@dataclass(frozen=True)
class GridConfig:
    resolution: int = 401
    half_width: float = 5.0
    boundary_tol: float = 1e-3
    # Re-centre the grid on the posterior while any axis has fewer than
    # ``min_cells_per_std`` cells per posterior standard deviation.
    zoom: bool = True
    zoom_half_width: float = 8.0
    min_cells_per_std: float = 20.0
    max_zooms: int = 6
    chunk: int = 20_000

    def __post_init__(self):
        if self.resolution < 3:
            raise ValueError("grid resolution must be at least 3")
        if self.half_width <= 0 or self.zoom_half_width <= 0:
            raise ValueError("grid half widths must be positive")


@dataclass
class GridPosterior:
    axes: tuple[np.ndarray, np.ndarray]
    log_density: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    boundary_mass: float

    @property
    def log_det_cov(self) -> float:
        sign, logdet = np.linalg.slogdet(self.cov)
        return float(logdet) if sign > 0 else float("nan")


def _trapezoid_1d(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def gaussian_log_likelihood(mean_map: Callable, data, noise_cov) -> Callable:
    """Vectorised ``log N(data; mean_map(theta), noise_cov)`` up to a constant."""
    data = np.asarray(data, dtype=float)
    L = scipy.linalg.cholesky(np.atleast_2d(noise_cov), lower=True)

    def loglik(thetas):
        resid = mean_map(thetas) - data
        z = scipy.linalg.solve_triangular(L, resid.T, lower=True)
        return -0.5 * (z * z).sum(0)

    return loglik


def grid_on_box(log_lik: Callable, prior: GaussianPrior, lo, hi, cfg: GridConfig) -> GridPosterior:
    """Trapezoid quadrature of ``exp(log_lik + log prior)`` on one rectangle."""
    ax0 = np.linspace(lo[0], hi[0], cfg.resolution)
    ax1 = np.linspace(lo[1], hi[1], cfg.resolution)
    T0, T1 = np.meshgrid(ax0, ax1, indexing="ij")
    pts = np.stack([T0.ravel(), T1.ravel()], axis=1)
    logp = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], cfg.chunk):
        block = pts[start:start + cfg.chunk]
        logp[start:start + cfg.chunk] = log_lik(block) - prior.neg_log_density(block)
    logp = logp.reshape(T0.shape)
    if not np.any(np.isfinite(logp)):
        raise FloatingPointError("log-posterior is not finite anywhere on the grid")
    dens = np.exp(logp - np.nanmax(logp))
    dens[~np.isfinite(dens)] = 0.0
    w = dens * np.outer(_trapezoid_1d(len(ax0)), _trapezoid_1d(len(ax1)))
    total = w.sum()
    w = w / total
    edge = np.zeros_like(w, dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    boundary = float(w[edge].sum())
    flat = w.ravel()
    mean = flat @ pts
    centred = pts - mean
    cov = (centred * flat[:, None]).T @ centred
    return GridPosterior((ax0, ax1), logp, w, mean, 0.5 * (cov + cov.T), boundary)


def grid_posterior(mean_map: Callable, data, noise_cov, prior: GaussianPrior,
                   cfg: GridConfig | None = None) -> GridPosterior:
    """Exact posterior moments by quadrature.

    The first grid spans ``prior mean +/- half_width`` prior standard
    deviations. Narrow posteriors are then re-gridded on ``mean +/-
    zoom_half_width`` posterior standard deviations (clipped to the first
    box) until each axis is resolved; the last grid must carry less than
    ``boundary_tol`` of its mass on the edge.
    """
    cfg = cfg or GridConfig()
    log_lik = gaussian_log_likelihood(mean_map, data, noise_cov)
    return grid_posterior_from_loglik(log_lik, prior, cfg)


def grid_posterior_from_loglik(log_lik: Callable, prior: GaussianPrior,
                               cfg: GridConfig | None = None) -> GridPosterior:
    cfg = cfg or GridConfig()
    sd = np.sqrt(np.diag(prior.cov))
    box_lo = prior.mean - cfg.half_width * sd
    box_hi = prior.mean + cfg.half_width * sd
    lo, hi = box_lo, box_hi
    post = grid_on_box(log_lik, prior, lo, hi, cfg)
    for _ in range(cfg.max_zooms if cfg.zoom else 0):
        post_sd = np.sqrt(np.clip(np.diag(post.cov), 0.0, None))
        cell = (hi - lo) / (cfg.resolution - 1)
        if np.all(post_sd >= cfg.min_cells_per_std * cell):
            break
        width = cfg.zoom_half_width * np.maximum(post_sd, cell)
        lo = np.maximum(post.mean - width, box_lo)
        hi = np.minimum(post.mean + width, box_hi)
        post = grid_on_box(log_lik, prior, lo, hi, cfg)
    if post.boundary_mass > cfg.boundary_tol:
        raise GridBoundaryError(
            f"{post.boundary_mass:.2e} of the posterior mass lies on the grid boundary; widen the grid")
    return post


def kalman_posterior(A, prior: GaussianPrior, data, noise_cov, offset=None):
    """Conjugate posterior of ``data = A theta + offset + N(0, noise_cov)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    data = np.asarray(data, dtype=float)
    offset = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    noise_prec = np.linalg.inv(np.atleast_2d(noise_cov))
    precision = A.T @ noise_prec @ A + prior.precision
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (A.T @ noise_prec @ (data - offset) + prior.precision @ prior.mean)
    return mean, cov


def oracle_utility_table(model, ds, theta_star, prior: GaussianPrior, seed, cfg=None, designs=None,
                         grid_cfg: GridConfig | None = None, exact_noise: bool = False, data=None):
    """Grid-quadrature log-utilities for every design, in the pipeline's table format.

    The data sample and internal-variability covariance come from the same
    seeded control run the design stage uses, so the oracle and the pipeline
    see identical inputs; only the exact mean map replaces the emulators.
    ``exact_noise`` swaps the estimated covariance for the model's own.
    ``data`` may be an existing :class:`~cesdesign.design.DesignData`.
    """
    from .config import PipelineConfig
    from .core import enumerate_designs, restrict, restrict_cov
    from .design import _CONTROL, DesignResult, UtilityTable, control_data
    from .forward import derive_seed

    cfg = (cfg or PipelineConfig()).resolved()
    if data is None:
        _, sigma, y = control_data(model, np.asarray(theta_star, dtype=float), cfg, derive_seed(seed, _CONTROL))
    else:
        sigma, y = data.sigma, data.y
    if exact_noise:
        sigma = model.noise_cov
    designs = enumerate_designs(ds) if designs is None else list(designs)
    rows = []
    for w in designs:
        row = DesignResult(w.design_id, w.index, w.center_latitude, w.season)
        post = grid_posterior(lambda t, w=w: restrict(w, model.eval_mean(t)), restrict(w, y),
                              restrict_cov(w, sigma), prior, grid_cfg)
        row.log_det_cov = post.log_det_cov
        row.log_utility = -row.log_det_cov
        rows.append(row)
    return UtilityTable(rows)


def spearman(a, b) -> float:
    """Spearman rank correlation of two equal-length sequences."""
    from scipy.stats import spearmanr

    return float(spearmanr(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic)
