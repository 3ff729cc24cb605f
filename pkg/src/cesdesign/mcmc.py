"""Random-walk Metropolis sampling of emulator-based posteriors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import GaussianPrior, estimate_covariance
from .gp import GPEmulator

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """The chain made no progress during burn-in."""


@dataclass(frozen=True)
class ChainConfig:
    n_samples: int = 50_000
    burn_fraction: float = 0.25
    thin: int = 5
    target_acceptance: float = 0.3
    adapt_exponent: float = 0.6
    initial_scale: float | None = None

    def __post_init__(self):
        if self.n_samples < 1000:
            raise ValueError("chain length must be at least 1000")
        if not 0.0 <= self.burn_fraction < 1.0:
            raise ValueError("burn_fraction must lie in [0, 1)")
        if self.thin < 1:
            raise ValueError("thin must be a positive integer")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if not 0.5 < self.adapt_exponent <= 1.0:
            raise ValueError("adapt_exponent must lie in (0.5, 1]")

    @property
    def n_burn(self) -> int:
        return int(round(self.burn_fraction * self.n_samples))


@dataclass
class PosteriorSampleSet:
    samples: np.ndarray
    acceptance_rate: float
    design_id: str | None = None
    step_size: float = float("nan")
    step_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    burn_acceptance: float = float("nan")
    seed: object = None

    def __len__(self) -> int:
        return self.samples.shape[0]

    def diagnostics(self) -> dict:
        return {
            "design_id": self.design_id,
            "acceptance_rate": self.acceptance_rate,
            "burn_in_acceptance": self.burn_acceptance,
            "step_size": self.step_size,
            "n_retained": len(self),
            "seed": None if self.seed is None else str(self.seed),
        }


class EmulatedPosterior:
    """``-Phi`` for data in the decorrelated basis of one emulator.

    ``extra_cov`` (decorrelated) is added to the diagonal emulator
    covariance; it carries observational noise that the training outputs
    never saw. Without it the covariance stays diagonal and the log
    determinant is a sum of logs.
    """

    def __init__(self, em: GPEmulator, data, prior: GaussianPrior, extra_cov=None):
        self.em = em
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != (em.n_out,):
            raise ValueError(f"data has shape {self.data.shape}, emulator has {em.n_out} outputs")
        self.prior = prior
        self.extra_cov = None if extra_cov is None else np.asarray(extra_cov, dtype=float)
        if self.extra_cov is not None and self.extra_cov.shape != (em.n_out, em.n_out):
            raise ValueError("extra_cov does not match the emulator output dimension")

    def __call__(self, theta) -> float:
        mean, var = self.em.predict(theta)
        resid = self.data - mean
        if self.extra_cov is None:
            misfit = np.sum(resid * resid / var) + np.sum(np.log(var))
        else:
            cov = self.extra_cov + np.diag(var)
            try:
                L = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                return -math.inf
            z = np.linalg.solve(L, resid)
            misfit = z @ z + 2.0 * np.sum(np.log(np.diag(L)))
        d = np.asarray(theta) - self.prior.mean
        value = -0.5 * (misfit + d @ self.prior.precision @ d)
        return float(value) if np.isfinite(value) else -math.inf


def log_posterior(theta, data, em: GPEmulator, prior: GaussianPrior, extra_cov=None) -> float:
    """``-Phi_MCMC(theta)``: Gaussian misfit under the emulator plus prior."""
    return EmulatedPosterior(em, data, prior, extra_cov)(theta)


def run_metropolis(log_target: Callable[[np.ndarray], float], theta0, proposal_chol, cfg: ChainConfig,
                   seed, design_id: str | None = None) -> PosteriorSampleSet:
    """Adaptive random-walk Metropolis.

    Proposals are ``theta + s * proposal_chol @ xi``. During burn-in ``log s``
    follows a Robbins-Monro recursion on the accept indicator toward the
    target rate, with gain ``(t + 1)^-adapt_exponent``; afterwards ``s`` is
    frozen. Accept/reject uses only differences of ``log_target``.
    """
    theta = np.array(theta0, dtype=float)
    dim = theta.size
    L = np.atleast_2d(np.asarray(proposal_chol, dtype=float))
    rng = np.random.default_rng(seed)
    n, n_burn = cfg.n_samples, cfg.n_burn
    steps = rng.standard_normal((n, dim)) @ L.T
    log_u = np.log(rng.random(n))
    s = 2.38 / math.sqrt(dim) if cfg.initial_scale is None else float(cfg.initial_scale)
    adapt = s > 0
    log_s = math.log(s) if adapt else -math.inf

    lp = log_target(theta)
    if not np.isfinite(lp):
        raise SamplerError("log-target is not finite at the initial point")
    chain = np.empty((n, dim))
    accepted = np.zeros(n, dtype=bool)
    trace = np.empty(n_burn)
    for t in range(n):
        prop = theta + s * steps[t]
        lp_prop = log_target(prop)
        if log_u[t] < lp_prop - lp:
            theta, lp = prop, lp_prop
            accepted[t] = True
        chain[t] = theta
        if t < n_burn:
            if adapt:
                log_s += (t + 1.0) ** -cfg.adapt_exponent * (accepted[t] - cfg.target_acceptance)
                s = math.exp(log_s)
            trace[t] = s
    if n_burn > 0 and not accepted[:n_burn].any():
        raise SamplerError(f"no proposal accepted in {n_burn} burn-in steps "
                           f"(final step scale {s:.3g}, start {np.asarray(theta0).tolist()})")
    kept = chain[n_burn::cfg.thin]
    post = accepted[n_burn:]
    return PosteriorSampleSet(
        samples=kept,
        acceptance_rate=float(post.mean()) if post.size else float("nan"),
        design_id=design_id,
        step_size=s,
        step_trace=trace,
        burn_acceptance=float(accepted[:n_burn].mean()) if n_burn else float("nan"),
        seed=seed,
    )


def best_start(log_target: Callable[[np.ndarray], float], candidates) -> np.ndarray:
    """Candidate with the highest log-target (first one on ties)."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    values = np.array([log_target(c) for c in candidates])
    if not np.any(np.isfinite(values)):
        raise SamplerError("log-target is not finite at any candidate start")
    return candidates[int(np.nanargmax(np.where(np.isfinite(values), values, -np.inf)))].copy()


def run_chain(em: GPEmulator, data, prior: GaussianPrior, cfg: ChainConfig | None = None, seed=0,
              extra_cov=None, start=None) -> PosteriorSampleSet:
    """Sample ``theta | data`` under the emulator.

    The chain starts at the training input with the highest posterior
    density unless ``start`` is given; proposals are preconditioned by the
    prior covariance.
    """
    cfg = cfg or ChainConfig()
    target = EmulatedPosterior(em, data, prior, extra_cov)
    theta0 = best_start(target, em.X) if start is None else np.asarray(start, dtype=float)
    return run_metropolis(target, theta0, prior.chol, cfg, seed, design_id=em.design_id)


def posterior_cov(ps: PosteriorSampleSet) -> np.ndarray:
    """Unbiased empirical covariance of the retained samples."""
    return estimate_covariance(ps.samples)
