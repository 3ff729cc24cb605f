"""Calibration by ensemble Kalman inversion.

The ensemble is iterated against a single finite-time data sample; every
member evaluation over all iterations is kept, because the union of those
input/output pairs (dense near the optimum, spread over the prior early on)
is what the emulators are trained on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import GaussianPrior, Restriction, restrict
from .forward import ForwardModel, ForwardModelError, derive_seed

log = logging.getLogger(__name__)


class SingularUpdateError(np.linalg.LinAlgError):
    """``C_GG + noise_cov`` could not be factorised."""


@dataclass
class Ensemble:
    members: np.ndarray
    evals: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if self.members.shape[0] < 3:
            raise ValueError("an ensemble needs at least 3 members")
        if not np.all(np.isfinite(self.members)):
            raise ValueError("ensemble members must be finite")
        if self.evals is not None:
            self.evals = np.asarray(self.evals, dtype=float)
            if self.evals.shape[0] != self.members.shape[0]:
                raise ValueError("one evaluation per member is required")

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass
class TrainingSet:
    """All evaluated (theta, G_T(theta)) pairs, tagged by EKI iteration."""

    inputs: np.ndarray
    outputs: np.ndarray
    iteration: np.ndarray
    misfit: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def restricted(self, w: Restriction) -> "TrainingSet":
        return TrainingSet(self.inputs, restrict(w, self.outputs), self.iteration, list(self.misfit))


def init_ensemble(prior: GaussianPrior, J: int, seed) -> Ensemble:
    """``J`` independent draws from the prior."""
    if J < 3:
        raise ValueError("an ensemble needs at least 3 members")
    rng = np.random.default_rng(seed)
    evals, evecs = np.linalg.eigh(prior.cov)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    members = prior.mean + rng.standard_normal((J, prior.dim)) @ factor.T
    return Ensemble(members)


def _gaussian_draws(rng, cov, n):
    evals, evecs = np.linalg.eigh(cov)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return rng.standard_normal((n, cov.shape[0])) @ factor.T


def eki_update(ens: Ensemble, y, noise_cov, seed, perturb: bool = True) -> Ensemble:
    """One perturbed-observation ensemble Kalman step.

    ``theta_j += C_tG (C_GG + noise_cov)^-1 (y + eta_j - G(theta_j))`` with
    ``eta_j ~ N(0, noise_cov)``; ``perturb=False`` sets every ``eta_j`` to 0.
    """
    if ens.evals is None:
        raise ValueError("ensemble has not been evaluated")
    y = np.asarray(y, dtype=float)
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    G = ens.evals
    J = ens.size
    du = ens.members - ens.members.mean(axis=0)
    dg = G - G.mean(axis=0)
    c_ug = du.T @ dg / (J - 1)
    c_gg = dg.T @ dg / (J - 1)
    try:
        factor = scipy.linalg.cho_factor(c_gg + noise_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError("C_GG + noise_cov is not positive definite") from exc
    if perturb:
        eta = _gaussian_draws(np.random.default_rng(seed), noise_cov, J)
    else:
        eta = np.zeros_like(G)
    innovation = y + eta - G
    gain_applied = scipy.linalg.cho_solve(factor, innovation.T)
    members = ens.members + (c_ug @ gain_applied).T
    return Ensemble(members, None, ens.iteration + 1)


def misfit(y, G, noise_cov) -> np.ndarray:
    """``||y - G||^2`` weighted by ``noise_cov`` for each row of ``G``."""
    resid = np.atleast_2d(np.asarray(G, dtype=float)) - y
    factor = scipy.linalg.cho_factor(noise_cov, lower=True)
    return np.einsum("ij,ji->i", resid, scipy.linalg.cho_solve(factor, resid.T))


def run_calibration(
    model: ForwardModel,
    prior: GaussianPrior,
    y,
    noise_cov,
    J: int = 100,
    n_iter: int = 5,
    seed=0,
    restriction: Restriction | None = None,
    max_workers: int = 1,
) -> TrainingSet:
    """Run ``n_iter`` evaluated EKI iterations and collect every pair.

    The forward model is called exactly ``J * n_iter`` times when no member
    fails. A failed member is redrawn from the prior once; a second failure
    aborts. With a ``restriction`` the data, weights and stored outputs are
    all in the restricted space.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    y = np.asarray(y, dtype=float)
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    ens = init_ensemble(prior, J, derive_seed(seed, 0))
    inputs, outputs, tags, misfits = [], [], [], []

    def evaluate(members, it):
        seeds = [derive_seed(seed, 1, it, j) for j in range(len(members))]
        G = model.evaluate_batch(members, seeds, max_workers=max_workers)
        bad = ~np.all(np.isfinite(G), axis=1)
        if np.any(bad):
            log.warning("iteration %d: %d failed members redrawn from the prior", it, bad.sum())
            rng = np.random.default_rng(derive_seed(seed, 2, it))
            members = members.copy()
            members[bad] = prior.sample(rng, int(bad.sum()))
            retry = [derive_seed(seed, 3, it, j) for j in np.flatnonzero(bad)]
            G[bad] = model.evaluate_batch(members[bad], retry, max_workers=max_workers)
            if not np.all(np.isfinite(G)):
                raise ForwardModelError(f"forward model failed twice in iteration {it}")
        if restriction is not None:
            G = restrict(restriction, G)
        return members, G

    for it in range(n_iter):
        members, G = evaluate(ens.members, it)
        ens = Ensemble(members, G, it)
        inputs.append(members)
        outputs.append(G)
        tags.append(np.full(J, it))
        misfits.append(float(misfit(y, G, noise_cov).mean()))
        log.debug("EKI iteration %d: mean misfit %.4g", it, misfits[-1])
        if it < n_iter - 1:
            ens = eki_update(ens, y, noise_cov, derive_seed(seed, 4, it))
    return TrainingSet(np.concatenate(inputs), np.concatenate(outputs),
                       np.concatenate(tags), misfits)
