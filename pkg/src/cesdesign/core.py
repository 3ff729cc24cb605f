"""Domain types, parameter transforms, priors, design spaces and noise models.

Parameters live in two spaces. The physical pair (relative humidity, relaxation
timescale in seconds) is what the forward model consumes; the computational
vector ``theta = (logit(rh), ln(tau / 1 s))`` is unbounded and is where the
prior, the ensemble Kalman inversion and the sampler operate.

Statistics vectors are laid out statistic-major: for each season a block of
``n_stats * n_lat`` rows, inside which statistic ``s`` occupies rows
``s * n_lat ... (s + 1) * n_lat - 1`` ordered south to north.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

SEASON_NAMES = ("spring", "summer", "autumn", "winter")
STATISTIC_NAMES = ("relative_humidity", "precipitation", "extreme_frequency")


class DomainError(ValueError):
    """Raised when a value lies outside the domain an operation is defined on."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalParams:
    """Relative humidity (dimensionless) and relaxation timescale (seconds)."""

    rh: float
    tau: float

    def __post_init__(self):
        if not (0.0 < self.rh < 1.0):
            raise DomainError(f"relative humidity must lie in (0, 1), got {self.rh}")
        if not (self.tau > 0.0) or not math.isfinite(self.tau):
            raise DomainError(f"timescale must be positive and finite, got {self.tau}")


def transform_forward(p: PhysicalParams) -> np.ndarray:
    """Map physical parameters to the computational vector theta."""
    if not (0.0 < p.rh < 1.0) or not (p.tau > 0.0):
        raise DomainError(f"invalid physical parameters {p}")
    return np.array([logit(p.rh), math.log(p.tau)])


def transform_inverse(theta) -> PhysicalParams:
    """Map a computational vector back to physical parameters.

    The logistic map is evaluated in its overflow-safe form, so very large
    ``theta[0]`` yields ``rh`` that rounds toward 1 without warnings.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,) or not np.all(np.isfinite(theta)):
        raise DomainError(f"theta must be a finite 2-vector, got {theta!r}")
    rh = float(expit(theta[0]))
    tau = float(np.exp(theta[1]))
    # expit saturates to exactly 1.0 for theta[0] > ~37; keep the open interval.
    rh = min(rh, np.nextafter(1.0, 0.0))
    rh = max(rh, np.nextafter(0.0, 1.0))
    return PhysicalParams(rh=rh, tau=tau)


def physical_arrays(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised inverse transform for an ``(..., 2)`` array of thetas."""
    theta = np.asarray(theta, dtype=float)
    return expit(theta[..., 0]), np.exp(theta[..., 1])


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("prior covariance shape does not match the mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("prior covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("prior covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov)

    @cached_property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        xi = rng.standard_normal((n, self.dim))
        return self.mean + xi @ self.chol.T

    def neg_log_density(self, theta) -> np.ndarray:
        """Half squared Mahalanobis distance to the mean (unnormalised)."""
        diff = np.asarray(theta, dtype=float) - self.mean
        return 0.5 * np.einsum("...i,ij,...j->...", diff, self.precision, diff)


@dataclass(frozen=True)
class PriorConfig:
    """Prior constants.

    ``tau_median_s`` is the physical median of the lognormal timescale prior and
    ``tau_log_var`` the log-space variance; ``ln 2`` comes from matching a
    variance of ``(12 h)**2`` about a ``12 h`` scale.
    """

    rh_logit_mean: float = 0.0
    rh_logit_var: float = 1.0
    tau_median_s: float = 43200.0
    tau_log_var: float = math.log(2.0)


def build_prior(cfg: PriorConfig | None = None) -> GaussianPrior:
    cfg = cfg or PriorConfig()
    mean = np.array([cfg.rh_logit_mean, math.log(cfg.tau_median_s)])
    cov = np.diag([cfg.rh_logit_var, cfg.tau_log_var])
    return GaussianPrior(mean, cov)


# ---------------------------------------------------------------------------
# Design spaces and restrictions
# ---------------------------------------------------------------------------


def latitude_grid(n_lat: int = 32) -> np.ndarray:
    """Centres of ``n_lat`` equal-width latitude bands, south to north (degrees)."""
    width = 180.0 / n_lat
    return -90.0 + width * (np.arange(n_lat) + 0.5)


@dataclass(frozen=True)
class Restriction:
    """Selection of rows of the full statistics vector.

    ``index`` is the position of the restriction in its design space
    enumeration; ``latitude`` is the 1-based index of the southernmost
    latitude of the stencil, and ``season`` is ``None`` for stationary designs.
    """

    index: int
    latitude: int
    season: int | None
    rows: tuple[int, ...]
    full_dim: int
    center_latitude: float = float("nan")

    def __post_init__(self):
        rows = tuple(int(r) for r in self.rows)
        if len(set(rows)) != len(rows):
            raise ValueError("restriction rows must be unique")
        if list(rows) != sorted(rows):
            raise ValueError("restriction rows must be sorted")
        if rows and (rows[0] < 0 or rows[-1] >= self.full_dim):
            raise ValueError("restriction rows out of range")
        object.__setattr__(self, "rows", rows)

    @property
    def design_id(self) -> str:
        if self.season is None:
            return str(self.latitude)
        return f"{self.season}:{self.latitude}"

    @property
    def size(self) -> int:
        return len(self.rows)

    def matrix(self) -> np.ndarray:
        """The explicit selection matrix ``W`` (rows x full_dim)."""
        w = np.zeros((self.size, self.full_dim))
        w[np.arange(self.size), self.rows] = 1.0
        return w


@dataclass(frozen=True)
class DesignSpace:
    mode: str = "stationary"
    n_lat: int = 32
    stencil: int = 3
    n_stats: int = 3
    n_seasons: int = field(default=0)

    def __post_init__(self):
        if self.mode not in ("stationary", "seasonal"):
            raise ValueError(f"unknown design mode {self.mode!r}")
        if self.n_seasons == 0:
            object.__setattr__(self, "n_seasons", 1 if self.mode == "stationary" else 4)
        if self.mode == "stationary" and self.n_seasons != 1:
            raise ValueError("stationary design spaces have a single season")
        if not (1 <= self.stencil <= self.n_lat):
            raise ValueError(f"stencil must lie in [1, {self.n_lat}], got {self.stencil}")

    @property
    def block_dim(self) -> int:
        return self.n_stats * self.n_lat

    @property
    def full_dim(self) -> int:
        return self.n_seasons * self.block_dim

    @property
    def n_positions(self) -> int:
        return self.n_lat - (self.stencil - 1)

    def __len__(self) -> int:
        return self.n_positions * (1 if self.mode == "stationary" else self.n_seasons)


def enumerate_designs(ds: DesignSpace) -> list[Restriction]:
    """All restrictions of a design space, in a deterministic order.

    Stationary designs are numbered ``k = 1 .. n_lat - stencil + 1`` from the
    south; seasonal designs are ordered season first, ``(0, 1) ... (3, n)``.
    """
    lats = latitude_grid(ds.n_lat)
    seasons = [None] if ds.mode == "stationary" else list(range(ds.n_seasons))
    designs = []
    for season in seasons:
        offset = 0 if season is None else season * ds.block_dim
        for start in range(ds.n_positions):
            cols = range(start, start + ds.stencil)
            rows = sorted(offset + s * ds.n_lat + c for s in range(ds.n_stats) for c in cols)
            designs.append(
                Restriction(
                    index=len(designs),
                    latitude=start + 1,
                    season=season,
                    rows=tuple(rows),
                    full_dim=ds.full_dim,
                    center_latitude=float(lats[list(cols)].mean()),
                )
            )
    return designs


def full_restriction(full_dim: int) -> Restriction:
    return Restriction(index=0, latitude=1, season=None, rows=tuple(range(full_dim)),
                       full_dim=full_dim, center_latitude=0.0)


def restrict(w: Restriction, v: np.ndarray) -> np.ndarray:
    """Select the restricted rows of a vector, or of each row of a sample matrix."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != w.full_dim:
        raise ValueError(f"expected trailing dimension {w.full_dim}, got {v.shape[-1]}")
    return v[..., list(w.rows)]


def restrict_cov(w: Restriction, S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.shape != (w.full_dim, w.full_dim):
        raise ValueError(f"expected a {w.full_dim}x{w.full_dim} covariance, got {S.shape}")
    idx = list(w.rows)
    return S[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------


def estimate_covariance(samples: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of the rows of ``samples``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need at least two samples (rows) to estimate a covariance")
    # Shifting by the first row first keeps constant columns exactly zero.
    shifted = samples - samples[0]
    centred = shifted - shifted.mean(axis=0)
    cov = centred.T @ centred / (samples.shape[0] - 1)
    return 0.5 * (cov + cov.T)


def is_covariance(S: np.ndarray, sym_tol: float = 1e-10, psd_tol: float = 1e-8) -> bool:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        return False
    if not np.allclose(S, S.T, atol=sym_tol, rtol=0.0):
        return False
    eig = np.linalg.eigvalsh(S)
    return bool(eig.min() >= -psd_tol * max(eig.max(), 0.0))


def loaded_covariance(S: np.ndarray, n_samples: int, loading: float = 0.05) -> np.ndarray:
    """Diagonally load a sample covariance that cannot be full rank.

    With ``n_samples <= dim`` the estimate is singular; a fraction of its own
    diagonal is added so that Kalman gains can be formed.
    """
    S = np.asarray(S, dtype=float)
    if n_samples > S.shape[0]:
        return S
    return S + loading * np.diag(np.diag(S))


# ---------------------------------------------------------------------------
# Observation noise for synthetic local data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    d: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return np.diag(self.d**2)


def _boundary_distance(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        d_lo = np.where(np.isfinite(lo), np.abs(x - lo), np.inf)
        d_hi = np.where(np.isfinite(hi), np.abs(x - hi), np.inf)
    return np.minimum(d_lo, d_hi)


def build_obs_noise(
    mu: np.ndarray,
    S: np.ndarray,
    bounds: Sequence[tuple[float, float]],
    C: float = 0.2,
    C_max: float = 0.1,
) -> NoiseModel:
    """Per-row noise standard deviations for synthetic local observations.

    ``d_i = min(C * min(dist(mu_i + 2 s_i), dist(mu_i - 2 s_i)), C_max * mu_i)``
    where ``s_i = sqrt(S_ii)`` and ``dist`` is the distance to the nearer
    finite endpoint of the admissible interval of row ``i``.
    """
    mu = np.asarray(mu, dtype=float)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if bounds.shape[0] != mu.size or S.shape != (mu.size, mu.size):
        raise ValueError("mu, S and bounds must describe the same rows")
    if C <= 0.0 or C_max <= 0.0:
        raise ValueError("C and C_max must be positive")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(mu <= lo) or np.any(mu >= hi):
        raise DomainError("every mean must lie strictly inside its admissible interval")
    sd = np.sqrt(np.clip(np.diag(S), 0.0, None))
    near = np.minimum(_boundary_distance(mu + 2.0 * sd, lo, hi),
                      _boundary_distance(mu - 2.0 * sd, lo, hi))
    d = np.minimum(C * near, C_max * mu)
    if np.any(~(d > 0.0)):
        raise DomainError("noise standard deviations must be positive; check bounds and means")
    return NoiseModel(d=d)


def expand_bounds(stat_bounds: Sequence[tuple[float, float]], n_lat: int, n_seasons: int) -> list:
    """Per-row intervals for a full statistics vector from per-statistic intervals."""
    block = [tuple(b) for b in stat_bounds for _ in range(n_lat)]
    return block * n_seasons
