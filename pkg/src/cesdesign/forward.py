"""Forward models producing time-aggregated statistics vectors.

Two stand-ins for an expensive climate model share one interface:

* :class:`AnalyticAquaplanet` has a closed-form infinite-time map with a
  tropical sensitivity peak that migrates with season, plus Gaussian internal
  variability with a known covariance.
* :class:`TwoScaleLorenz96` integrates the two-scale Lorenz-96 system and
  reports window averages, so its internal variability is genuinely chaotic.

Every model counts its forward evaluations; the design stage relies on the
count to verify its evaluation budget.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import DesignSpace, latitude_grid, physical_arrays


class ForwardModelError(RuntimeError):
    """A forward evaluation produced a non-finite state."""


def derive_seed(seed, *keys: int) -> np.random.SeedSequence:
    """Child seed for a named sub-stream of ``seed``.

    Streams are addressed by integer keys, so the random numbers used for a
    task depend only on the master seed and the task's address, never on the
    order in which tasks run.
    """
    keys = tuple(int(k) for k in keys)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + keys)
    return np.random.SeedSequence(int(seed), spawn_key=keys)


class ForwardModel:
    """Common interface: ``eval_finite``, ``evaluate_batch`` and ``run_control``."""

    kind = "abstract"
    # Admissible interval of each statistic, used by the observation-noise model.
    stat_bounds: tuple = ()

    def __init__(self, mode: str = "stationary", n_lat: int = 32, n_stats: int = 3,
                 window_days: float = 30.0):
        self.space = DesignSpace(mode=mode, n_lat=n_lat, stencil=1, n_stats=n_stats)
        self.mode = mode
        self.n_lat = n_lat
        self.window_days = float(window_days)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def full_dim(self) -> int:
        return self.space.full_dim

    @property
    def n_evaluations(self) -> int:
        return self._count

    def reset_counter(self) -> None:
        with self._lock:
            self._count = 0

    def _tick(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def eval_mean(self, theta) -> np.ndarray:
        raise TypeError(f"{self.kind} model has no closed-form infinite-time map")

    def eval_finite(self, theta, seed) -> np.ndarray:
        raise NotImplementedError

    def evaluate_batch(self, thetas, seeds, max_workers: int = 1) -> np.ndarray:
        """Evaluate several members; failed members come back as NaN rows."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))

        def one(args):
            theta, seed = args
            try:
                return self.eval_finite(theta, seed)
            except ForwardModelError:
                return np.full(self.full_dim, np.nan)

        jobs = list(zip(thetas, seeds))
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                out = list(pool.map(one, jobs))
        else:
            out = [one(job) for job in jobs]
        return np.array(out).reshape(len(jobs), self.full_dim)

    def run_control(self, theta, n_windows: int, n_spinup: int, seed) -> np.ndarray:
        raise NotImplementedError


def _check_control(n_windows: int, n_spinup: int) -> None:
    if n_spinup < 0 or n_windows <= n_spinup:
        raise ValueError(f"need n_windows > n_spinup >= 0, got {n_windows}, {n_spinup}")


# ---------------------------------------------------------------------------
# Analytic aquaplanet surrogate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticConfig:
    width_deg: float = 15.0
    itcz_stationary_deg: float = 0.0
    itcz_seasonal_deg: tuple = (0.0, 8.0, 0.0, -8.0)
    rh_background: float = 0.4
    precip_base: float = 2.0
    precip_rh_gain: float = 6.0
    precip_background: float = 1.5
    precip_tau_scale_s: float = 86400.0
    extreme_tau_scale_s: float = 7200.0
    extreme_gain: float = 0.5
    extreme_background: float = 0.1
    noise_fraction: float = 0.05
    corr_length_deg: float = 10.0


class AnalyticAquaplanet(ForwardModel):
    """Closed-form surrogate of zonal- and time-mean aquaplanet statistics.

    With ``w(phi) = exp(-((phi - phi_c) / width)**2)``:

    * relative humidity ``rh * w + 0.4 * (1 - w)``
    * precipitation ``(2 + 6 rh) w / (1 + tau / 1 day) + 1.5 (1 - w)``
    * extreme frequency ``0.5 * logistic(2 ln(tau / 2 h)) * w + 0.1``

    Internal variability of a window average is Gaussian with a
    squared-exponential correlation in latitude, independent between
    statistics and seasons, and does not depend on theta.
    """

    kind = "analytic"
    stat_bounds = ((0.0, 1.0), (0.0, math.inf), (0.0, 1.0))

    def __init__(self, mode: str = "stationary", n_lat: int = 32, window_days: float = 30.0,
                 config: AnalyticConfig | None = None, reference_theta=None):
        super().__init__(mode=mode, n_lat=n_lat, window_days=window_days)
        self.config = config or AnalyticConfig()
        self.latitudes = latitude_grid(n_lat)
        if reference_theta is None:
            reference_theta = np.array([0.0, math.log(43200.0)])
        self.reference_theta = np.asarray(reference_theta, dtype=float)
        self.noise_cov = self._internal_covariance()
        evals, evecs = np.linalg.eigh(self.noise_cov)
        self._noise_factor = evecs * np.sqrt(np.clip(evals, 0.0, None))

    @property
    def centers(self) -> np.ndarray:
        if self.mode == "stationary":
            return np.array([self.config.itcz_stationary_deg])
        return np.asarray(self.config.itcz_seasonal_deg, dtype=float)

    def tropical_weight(self, center: float) -> np.ndarray:
        return np.exp(-(((self.latitudes - center) / self.config.width_deg) ** 2))

    def eval_mean(self, theta) -> np.ndarray:
        """Infinite-time statistics; accepts a single theta or an ``(..., 2)`` array."""
        theta = np.asarray(theta, dtype=float)
        cfg = self.config
        rh, tau = physical_arrays(theta)
        rh = rh[..., None]
        tau = tau[..., None]
        blocks = []
        for center in self.centers:
            w = self.tropical_weight(center)
            r = rh * w + cfg.rh_background * (1.0 - w)
            p = ((cfg.precip_base + cfg.precip_rh_gain * rh) * w / (1.0 + tau / cfg.precip_tau_scale_s)
                 + cfg.precip_background * (1.0 - w))
            f = cfg.extreme_gain * expit(2.0 * np.log(tau / cfg.extreme_tau_scale_s)) * w + cfg.extreme_background
            blocks.extend(np.broadcast_arrays(r, p, f))
        return np.concatenate(blocks, axis=-1)

    def _internal_covariance(self) -> np.ndarray:
        cfg = self.config
        ref = self.eval_mean(self.reference_theta).reshape(len(self.centers), 3, self.n_lat)
        spread = ref.max(axis=(0, 2)) - ref.min(axis=(0, 2))
        dist = self.latitudes[:, None] - self.latitudes[None, :]
        corr = np.exp(-0.5 * (dist / cfg.corr_length_deg) ** 2)
        blocks = [(cfg.noise_fraction * spread[s]) ** 2 * corr
                  for _ in self.centers for s in range(3)]
        n = self.full_dim
        cov = np.zeros((n, n))
        for i, block in enumerate(blocks):
            sl = slice(i * self.n_lat, (i + 1) * self.n_lat)
            cov[sl, sl] = block
        return cov

    def eval_finite(self, theta, seed) -> np.ndarray:
        self._tick()
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal(self.full_dim)
        return self.eval_mean(theta) + self._noise_factor @ xi

    def run_control(self, theta, n_windows: int, n_spinup: int, seed) -> np.ndarray:
        """Independent window draws; the first ``n_spinup`` are discarded."""
        _check_control(n_windows, n_spinup)
        rows = [self.eval_finite(theta, derive_seed(seed, i)) for i in range(n_windows)]
        return np.array(rows[n_spinup:])


# ---------------------------------------------------------------------------
# Two-scale Lorenz-96
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lorenz96Config:
    n_fast: int = 8
    c: float = 10.0
    b: float = 10.0
    dt: float = 0.005
    days_per_time_unit: float = 5.0
    spinup_days: float = 20.0
    sample_every: int = 10
    forcing_center: float = 10.0
    forcing_scale: float = 2.0
    coupling_center: float = 1.0
    coupling_scale: float = 0.5
    seasonal_forcing_offsets: tuple = (0.0, 1.5, 0.0, -1.5)
    threshold_days: float = 2000.0
    threshold_quantile: float = 0.9


class TwoScaleLorenz96(ForwardModel):
    """Two-scale Lorenz-96 system with 32 slow sites standing in for latitudes.

    Statistics per site, averaged over a window: slow-variable mean, its
    variance, and the frequency with which it exceeds the site's long-run
    90th percentile. Forcing ``F`` and coupling ``h`` are affine in theta so
    that the reference theta maps to ``(F, h) = (10, 1)``.
    """

    kind = "lorenz96"
    stat_bounds = ((-math.inf, math.inf), (0.0, math.inf), (0.0, 1.0))

    def __init__(self, mode: str = "stationary", n_lat: int = 32, window_days: float = 30.0,
                 config: Lorenz96Config | None = None, reference_theta=None):
        super().__init__(mode=mode, n_lat=n_lat, window_days=window_days)
        self.config = config or Lorenz96Config()
        if reference_theta is None:
            reference_theta = np.array([0.0, math.log(43200.0)])
        self.reference_theta = np.asarray(reference_theta, dtype=float)
        self._threshold = None

    # -- parameter map ----------------------------------------------------

    def forcing_coupling(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        cfg = self.config
        F = cfg.forcing_center + cfg.forcing_scale * (theta[:, 0] - self.reference_theta[0])
        h = cfg.coupling_center + cfg.coupling_scale * (theta[:, 1] - self.reference_theta[1])
        return F, h

    def _steps(self, days: float) -> int:
        return int(round(days / self.config.days_per_time_unit / self.config.dt))

    # -- dynamics ---------------------------------------------------------

    def _tendency(self, X, Y, F, h):
        cfg = self.config
        K, J = self.n_lat, cfg.n_fast
        coupling = (h * cfg.c / cfg.b)[:, None]
        dX = (np.roll(X, 1, axis=1) * (np.roll(X, -1, axis=1) - np.roll(X, 2, axis=1))
              - X + F[:, None] - coupling * Y.reshape(-1, K, J).sum(axis=2))
        dY = (-cfg.c * cfg.b * np.roll(Y, -1, axis=1) * (np.roll(Y, -2, axis=1) - np.roll(Y, 1, axis=1))
              - cfg.c * Y + coupling * np.repeat(X, J, axis=1))
        return dX, dY

    def _rk4(self, X, Y, F, h):
        dt = self.config.dt
        k1x, k1y = self._tendency(X, Y, F, h)
        k2x, k2y = self._tendency(X + 0.5 * dt * k1x, Y + 0.5 * dt * k1y, F, h)
        k3x, k3y = self._tendency(X + 0.5 * dt * k2x, Y + 0.5 * dt * k2y, F, h)
        k4x, k4y = self._tendency(X + dt * k3x, Y + dt * k3y, F, h)
        X = X + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        Y = Y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        return X, Y

    def _initial_state(self, seeds, F):
        cfg = self.config
        X = np.empty((len(seeds), self.n_lat))
        Y = np.empty((len(seeds), self.n_lat * cfg.n_fast))
        for i, seed in enumerate(seeds):
            rng = np.random.default_rng(seed)
            X[i] = F[i] + rng.standard_normal(self.n_lat)
            Y[i] = 0.1 * rng.standard_normal(self.n_lat * cfg.n_fast)
        return X, Y

    def _advance(self, X, Y, F, h, n_steps):
        for _ in range(n_steps):
            X, Y = self._rk4(X, Y, F, h)
        return X, Y

    def _window(self, X, Y, F, h, n_steps, threshold):
        """Integrate one window and return (X, Y, stats) with stats ``(m, 3 * K)``."""
        every = self.config.sample_every
        s1 = np.zeros_like(X)
        s2 = np.zeros_like(X)
        exceed = np.zeros_like(X)
        n = 0
        for step in range(1, n_steps + 1):
            X, Y = self._rk4(X, Y, F, h)
            if step % every == 0:
                s1 += X
                s2 += X * X
                exceed += X > threshold
                n += 1
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0)
        return X, Y, np.concatenate([mean, var, exceed / n], axis=1)

    # -- thresholds -------------------------------------------------------

    @property
    def threshold(self) -> np.ndarray:
        """Per-site long-run quantile of the slow variable at the reference theta."""
        if self._threshold is None:
            cfg = self.config
            members = 8
            F, h = self.forcing_coupling(np.repeat(self.reference_theta[None], members, axis=0))
            seeds = [derive_seed(0, 7919, i) for i in range(members)]
            X, Y = self._initial_state(seeds, F)
            X, Y = self._advance(X, Y, F, h, self._steps(cfg.spinup_days))
            n_steps = self._steps(cfg.threshold_days / members)
            samples = []
            for step in range(1, n_steps + 1):
                X, Y = self._rk4(X, Y, F, h)
                if step % cfg.sample_every == 0:
                    samples.append(X.copy())
            pooled = np.concatenate(samples, axis=0)
            self._threshold = np.quantile(pooled, cfg.threshold_quantile, axis=0)
        return self._threshold

    # -- public interface -------------------------------------------------

    def _seasonal_forcing(self, F, season):
        if self.mode == "stationary":
            return F
        return F + self.config.seasonal_forcing_offsets[season]

    def _integrate_members(self, thetas, seeds, n_records):
        """Spin up members, then collect ``n_records`` consecutive records each."""
        F, h = self.forcing_coupling(thetas)
        threshold = self.threshold
        X, Y = self._initial_state(seeds, F)
        X, Y = self._advance(X, Y, F, h, self._steps(self.config.spinup_days))
        window = self._steps(self.window_days)
        seasons = 1 if self.mode == "stationary" else 4
        records = []
        for _ in range(n_records):
            blocks = []
            for s in range(seasons):
                X, Y, stats = self._window(X, Y, self._seasonal_forcing(F, s), h, window, threshold)
                blocks.append(stats)
            records.append(np.concatenate(blocks, axis=1))
        return np.stack(records, axis=1)

    def evaluate_batch(self, thetas, seeds, max_workers: int = 1) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        self._tick(len(thetas))
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._integrate_members(thetas, list(seeds), 1)[:, 0, :]
        out[~np.all(np.isfinite(out), axis=1)] = np.nan
        return out

    def eval_finite(self, theta, seed) -> np.ndarray:
        out = self.evaluate_batch(np.asarray(theta, dtype=float)[None], [seed])[0]
        if not np.all(np.isfinite(out)):
            raise ForwardModelError("Lorenz-96 integration produced a non-finite state")
        return out

    def run_control(self, theta, n_windows: int, n_spinup: int, seed) -> np.ndarray:
        """One trajectory; consecutive windows (years in seasonal mode)."""
        _check_control(n_windows, n_spinup)
        self._tick(n_windows)
        theta = np.asarray(theta, dtype=float)[None]
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._integrate_members(theta, [derive_seed(seed, 0)], n_windows)[0]
        if not np.all(np.isfinite(out)):
            raise ForwardModelError("Lorenz-96 control run produced a non-finite state")
        return out[n_spinup:]


class LinearGaussianModel(ForwardModel):
    """``G(theta) = A theta`` plus Gaussian internal variability ``N(0, noise_cov)``.

    Used for end-to-end checks against conjugate formulas. The output is laid
    out as one "latitude" carrying ``A.shape[0]`` statistics, so the full-vector
    design is the only design.
    """

    kind = "linear"

    def __init__(self, A, noise_cov, offset=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        super().__init__(mode="stationary", n_lat=1, n_stats=A.shape[0])
        self.A = A
        self.offset = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
        self.noise_cov = np.asarray(noise_cov, dtype=float)
        self._noise_chol = np.linalg.cholesky(self.noise_cov)
        self.stat_bounds = ((-math.inf, math.inf),) * A.shape[0]

    def eval_mean(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float) @ self.A.T + self.offset

    def eval_finite(self, theta, seed) -> np.ndarray:
        self._tick()
        xi = np.random.default_rng(seed).standard_normal(self.full_dim)
        return self.eval_mean(theta) + self._noise_chol @ xi

    def run_control(self, theta, n_windows: int, n_spinup: int, seed) -> np.ndarray:
        _check_control(n_windows, n_spinup)
        rows = [self.eval_finite(theta, derive_seed(seed, i)) for i in range(n_windows)]
        return np.array(rows[n_spinup:])
