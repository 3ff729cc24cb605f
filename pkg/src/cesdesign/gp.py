"""Decorrelation of restricted data spaces and Gaussian-process emulation.

Restricted outputs are whitened with the eigenbasis of the restricted
internal-variability covariance, then each whitened coordinate gets its own
scalar GP (anisotropic squared-exponential kernel plus a nugget). The nugget
soaks up finite-time sampling noise, so the predictive mean tracks the
infinite-time map while the predictive variance carries both the noise level
and the emulator's own uncertainty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
# Relative jitter added to every kernel matrix, as a fraction of the signal variance.
_JITTER = 1e-10
# Eigenpairs of the kernel matrix whose signal part is below this fraction of
# the nugget are folded into the nugget when computing predictive variances.
_RANK_TOL = 1e-4


# ---------------------------------------------------------------------------
# Decorrelation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decorrelator:
    """Whitening map ``x -> diag(1/scale) @ basis @ x``; rows of ``basis`` orthonormal."""

    basis: np.ndarray
    scale: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.basis / self.scale[:, None]

    @property
    def n_out(self) -> int:
        return self.basis.shape[0]

    def transform(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T

    def transform_cov(self, S) -> np.ndarray:
        M = self.matrix
        out = M @ np.asarray(S, dtype=float) @ M.T
        return 0.5 * (out + out.T)

    def to_dict(self) -> dict:
        return {"basis": self.basis.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Decorrelator":
        return cls(np.asarray(d["basis"], dtype=float), np.asarray(d["scale"], dtype=float))


def fit_decorrelator(S, rel_tol: float = 1e-12) -> Decorrelator:
    """Eigendecomposition of a symmetric PSD matrix, largest variance first.

    Directions with eigenvalue below ``rel_tol`` times the largest are dropped.
    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > rel_tol * max(evals[0], 0.0)
    evals, evecs = evals[keep], evecs[:, keep]
    pivots = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivots, np.arange(evecs.shape[1])])
    return Decorrelator(basis=evecs.T.copy(), scale=np.sqrt(evals))


# ---------------------------------------------------------------------------
# Scalar GP
# ---------------------------------------------------------------------------


def _as_inputs(X) -> np.ndarray:
    """Inputs as an ``(n, p)`` array; a 1-D array is ``n`` scalar inputs."""
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else np.atleast_2d(X)


def _sq_dists(X1, X2, lengthscales):
    a = X1 / lengthscales
    b = X2 / lengthscales
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _log_marginal(params, X, y, diffs):
    """Log marginal likelihood and its gradient in log-hyperparameters."""
    p = X.shape[1]
    ls = np.exp(params[:p])
    s2 = math.exp(params[p])
    nug = math.exp(params[p + 1])
    n = X.shape[0]
    scaled = [d / (l * l) for d, l in zip(diffs, ls)]
    R = np.exp(-0.5 * sum(scaled))
    K = s2 * R
    K[np.diag_indices(n)] += nug + _JITTER * s2
    try:
        L = scipy.linalg.cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -1e25, np.zeros_like(params)
    alpha = scipy.linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(n))
    inner = np.outer(alpha, alpha) - Kinv
    sR = s2 * R
    grad = np.empty_like(params)
    for i in range(p):
        grad[i] = 0.5 * np.sum(inner * sR * scaled[i])
    grad[p] = 0.5 * np.sum(inner * sR)
    grad[p + 1] = 0.5 * nug * np.trace(inner)
    return lml, grad


class ScalarGP:
    """Zero-mean GP (after subtracting a constant) with fixed hyperparameters."""

    def __init__(self, X, y, lengthscales, signal_var: float, nugget: float, mean: float | None = None):
        self.X = _as_inputs(X)
        self.y = np.asarray(y, dtype=float)
        self.lengthscales = np.asarray(lengthscales, dtype=float)
        self.signal_var = float(signal_var)
        self.nugget = float(nugget)
        if np.any(self.lengthscales <= 0) or self.signal_var <= 0 or self.nugget <= 0:
            raise ValueError("GP hyperparameters must be strictly positive")
        self.mean_value = float(self.y.mean()) if mean is None else float(mean)
        self.starts = None
        self._factorise()

    def _kernel_matrix(self):
        R = np.exp(-0.5 * _sq_dists(self.X, self.X, self.lengthscales))
        K = self.signal_var * R
        K[np.diag_indices_from(K)] += self.nugget + _JITTER * self.signal_var
        return R, K

    def _factorise(self):
        R, K = self._kernel_matrix()
        try:
            L = scipy.linalg.cholesky(K, lower=True)
        except np.linalg.LinAlgError:
            floor = 1e-8 * self.signal_var
            if self.nugget >= floor:
                raise
            log.warning("kernel matrix not SPD; raising nugget to %.3g and retrying", floor)
            self.nugget = floor
            R, K = self._kernel_matrix()
            L = scipy.linalg.cholesky(K, lower=True)
        self._chol = L
        self.alpha = scipy.linalg.cho_solve((L, True), self.y - self.mean_value)
        self.log_marginal = float(-0.5 * (self.y - self.mean_value) @ self.alpha
                                  - np.log(np.diag(L)).sum() - 0.5 * len(self.y) * _LOG_2PI)
        # K = U diag(s2*lam + nugget) U^T shares eigenvectors with R.
        lam, U = np.linalg.eigh(R)
        eig_signal = self.signal_var * (lam + _JITTER)
        keep = eig_signal > _RANK_TOL * self.nugget
        self.low_rank = U[:, keep].T.copy()
        self.low_rank_inv = 1.0 / (eig_signal[keep] + self.nugget)

    @property
    def rank(self) -> int:
        return self.low_rank.shape[0]

    def kernel_vector(self, Xs) -> np.ndarray:
        Xs = np.asarray(Xs, dtype=float)
        if Xs.ndim <= 1:
            Xs = Xs.reshape(-1, 1) if self.X.shape[1] == 1 else Xs.reshape(1, -1)
        return self.signal_var * np.exp(-0.5 * _sq_dists(Xs, self.X, self.lengthscales))

    def predict(self, Xs, exact: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance (variance includes the nugget).

        ``exact=True`` computes the variance with full triangular solves
        instead of the truncated eigenbasis; the two agree to within a
        relative ``~1e-8`` of the signal variance.
        """
        k = self.kernel_vector(Xs)
        mean = self.mean_value + k @ self.alpha
        if exact:
            v = scipy.linalg.solve_triangular(self._chol, k.T, lower=True)
            quad = (v * v).sum(0)
        else:
            proj = k @ self.low_rank.T
            pp = proj * proj
            quad = pp @ self.low_rank_inv + ((k * k).sum(1) - pp.sum(1)) / self.nugget
        latent = np.maximum(self.signal_var * (1.0 + _JITTER) - quad, 0.0)
        return mean, latent + self.nugget

    def mean_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        k = self.kernel_vector(x)[0]
        return -((x - self.X) / self.lengthscales**2 * (k * self.alpha)[:, None]).sum(0)

    def hyperparameters(self) -> dict:
        return {"lengthscales": self.lengthscales.tolist(), "signal_var": self.signal_var,
                "nugget": self.nugget, "mean": self.mean_value}


def log_marginal_likelihood(X, y, lengthscales, signal_var, nugget) -> float:
    """Log marginal likelihood of centred ``y`` for the given hyperparameters."""
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float)
    y = y - y.mean()
    diffs = [np.subtract.outer(X[:, i], X[:, i]) ** 2 for i in range(X.shape[1])]
    params = np.log(np.concatenate([lengthscales, [signal_var, nugget]]))
    return float(_log_marginal(params, X, y, diffs)[0])


def fit_scalar_gp(X, y, n_starts: int = 5, seed=0, subsample: int | None = None,
                  nugget_floor: float = 1e-10, ls_floor: float = 0.05) -> ScalarGP:
    """Maximise the log marginal likelihood from several random starts.

    Starts are log-uniform over ``[1e-2, 1e2]`` times the input spread (for
    lengthscales) and the output variance (for signal and nugget variance).
    With ``subsample`` set and more points than that, the search runs on a
    seeded random subset; the returned GP conditions on all points.
    Lengthscales are kept above ``ls_floor`` times the input spread: below
    that an SE kernel is indistinguishable from white noise on the data, and
    such fits interpolate sampling noise.
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 10:
        raise ValueError("need at least 10 training pairs")
    if not np.all(np.isfinite(y)):
        raise ValueError("training outputs must be finite")
    rng = np.random.default_rng(seed)
    p = X.shape[1]
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_var = float(y.var())
    y_scale = y_var if y_var > 0 else 1.0

    Xf, yf = X, y
    if subsample is not None and X.shape[0] > subsample:
        idx = np.sort(rng.choice(X.shape[0], subsample, replace=False))
        Xf, yf = X[idx], y[idx]
    yc = yf - yf.mean()
    diffs = [np.subtract.outer(Xf[:, i], Xf[:, i]) ** 2 for i in range(p)]

    lo = np.log(np.concatenate([ls_floor * x_scale, [1e-8 * y_scale, nugget_floor * y_scale]]))
    hi = np.log(np.concatenate([1e2 * x_scale, [1e4 * y_scale, 1e2 * y_scale]]))
    start_lo = np.log(np.concatenate([1e-2 * x_scale, [1e-2 * y_scale, 1e-2 * y_scale]]))
    start_hi = np.log(np.concatenate([1e2 * x_scale, [1e2 * y_scale, 1e2 * y_scale]]))

    def objective(params):
        lml, grad = _log_marginal(params, Xf, yc, diffs)
        return -lml, -grad

    best_params, best_val = None, -np.inf
    starts = []
    for _ in range(n_starts):
        x0 = np.clip(rng.uniform(start_lo, start_hi), lo, hi)
        starts.append(np.exp(x0))
        start_val = -objective(x0)[0]
        res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)), options={"maxiter": 200})
        for cand, val in ((x0, start_val), (res.x, -res.fun)):
            if val > best_val:
                best_params, best_val = np.asarray(cand), val
    ls = np.exp(best_params[:p])
    log_vars = best_params[p:]
    if Xf is not X:
        log_vars = _refine_variances(X, y - y.mean(), ls, log_vars, lo[p:], hi[p:])
    gp = ScalarGP(X, y, ls, math.exp(log_vars[0]), math.exp(log_vars[1]))
    # Initial (lengthscales..., signal_var, nugget) of each local search.
    gp.starts = np.array(starts)
    return gp


def _refine_variances(X, yc, lengthscales, log_vars, lo, hi):
    """Maximise the full-data likelihood over (signal, nugget) at fixed lengthscales.

    With ``R = U diag(lam) U^T`` the kernel matrix is ``U diag(s2 lam + nugget) U^T``,
    so after one eigendecomposition each likelihood evaluation is O(N).
    """
    R = np.exp(-0.5 * _sq_dists(X, X, lengthscales))
    lam, U = np.linalg.eigh(R)
    lam = np.clip(lam, 0.0, None) + _JITTER
    proj2 = (U.T @ yc) ** 2

    def objective(params):
        s2, nug = math.exp(params[0]), math.exp(params[1])
        ev = s2 * lam + nug
        a = proj2 / ev**2 - 1.0 / ev
        value = -0.5 * (np.sum(proj2 / ev) + np.sum(np.log(ev)))
        grad = np.array([0.5 * s2 * np.sum(a * lam), 0.5 * nug * np.sum(a)])
        return -value, -grad

    res = minimize(objective, np.clip(log_vars, lo, hi), jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)))
    return res.x if res.fun <= objective(log_vars)[0] else np.asarray(log_vars)


# ---------------------------------------------------------------------------
# Multi-output emulator
# ---------------------------------------------------------------------------


class GPEmulator:
    """Independent scalar GPs over decorrelated outputs sharing training inputs.

    ``predict`` returns the mean and the diagonal of the predictive
    covariance, both in the decorrelated basis.
    """

    def __init__(self, gps: list[ScalarGP], decorrelator: Decorrelator | None = None,
                 design_id: str | None = None):
        if not gps:
            raise ValueError("an emulator needs at least one output GP")
        self.gps = gps
        self.decorrelator = decorrelator
        self.design_id = design_id
        self.X = gps[0].X
        self._stack()

    def _stack(self):
        gps = self.gps
        self._inv_ls2 = np.array([1.0 / gp.lengthscales**2 for gp in gps])
        self._s2 = np.array([gp.signal_var for gp in gps])
        self._nug = np.array([gp.nugget for gp in gps])
        self._mean = np.array([gp.mean_value for gp in gps])
        self._alpha = np.array([gp.alpha for gp in gps])
        # Low-rank variance bases, skipping outputs whose kernel matrix is
        # numerically all nugget.
        self._blocks = [(i, gp.low_rank, gp.low_rank_inv) for i, gp in enumerate(gps) if gp.rank]

    @property
    def n_out(self) -> int:
        return len(self.gps)

    def predict(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Mean and predictive variance at one theta (``(n_out,)`` each)."""
        d = np.asarray(theta, dtype=float) - self.X
        q = self._inv_ls2 @ (d * d).T
        k = self._s2[:, None] * np.exp(-0.5 * q)
        mean = self._mean + np.einsum("on,on->o", k, self._alpha)
        quad = np.einsum("on,on->o", k, k) / self._nug
        for i, U, inv in self._blocks:
            pp = U @ k[i]
            pp *= pp
            quad[i] += pp @ inv - pp.sum() / self._nug[i]
        latent = np.maximum(self._s2 * (1.0 + _JITTER) - quad, 0.0)
        return mean, latent + self._nug

    def predict_batch(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance for an ``(m, p)`` array; returns ``(m, n_out)`` arrays."""
        out = [gp.predict(thetas) for gp in self.gps]
        return np.stack([o[0] for o in out], axis=1), np.stack([o[1] for o in out], axis=1)

    def mean_grad(self, theta) -> np.ndarray:
        return np.array([gp.mean_grad(theta) for gp in self.gps])

    @property
    def nuggets(self) -> np.ndarray:
        return self._nug.copy()

    def to_dict(self) -> dict:
        return {
            "design_id": self.design_id,
            "inputs": self.X.tolist(),
            "decorrelator": None if self.decorrelator is None else self.decorrelator.to_dict(),
            "outputs": [
                {"targets": gp.y.tolist(), **gp.hyperparameters()} for gp in self.gps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPEmulator":
        X = np.asarray(d["inputs"], dtype=float)
        gps = [ScalarGP(X, o["targets"], o["lengthscales"], o["signal_var"], o["nugget"], o["mean"])
               for o in d["outputs"]]
        dec = None if d.get("decorrelator") is None else Decorrelator.from_dict(d["decorrelator"])
        return cls(gps, dec, d.get("design_id"))


def train(inputs, outputs, decorrelator: Decorrelator | None = None, n_starts: int = 5, seed=0,
          subsample: int | None = None, design_id: str | None = None) -> GPEmulator:
    """Fit one scalar GP per column of the (already decorrelated) ``outputs``."""
    from .forward import derive_seed

    inputs = _as_inputs(inputs)
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    gps = [fit_scalar_gp(inputs, outputs[:, i], n_starts=n_starts, seed=derive_seed(seed, i),
                         subsample=subsample)
           for i in range(outputs.shape[1])]
    return GPEmulator(gps, decorrelator, design_id)
