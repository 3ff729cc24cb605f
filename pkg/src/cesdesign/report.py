"""Plot-ready data from finished runs: utility curves and posterior density grids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .core import SEASON_NAMES
from .design import UtilityTable


def utility_series(table: UtilityTable) -> dict[str, np.ndarray]:
    """``{series label: (n, 2) array of (latitude, log utility)}``, one row per design.

    Stationary tables give a single series labelled ``"annual"``; seasonal
    tables give one series per season.
    """
    out = {}
    seasons = sorted({r.season for r in table.rows}, key=lambda s: -1 if s is None else s)
    for season in seasons:
        rows = sorted((r for r in table.rows if r.season == season), key=lambda r: r.latitude)
        label = "annual" if season is None else SEASON_NAMES[season]
        out[label] = np.array([[r.latitude, r.log_utility] for r in rows])
    return out


@dataclass
class DensityGrid:
    x: np.ndarray
    y: np.ndarray
    density: np.ndarray  # density[i, j] at (x[i], y[j])

    def integral(self) -> float:
        return float(np.trapezoid(np.trapezoid(self.density, self.y, axis=1), self.x))

    def long_format(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), self.density.ravel()])


def kde_grid(samples, n: int = 201, pad: float = 4.0) -> DensityGrid:
    """Gaussian KDE of 2-D samples on an ``n x n`` grid.

    The grid spans the sample range widened by ``pad`` kernel bandwidths on
    each side, so the density is negligible on its edge.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != 2:
        raise ValueError("density grids need two-parameter samples")
    kde = gaussian_kde(samples.T)
    bw = np.sqrt(np.diag(kde.covariance))
    lo = samples.min(axis=0) - pad * bw
    hi = samples.max(axis=0) + pad * bw
    x = np.linspace(lo[0], hi[0], n)
    y = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    dens = kde(np.vstack([X.ravel(), Y.ravel()])).reshape(n, n)
    return DensityGrid(x, y, dens)


def report_files(results_dir) -> list[Path]:
    """Sample CSVs found under a results directory, in a stable order."""
    root = Path(results_dir)
    found = sorted((root / "posteriors").glob("design_*.csv")) if (root / "posteriors").is_dir() else []
    found += sorted(root.glob("uq_*_samples.csv"))
    return found
