"""Reading and writing result files (CSV tables, JSON summaries).

Floats are written with ``%.17g`` so files round-trip exactly and identical
runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core import SEASON_NAMES, STATISTIC_NAMES
from .design import DesignResult, UtilityTable
from .mcmc import PosteriorSampleSet

THETA_COLUMNS = ("theta_rh_logit", "theta_log_tau")
UTILITY_COLUMNS = ("design_id", "latitude", "season", "log_utility", "log_det_cov",
                   "acceptance_rate", "status")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return "" if x is None else str(x)


def write_matrix_csv(path, header, rows) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def _clean(obj):
    """Replace non-finite floats, which JSON cannot represent, by strings."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return str(float(obj))
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# -- statistics vectors ----------------------------------------------------


def statistic_columns(n_lat: int, n_seasons: int, n_stats: int = 3) -> list[str]:
    """Column names matching the statistic-major, season-stacked layout."""
    names = STATISTIC_NAMES if n_stats == 3 else tuple(f"stat{i}" for i in range(n_stats))
    cols = []
    for season in range(n_seasons):
        prefix = "" if n_seasons == 1 else f"{SEASON_NAMES[season]}_"
        cols.extend(f"{prefix}{name}_lat{j + 1:02d}" for name in names for j in range(n_lat))
    return cols


# -- utility tables --------------------------------------------------------


def write_utility_table(path, table: UtilityTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(UTILITY_COLUMNS)
        for r in sorted(table.rows, key=lambda r: r.index):
            writer.writerow([r.design_id, fmt(r.latitude), r.season_name, fmt(r.log_utility),
                             fmt(r.log_det_cov), fmt(r.acceptance_rate), r.status])


def read_utility_table(path) -> UtilityTable:
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.DictReader(fh)):
            season = SEASON_NAMES.index(rec["season"]) if rec["season"] else None
            rows.append(DesignResult(
                design_id=rec["design_id"], index=i, latitude=float(rec["latitude"]), season=season,
                log_utility=float(rec["log_utility"]), log_det_cov=float(rec["log_det_cov"]),
                acceptance_rate=float(rec["acceptance_rate"] or "nan"), status=rec["status"]))
    return UtilityTable(rows)


# -- posterior samples -----------------------------------------------------


def design_file_stem(design_id: str) -> str:
    return "design_" + design_id.replace(":", "-")


def write_samples(path, ps: PosteriorSampleSet) -> None:
    write_matrix_csv(path, THETA_COLUMNS, ps.samples)
    write_json(Path(path).with_suffix(".json"), ps.diagnostics())


def read_samples(path) -> np.ndarray:
    return read_matrix_csv(path)[1]


# -- training sets ---------------------------------------------------------


def write_training_set(path, training, n_lat: int | None = None, n_seasons: int = 1) -> None:
    """Input/output pairs as CSV: theta columns, the iteration tag, then the outputs."""
    outputs = np.asarray(training.outputs, dtype=float)
    n_out = outputs.shape[1]
    if n_lat is not None and n_lat * n_seasons * 3 == n_out:
        out_cols = statistic_columns(n_lat, n_seasons)
    else:
        out_cols = [f"output{i:03d}" for i in range(n_out)]
    rows = np.column_stack([training.inputs, training.iteration, outputs])
    write_matrix_csv(path, (*THETA_COLUMNS, "iteration", *out_cols), rows)


def read_training_set(path):
    from .eki import TrainingSet

    _, rows = read_matrix_csv(path)
    return TrainingSet(rows[:, :2], rows[:, 3:], rows[:, 2].astype(int))
