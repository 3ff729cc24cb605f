"""Command-line front end: ``cesdesign {control,design,uq,report}``.

Settings come from an optional YAML config, then the environment
(``CESDESIGN_OUTPUT_DIR``, ``CESDESIGN_WORKERS``), then command-line flags.
Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, PipelineConfig, config_from_dict, dump_config
from .core import SEASON_NAMES, DomainError, enumerate_designs, estimate_covariance
from .design import (
    CONTROL_STREAM,
    build_model,
    design_space,
    design_stage,
    in_hdr,
    prior_from_config,
    theta_true_from_config,
    uq_stage,
)
from .eki import SingularUpdateError
from .forward import ForwardModelError, derive_seed
from .mcmc import SamplerError
from .oracle import GridBoundaryError, oracle_utility_table, spearman
from .report import kde_grid, report_files, utility_series
from .results import (
    THETA_COLUMNS,
    design_file_stem,
    read_samples,
    read_utility_table,
    statistic_columns,
    write_json,
    write_matrix_csv,
    write_samples,
    write_training_set,
    write_utility_table,
)

log = logging.getLogger("cesdesign")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (np.linalg.LinAlgError, SingularUpdateError, SamplerError, ForwardModelError,
                    GridBoundaryError, FloatingPointError, DomainError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_item(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def resolve_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
    if os.environ.get("CESDESIGN_OUTPUT_DIR"):
        data["output_dir"] = os.environ["CESDESIGN_OUTPUT_DIR"]
    if os.environ.get("CESDESIGN_WORKERS"):
        try:
            data["workers"] = int(os.environ["CESDESIGN_WORKERS"])
        except ValueError as exc:
            raise ConfigError("CESDESIGN_WORKERS must be an integer") from exc
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_item(data, key.strip(), yaml.safe_load(raw))
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("output_dir", "output_dir")):
        if getattr(args, flag, None) is not None:
            data[key] = getattr(args, flag)
    if getattr(args, "mode", None):
        _set_item(data, "design.mode", args.mode)
    if getattr(args, "model", None):
        _set_item(data, "model.name", args.model)
    return config_from_dict(data).resolved()


def _output_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_control(cfg: PipelineConfig, args) -> int:
    out = _output_dir(cfg)
    model = build_model(cfg)
    prior = prior_from_config(cfg)
    space = model.space
    samples = model.run_control(prior.mean, cfg.control.n_windows, cfg.control.n_spinup,
                                derive_seed(cfg.seed, CONTROL_STREAM))
    write_matrix_csv(out / "control_samples.csv",
                     statistic_columns(space.n_lat, space.n_seasons, space.n_stats), samples)
    cov = estimate_covariance(samples) if samples.shape[0] >= 2 else None
    write_json(out / "control_covariance.json", {
        "n_samples": int(samples.shape[0]),
        "dim": int(samples.shape[1]),
        "theta": prior.mean.tolist(),
        "covariance": None if cov is None else cov.tolist(),
    })
    dump_config(cfg, out / "effective_config.yaml")
    print(f"wrote {samples.shape[0]} control windows x {samples.shape[1]} statistics to {out}")
    return EXIT_OK


def _select_designs(all_designs, n):
    if n is None:
        return all_designs
    if not 1 <= n <= len(all_designs):
        raise UsageError(f"--designs must lie in [1, {len(all_designs)}]")
    idx = np.unique(np.round(np.linspace(0, len(all_designs) - 1, n)).astype(int))
    return [all_designs[i] for i in idx]


def cmd_design(cfg: PipelineConfig, args) -> int:
    out = _output_dir(cfg)
    model = build_model(cfg)
    prior = prior_from_config(cfg)
    ds = design_space(cfg, model)
    designs = _select_designs(enumerate_designs(ds), args.designs)
    table, data = design_stage(model, prior, ds, cfg, designs=designs, return_data=True)
    write_utility_table(out / "utility_table.csv", table)
    if data.training is not None:
        write_training_set(out / "training_set.csv", data.training, ds.n_lat, ds.n_seasons)
    post_dir = out / "posteriors"
    post_dir.mkdir(exist_ok=True)
    for row in table.rows:
        if row.samples is not None:
            write_samples(post_dir / f"{design_file_stem(row.design_id)}.csv", row.samples)
    best = table.argmax
    summary = {
        "argmax": {"design_id": best.design_id, "latitude": best.latitude,
                   "season": best.season_name, "log_utility": best.log_utility},
        "n_designs": len(table),
        "n_failed": sum(r.status != "ok" for r in table.rows),
        "forward_evaluations": table.n_evaluations,
    }
    if ds.mode == "seasonal":
        summary["argmax_by_season"] = {
            SEASON_NAMES[s]: {"design_id": r.design_id, "latitude": r.latitude, "log_utility": r.log_utility}
            for s, r in table.argmax_by_season().items()}
    if args.oracle:
        oracle = oracle_utility_table(model, ds, prior.mean, prior, cfg.seed, cfg, designs=designs, data=data)
        write_utility_table(out / "oracle_table.csv", oracle)
        ok = [i for i, r in enumerate(table.rows) if r.eligible]
        summary["oracle"] = {
            "spearman": spearman(table.log_utilities()[ok], oracle.log_utilities()[ok]),
            "argmax": oracle.argmax.design_id,
            "argmax_latitude": oracle.argmax.latitude,
        }
    write_json(out / "design_summary.json", summary)
    dump_config(cfg, out / "effective_config.yaml")
    print(f"argmax design {best.design_id} (latitude {best.latitude:.2f}, log U {best.log_utility:.4f})")
    if "oracle" in summary:
        print(f"oracle argmax {summary['oracle']['argmax']}, Spearman {summary['oracle']['spearman']:.3f}")
    return EXIT_OK


def cmd_uq(cfg: PipelineConfig, args) -> int:
    model = build_model(cfg)
    ds = design_space(cfg, model)
    lookup = {w.design_id: w for w in enumerate_designs(ds)}
    if args.design_id not in lookup:
        raise UsageError(f"unknown design id {args.design_id!r} for a {ds.mode} design space "
                         f"(e.g. {next(iter(lookup))!r})")
    out = _output_dir(cfg)
    w = lookup[args.design_id]
    prior = prior_from_config(cfg)
    theta_true = theta_true_from_config(cfg)
    res = uq_stage(model, w, theta_true, prior, cfg)
    stem = f"uq_{design_file_stem(w.design_id)}"
    write_samples(out / f"{stem}_samples.csv", res.samples)
    summary = {
        "design_id": w.design_id,
        "latitude": w.center_latitude,
        "season": "" if w.season is None else SEASON_NAMES[w.season],
        "theta_true": theta_true.tolist(),
        "posterior_mean": res.mean.tolist(),
        "posterior_cov": res.cov.tolist(),
        "log_utility": res.log_utility,
        "truth_in_99_hdr": in_hdr(res.samples.samples, theta_true, 0.99),
        "acceptance_rate": res.samples.acceptance_rate,
        "observation": res.observation.tolist(),
        "obs_noise_sd": res.obs_noise_sd.tolist(),
    }
    write_json(out / f"{stem}_summary.json", summary)
    dump_config(cfg, out / "effective_config.yaml")
    print(f"design {w.design_id}: log U {res.log_utility:.4f}, truth in 99% HDR: {summary['truth_in_99_hdr']}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.results)
    table_path = root / "utility_table.csv"
    sample_files = report_files(root)
    if not table_path.exists() and not sample_files:
        raise UsageError(f"no utility_table.csv or posterior samples under {root}")
    out = root / "report"
    out.mkdir(exist_ok=True)
    if table_path.exists():
        for label, series in utility_series(read_utility_table(table_path)).items():
            write_matrix_csv(out / f"utility_{label}.csv", ("latitude", "log_utility"), series)
    for path in sample_files:
        grid = kde_grid(read_samples(path), n=args.grid)
        write_matrix_csv(out / f"density_{path.stem}.csv", (*THETA_COLUMNS, "density"), grid.long_format())
    print(f"wrote report files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cesdesign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--mode", choices=("stationary", "seasonal"))
        p.add_argument("--model", choices=("analytic", "lorenz96"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set mcmc.n_samples=20000")

    common(sub.add_parser("control", help="run a control simulation and estimate its covariance"))
    p = sub.add_parser("design", help="rank designs by D-utility")
    common(p)
    p.add_argument("--designs", type=int, help="evaluate N designs spread evenly over the design space")
    p.add_argument("--oracle", action="store_true", help="also compute grid-quadrature reference utilities")
    p = sub.add_parser("uq", help="posterior from synthetic data at one design")
    common(p)
    p.add_argument("--design-id", required=True, help="e.g. 16 (stationary) or 3:14 (season:latitude)")
    p = sub.add_parser("report", help="plot data from a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--grid", type=int, default=201, help="density grid points per axis")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args)
        return {"control": cmd_control, "design": cmd_design, "uq": cmd_uq}[args.command](cfg, args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"cesdesign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"cesdesign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        print(f"cesdesign: failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
