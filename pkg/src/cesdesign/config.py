"""Pipeline configuration: YAML schema, defaults and validation.

Every section is a dataclass; unknown keys are rejected. Values left as
``null`` take a default that depends on the design mode (stationary runs use
30-day windows and a 650-window control run with 50 discarded, seasonal runs
use 90-day windows and 150 annual cycles with 4 discarded). ``resolved()``
fills those in, and the resolved config is what gets echoed next to results.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .core import STATISTIC_NAMES, PriorConfig
from .mcmc import ChainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class ModelSection:
    name: str = "analytic"
    window_days: float | None = None
    n_lat: int = 32

    def validate(self):
        if self.name not in ("analytic", "lorenz96"):
            raise ConfigError(f"model.name must be 'analytic' or 'lorenz96', got {self.name!r}")
        if self.window_days is not None and self.window_days <= 0:
            raise ConfigError("model.window_days must be positive")
        if self.n_lat < 1:
            raise ConfigError("model.n_lat must be at least 1")


@dataclass
class DesignSection:
    mode: str = "stationary"
    stencil: int | None = None

    def validate(self):
        if self.mode not in ("stationary", "seasonal"):
            raise ConfigError(f"design.mode must be 'stationary' or 'seasonal', got {self.mode!r}")
        if self.stencil is not None and self.stencil < 1:
            raise ConfigError("design.stencil must be at least 1")


@dataclass
class ControlSection:
    n_windows: int | None = None
    n_spinup: int | None = None

    def validate(self):
        if self.n_windows is not None and self.n_spinup is not None:
            if self.n_spinup < 0 or self.n_windows - self.n_spinup < 1:
                raise ConfigError("control run needs n_spinup >= 0 and at least 1 retained window")


@dataclass
class EKISection:
    ensemble_size: int = 100
    n_iter: int = 5

    def validate(self):
        if self.ensemble_size < 3:
            raise ConfigError("eki.ensemble_size must be at least 3")
        if self.n_iter < 1:
            raise ConfigError("eki.n_iter must be at least 1")


@dataclass
class GPSection:
    n_starts: int = 5
    nugget_floor: float = 1e-10
    lengthscale_floor: float = 0.05
    hyper_subsample: int | None = 200

    def validate(self):
        if self.n_starts < 1:
            raise ConfigError("gp.n_starts must be at least 1")
        if not 0 < self.nugget_floor < 1:
            raise ConfigError("gp.nugget_floor must lie in (0, 1)")
        if not 0 < self.lengthscale_floor < 1:
            raise ConfigError("gp.lengthscale_floor must lie in (0, 1)")
        if self.hyper_subsample is not None and self.hyper_subsample < 10:
            raise ConfigError("gp.hyper_subsample must be at least 10 (or null for all points)")


@dataclass
class MCMCSection:
    n_samples: int = 50_000
    burn_fraction: float = 0.25
    thin: int = 5
    target_acceptance: float = 0.3

    def validate(self):
        try:
            self.chain_config()
        except ValueError as exc:
            raise ConfigError(f"mcmc: {exc}") from exc

    def chain_config(self) -> ChainConfig:
        return ChainConfig(n_samples=self.n_samples, burn_fraction=self.burn_fraction,
                           thin=self.thin, target_acceptance=self.target_acceptance)


def _default_bounds() -> dict:
    return {
        "relative_humidity": [0.0, 1.0],
        "precipitation": [0.0, math.inf],
        "extreme_frequency": [0.0, 1.0],
    }


@dataclass
class NoiseSection:
    C: float = 0.2
    C_max: float = 0.1
    bounds: dict = field(default_factory=_default_bounds)

    def validate(self):
        if self.C <= 0 or self.C_max <= 0:
            raise ConfigError("noise.C and noise.C_max must be positive")
        unknown = set(self.bounds) - set(STATISTIC_NAMES)
        if unknown:
            raise ConfigError(f"noise.bounds has unknown statistics {sorted(unknown)}")
        for name, pair in self.bounds.items():
            if len(pair) != 2 or not float(pair[0]) < float(pair[1]):
                raise ConfigError(f"noise.bounds.{name} must be [lower, upper] with lower < upper")

    def stat_bounds(self) -> list[tuple[float, float]]:
        full = _default_bounds() | self.bounds
        return [tuple(float(v) for v in full[name]) for name in STATISTIC_NAMES]


@dataclass
class UQSection:
    rh_true: float = 0.7
    tau_true_s: float = 7200.0
    obs_noise: bool = True

    def validate(self):
        if not 0 < self.rh_true < 1:
            raise ConfigError("uq.rh_true must lie in (0, 1)")
        if self.tau_true_s <= 0:
            raise ConfigError("uq.tau_true_s must be positive")


@dataclass
class PriorSection:
    rh_logit_mean: float = 0.0
    rh_logit_var: float = 1.0
    tau_median_s: float = 43200.0
    tau_log_var: float = math.log(2.0)

    def validate(self):
        if self.rh_logit_var <= 0 or self.tau_log_var <= 0 or self.tau_median_s <= 0:
            raise ConfigError("prior variances and tau_median_s must be positive")

    def prior_config(self) -> PriorConfig:
        return PriorConfig(**asdict(self))


@dataclass
class PipelineConfig:
    model: ModelSection = field(default_factory=ModelSection)
    prior: PriorSection = field(default_factory=PriorSection)
    design: DesignSection = field(default_factory=DesignSection)
    control: ControlSection = field(default_factory=ControlSection)
    eki: EKISection = field(default_factory=EKISection)
    gp: GPSection = field(default_factory=GPSection)
    mcmc: MCMCSection = field(default_factory=MCMCSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    uq: UQSection = field(default_factory=UQSection)
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"

    def validate(self) -> "PipelineConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                value.validate()
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    def resolved(self) -> "PipelineConfig":
        """Copy with every mode-dependent ``null`` replaced by its default."""
        seasonal = self.design.mode == "seasonal"
        model = replace(self.model, window_days=self.model.window_days
                        if self.model.window_days is not None else (90.0 if seasonal else 30.0))
        design = replace(self.design, stencil=self.design.stencil
                         if self.design.stencil is not None else (1 if seasonal else 3))
        n_windows = self.control.n_windows if self.control.n_windows is not None else (150 if seasonal else 650)
        n_spinup = self.control.n_spinup if self.control.n_spinup is not None else (4 if seasonal else 50)
        control = ControlSection(n_windows, n_spinup)
        return replace(self, model=model, design=design, control=control).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(annotation: str, value, path: str):
    """Check ``value`` against a field annotation such as ``"float | None"``."""
    kinds = [a.strip() for a in annotation.split("|")]
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"{path} may not be null")
    if "bool" in kinds and isinstance(value, bool):
        return value
    if "int" in kinds and isinstance(value, int) and not isinstance(value, bool):
        return value
    if "float" in kinds and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            pass
    if "str" in kinds and isinstance(value, str):
        return value
    raise ConfigError(f"{path} has invalid value {value!r} (expected {annotation})")


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        elif isinstance(default, dict):
            if not isinstance(value, dict) or not all(isinstance(v, (list, tuple)) for v in value.values()):
                raise ConfigError(f"{where} must map names to [lower, upper] pairs")
            kwargs[name] = {k: [_coerce("float", x, f"{where}.{k}") for x in v] for k, v in value.items()}
        else:
            kwargs[name] = _coerce(known[name].type, value, where)
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    try:
        return _build(PipelineConfig, data, "").validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def dump_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
