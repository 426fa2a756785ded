"""
GemFlow Configuration
Environment settings and run configuration for all commands
"""

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin

from gemflow.errors import ConfigError

ESTIMATORS = ("lsdr", "lr", "lsdd", "mmd")
RATIO_ESTIMATORS = ("lsdr", "lr")
DIVERGENCES = ("chi2", "kl", "js", "logd")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class Config:
    """Universal configuration class for all environments"""

    # Parallelism
    THREADS = os.getenv("GEMFLOW_THREADS")

    # Logging
    LOG_LEVEL = os.getenv("GEMFLOW_LOG_LEVEL", "INFO").upper()
    DEBUG = os.getenv("GEMFLOW_DEBUG", "False").lower() == "true"

    # Output
    OUTPUT_DIR = os.getenv("GEMFLOW_OUTPUT_DIR", "runs")

    # Diagnostics
    MAX_W2_POINTS = 4096
    KDE_RESOLUTION = 200
    KDE_MARGIN = 0.1

    @classmethod
    def thread_limit(cls) -> Optional[int]:
        """Parsed GEMFLOW_THREADS, or None when unset"""
        if cls.THREADS in (None, ""):
            return None
        return int(cls.THREADS)

    @classmethod
    def export_thread_limit(cls, environ=os.environ) -> Optional[int]:
        """Validate, then cap the BLAS/OpenMP pools; only effective before numpy is imported"""
        cls.validate_config()
        limit = cls.thread_limit()
        if limit is not None:
            for var in THREAD_VARS:
                environ[var] = str(limit)
        return limit

    @classmethod
    def log_level(cls) -> str:
        return "DEBUG" if cls.DEBUG else cls.LOG_LEVEL

    @classmethod
    def validate_config(cls):
        """Validate environment configuration"""
        problems = []

        if cls.THREADS not in (None, ""):
            try:
                if int(cls.THREADS) < 1:
                    problems.append("GEMFLOW_THREADS must be >= 1")
            except ValueError:
                problems.append(f"GEMFLOW_THREADS is not an integer: {cls.THREADS!r}")

        if cls.LOG_LEVEL not in LOG_LEVELS:
            problems.append(f"GEMFLOW_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}")

        if problems:
            raise ConfigError(f"Invalid environment configuration: {'; '.join(problems)}")

        return True


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False


def get_config(environment: Optional[str] = None):
    """Get configuration based on environment"""
    environment = environment or os.getenv("GEMFLOW_ENV", "production")
    if environment == "development":
        return DevelopmentConfig
    return ProductionConfig


@dataclass
class FlowConfig:
    """Hyper-parameters of one particle flow (defaults: 2D settings of the method)"""

    step_size: float = 0.005
    iterations: int = 20000
    fit_rounds: int = 5
    penalty_alpha: float = 0.0
    batch_size: int = 1000
    estimator: str = "lsdr"
    divergence: str = "chi2"
    learning_rate: float = 0.0005
    seed: int = 0
    diag_every: int = 100
    diag_size: int = 2048
    v_max: float = 1e3
    warm_start: bool = True
    hidden_widths: Tuple[int, ...] = (64, 64, 64)
    ratio_min: float = 1e-3
    ratio_max: float = 1e3
    lsdd_samples: int = 1000
    kernel_bandwidth: Optional[float] = None

    def validate(self) -> "FlowConfig":
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.fit_rounds < 1:
            raise ConfigError(f"fit_rounds must be >= 1, got {self.fit_rounds}")
        if self.penalty_alpha < 0:
            raise ConfigError(f"penalty_alpha must be >= 0, got {self.penalty_alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"Unknown estimator '{self.estimator}' (expected one of {', '.join(ESTIMATORS)})")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"Unknown divergence '{self.divergence}' (expected one of {', '.join(DIVERGENCES)})")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.diag_every < 1:
            raise ConfigError(f"diag_every must be >= 1, got {self.diag_every}")
        if self.diag_size < 2:
            raise ConfigError(f"diag_size must be >= 2, got {self.diag_size}")
        if not self.v_max > 0:
            raise ConfigError(f"v_max must be positive, got {self.v_max}")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden_widths must be positive, got {self.hidden_widths}")
        if not 0 < self.ratio_min < self.ratio_max:
            raise ConfigError(f"ratio clamp needs 0 < ratio_min < ratio_max, got [{self.ratio_min}, {self.ratio_max}]")
        if self.lsdd_samples < 1:
            raise ConfigError(f"lsdd_samples must be >= 1, got {self.lsdd_samples}")
        if self.kernel_bandwidth is not None and not self.kernel_bandwidth > 0:
            raise ConfigError(f"kernel_bandwidth must be positive, got {self.kernel_bandwidth}")
        return self


@dataclass
class OuterConfig:
    """Optional outer loop: a generator G(z) refit on the pushed particles"""

    latent_dim: int = 2
    generator_widths: Tuple[int, ...] = (64, 64)
    outer_rounds: int = 10
    inner_per_outer: int = 20
    gen_epochs: int = 200
    gen_learning_rate: float = 0.0005

    def validate(self) -> "OuterConfig":
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if any(w < 1 for w in self.generator_widths):
            raise ConfigError(f"generator_widths must be positive, got {self.generator_widths}")
        if self.outer_rounds < 1:
            raise ConfigError(f"outer_rounds must be >= 1, got {self.outer_rounds}")
        if self.inner_per_outer < 0:
            raise ConfigError(f"inner_per_outer must be >= 0, got {self.inner_per_outer}")
        if self.gen_epochs < 1:
            raise ConfigError(f"gen_epochs must be >= 1, got {self.gen_epochs}")
        if not self.gen_learning_rate > 0:
            raise ConfigError(f"gen_learning_rate must be positive, got {self.gen_learning_rate}")
        return self


@dataclass
class RunConfig:
    """Everything train-flow needs: flow settings, data, outputs"""

    flow: FlowConfig = field(default_factory=FlowConfig)
    dataset: str = "moons"
    reference: str = "gaussian_ref"
    n_particles: int = 50000
    target_size: Optional[int] = None
    data_seed: int = 0
    out_dir: str = os.path.join(Config.OUTPUT_DIR, "default")
    checkpoint_every: int = 1000
    plot_kde: bool = True
    plot_trace: bool = True
    plot_scatter: bool = True
    outer: Optional[OuterConfig] = None

    @property
    def resolved_target_size(self) -> int:
        return self.target_size if self.target_size is not None else self.n_particles

    def validate(self) -> "RunConfig":
        # local import keeps config importable before numpy is loaded
        from gemflow.core.datasets import DATASET_IDS

        self.flow.validate()
        if self.outer is not None:
            self.outer.validate()
        for key in ("dataset", "reference"):
            value = getattr(self, key)
            if value not in DATASET_IDS:
                raise ConfigError(f"Unknown dataset id '{value}' for '{key}'")
        if self.n_particles < 1:
            raise ConfigError(f"n_particles must be >= 1, got {self.n_particles}")
        if self.target_size is not None and self.target_size < 1:
            raise ConfigError(f"target_size must be >= 1, got {self.target_size}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.flow.batch_size > self.n_particles:
            raise ConfigError(
                f"batch_size ({self.flow.batch_size}) exceeds the particle count ({self.n_particles})"
            )
        return self


# Key = value parsing

_TOP_SECTION = "flow"
_OUTER_SECTION = "outer"
_RUN_SCALARS = tuple(f for f in fields(RunConfig) if f.name not in ("flow", "outer"))


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(raw)


def _convert(name: str, raw: str, annotation: Any) -> Any:
    """Convert one config value according to the dataclass field type"""
    raw = raw.strip()
    try:
        if annotation is bool:
            return _parse_bool(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            if not raw:
                raise ValueError(raw)
            return raw
        origin = get_origin(annotation)
        if origin is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if origin is Union:
            if raw.lower() in ("", "none", "auto"):
                return None
            inner = next(arg for arg in get_args(annotation) if arg is not type(None))
            return _convert(name, raw, inner)
    except ValueError as exc:
        raise ConfigError(f"Invalid value for '{name}': {raw!r}") from exc
    raise ConfigError(f"Unsupported config field type for '{name}'")


def _format(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_run_config(text: str) -> RunConfig:
    """Parse a flat key = value config (optional [outer] section) into a RunConfig"""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), empty_lines_in_values=False
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config: {exc}") from exc

    unknown_sections = [s for s in parser.sections() if s not in (_TOP_SECTION, _OUTER_SECTION)]
    if unknown_sections:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown_sections)}")

    flow_fields = {f.name: f for f in fields(FlowConfig)}
    run_fields = {f.name: f for f in _RUN_SCALARS}
    flow_values: Dict[str, Any] = {}
    run_values: Dict[str, Any] = {}

    for key, raw in parser.items(_TOP_SECTION):
        if key in flow_fields:
            flow_values[key] = _convert(key, raw, flow_fields[key].type)
        elif key in run_fields:
            run_values[key] = _convert(key, raw, run_fields[key].type)
        else:
            raise ConfigError(f"Unknown config key '{key}'")

    outer = None
    if parser.has_section(_OUTER_SECTION):
        outer_fields = {f.name: f for f in fields(OuterConfig)}
        outer_values: Dict[str, Any] = {}
        for key, raw in parser.items(_OUTER_SECTION):
            if key not in outer_fields:
                raise ConfigError(f"Unknown config key '{key}' in [outer]")
            outer_values[key] = _convert(key, raw, outer_fields[key].type)
        outer = OuterConfig(**outer_values)

    return RunConfig(flow=FlowConfig(**flow_values), outer=outer, **run_values)


def dump_run_config(config: RunConfig) -> str:
    """Serialize a RunConfig so that parse_run_config(dump_run_config(c)) == c"""
    lines = ["# gemflow run configuration"]
    for f in fields(FlowConfig):
        lines.append(f"{f.name} = {_format(getattr(config.flow, f.name))}")
    for f in _RUN_SCALARS:
        lines.append(f"{f.name} = {_format(getattr(config, f.name))}")
    if config.outer is not None:
        lines.append("")
        lines.append(f"[{_OUTER_SECTION}]")
        for f in fields(OuterConfig):
            lines.append(f"{f.name} = {_format(getattr(config.outer, f.name))}")
    return "\n".join(lines) + "\n"


def load_run_config(path: str) -> RunConfig:
    """Read and validate a run config file"""
    with open(path, "r", encoding="utf-8") as f:
        return parse_run_config(f.read()).validate()


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Apply command-line overrides (None values are ignored)"""
    flow_names = {f.name for f in fields(FlowConfig)}
    flow_updates = {k: v for k, v in overrides.items() if v is not None and k in flow_names}
    run_updates = {k: v for k, v in overrides.items() if v is not None and k not in flow_names}
    return replace(config, flow=replace(config.flow, **flow_updates), **run_updates)


# settings a resumed run may change without invalidating its checkpoints
RESUMABLE_CHANGES = ("iterations", "out_dir", "checkpoint_every", "plot_kde", "plot_trace", "plot_scatter")


def resume_conflicts(saved: RunConfig, current: RunConfig) -> List[str]:
    """Names of settings that differ between a run directory's config and the one resuming it"""
    conflicts = [
        f.name for f in fields(FlowConfig)
        if f.name not in RESUMABLE_CHANGES and getattr(saved.flow, f.name) != getattr(current.flow, f.name)
    ]
    conflicts += [
        f.name for f in _RUN_SCALARS
        if f.name not in RESUMABLE_CHANGES and getattr(saved, f.name) != getattr(current, f.name)
    ]
    if saved.outer != current.outer:
        conflicts.append(_OUTER_SECTION)
    return conflicts
