"""
Experiment configuration
Flat key=value files read with python-dotenv, CLI overrides on top, and
validation of the resolution rules before any sampling starts.
"""
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union, get_type_hints

from dotenv import dotenv_values

from fklab import settings
from fklab.errors import ConfigValidationError
from fklab.geometry import MAX_KOCH_LEVEL, required_level

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "geometry", "occupation", "pz", "divergence", "kernel",
    "crossing", "decay", "harmonic", "positivity", "acceptance",
)
BOUNDARY_KINDS = ("koch", "line", "slit")
GEOMETRY_MODES = ("emit", "verify")
TIERS = ("fast", "desk", "full")

Point = Tuple[float, float]

KOCH_CENTROID = (0.5, math.sqrt(3.0) / 6.0)


@dataclass
class ExperimentConfig:
    """Everything one run needs; serialised verbatim into its RunRecord"""
    experiment: str = "geometry"
    # geometry
    kind: str = "koch"
    level: int = 6
    half_width: float = 20.0
    geometry_mode: str = "emit"
    boundary_file: str = ""
    scale_min: float = 3.0 ** -7
    scale_max: float = 3.0 ** -2
    n_centers: int = 0
    n_regularity_points: int = 10000
    # potential
    beta: float = 1.0
    c_v: float = 1.0
    truncation_a: float = 16.0
    a_sweep: List[float] = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0])
    constant: Optional[float] = None
    mesh_levels: int = 5
    # sampling
    n_paths: int = 2000
    n_steps: int = 0
    t: float = 1.0
    delta: float = 1.0
    a: float = 1.0 / 3.0
    n_min: int = 1
    n_max: int = 3
    theta: float = 0.5
    step_resolution: float = 10.0
    shell_resolution: float = 20.0
    eps: Optional[float] = None
    max_steps: int = 100000
    # points
    x: Point = KOCH_CENTROID
    y: Point = (0.5, -1.5)
    ball_center: Point = (0.5, -1.5)
    ball_radius: float = 0.3
    anchor: Optional[Point] = None
    direction: Optional[Point] = None
    distances: List[float] = field(default_factory=lambda: [2.0 ** -k for k in range(3, 8)])
    # run
    seed: int = 0
    workers: int = settings.DEFAULT_WORKERS
    output: str = str(settings.OUTPUT_DIR)
    tier: str = "fast"
    dump_paths: int = 0

    @property
    def n_range(self) -> Tuple[int, int]:
        return (self.n_min, self.n_max)


def _field_hints() -> Dict[str, object]:
    return get_type_hints(ExperimentConfig)


def _parse_point(raw: str) -> Point:
    parts = raw.split(":")
    if len(parts) != 2:
        raise ValueError(f"expected x:y, got {raw!r}")
    return (float(parts[0]), float(parts[1]))


def _convert(name: str, hint, raw: str):
    raw = raw.strip()
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if hint == List[float]:
            return [float(v) for v in raw.split(",") if v.strip()]
        if hint == Point:
            return _parse_point(raw)
        if hint == Optional[float]:
            return None if raw in ("", "none") else float(raw)
        if hint == Optional[Point]:
            return None if raw in ("", "none") else _parse_point(raw)
    except ValueError as exc:
        raise ConfigValidationError(f"{name}: cannot parse {raw!r} ({exc})") from exc
    raise ConfigValidationError(f"{name}: unsupported field type {hint}")


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return f"{value[0]!r}:{value[1]!r}"
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def config_from_mapping(values: Mapping[str, Optional[str]],
                        base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply string values on top of `base` (defaults when omitted)."""
    hints = _field_hints()
    updates = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in hints:
            raise ConfigValidationError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(hints))}"
            )
        updates[name] = _convert(name, hints[name], raw or "")
    return replace(base or ExperimentConfig(), **updates)


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    return config_from_mapping(dotenv_values(stream=io.StringIO(text)), base)


def load_config(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(config, f.name))}\n" for f in fields(config))


def apply_overrides(config: ExperimentConfig, overrides: List[str]) -> ExperimentConfig:
    """`--set key=value` strings, later ones winning."""
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigValidationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key] = raw
    return config_from_mapping(values, config)


def _is_geometric(values: List[float]) -> bool:
    if len(values) < 2 or any(v <= 0 for v in values):
        return False
    ratio = values[1] / values[0]
    return ratio != 1.0 and all(abs(values[i + 1] / values[i] / ratio - 1.0) < 1e-6
                                for i in range(len(values) - 1))


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Raise ConfigValidationError naming the corrective value; returns the config."""
    problems = []
    if config.experiment not in EXPERIMENTS:
        raise ConfigValidationError(
            f"unknown experiment {config.experiment!r}; valid: {', '.join(EXPERIMENTS)}"
        )
    if config.kind not in BOUNDARY_KINDS:
        problems.append(f"kind must be one of {', '.join(BOUNDARY_KINDS)}, got {config.kind!r}")
    if config.geometry_mode not in GEOMETRY_MODES:
        problems.append(f"geometry_mode must be emit or verify, got {config.geometry_mode!r}")
    if config.geometry_mode == "verify" and config.experiment == "geometry" and not config.boundary_file:
        problems.append("geometry verify needs boundary_file")
    if config.tier not in TIERS:
        problems.append(f"tier must be one of {', '.join(TIERS)}, got {config.tier!r}")
    if config.level < 0 or config.level > MAX_KOCH_LEVEL:
        problems.append(f"level must lie in 0..{MAX_KOCH_LEVEL}, got {config.level}")
    if config.n_paths < 1:
        problems.append("n_paths must be positive")
    if config.workers < 1:
        problems.append("workers must be positive")
    if not 0 < config.a < 1:
        problems.append(f"a must lie in (0, 1), got {config.a}")
    if config.n_max < config.n_min or config.n_min < 0:
        problems.append(f"invalid shell range {config.n_min}..{config.n_max}")
    if config.t <= 0 or config.delta <= 0:
        problems.append("t and delta must be positive")

    sweep = config.a_sweep
    if config.experiment in ("decay", "divergence"):
        if len(sweep) < 4:
            problems.append(f"{config.experiment} needs at least 4 A values, got {len(sweep)}")
        elif not _is_geometric(sweep):
            problems.append(f"a_sweep must be geometric, got {sweep}")
    if config.experiment in ("kernel", "crossing", "decay", "divergence") and config.constant is None:
        biggest = max(sweep) if config.experiment in ("decay", "divergence") else config.truncation_a
        if not math.isfinite(biggest):
            problems.append("path experiments need a finite truncation_a")
        else:
            horizon = config.delta ** 2 if config.experiment == "divergence" else config.t
            max_step = 0.5 / (config.step_resolution * biggest) ** 2
            need = int(math.ceil(horizon / max_step - 1e-9))
            if config.n_steps and config.n_steps < need:
                problems.append(f"n_steps {config.n_steps} too coarse for A = {biggest:g}; use n_steps >= {need}")
            level = required_level(1.0 / biggest)
            if config.kind == "koch" and config.level < level:
                problems.append(f"koch level {config.level} too coarse for A = {biggest:g}; use level >= {level}")
    if config.experiment in ("occupation", "pz") and config.n_steps:
        max_step = config.a ** (2 * (config.n_max + 1)) / config.shell_resolution
        need = int(math.ceil(config.delta ** 2 / max_step - 1e-9))
        if config.n_steps < need:
            problems.append(f"n_steps {config.n_steps} too coarse for shell {config.n_max + 1}; use n_steps >= {need}")
    if config.experiment == "positivity" and config.kind == "koch":
        finest = config.a ** config.mesh_levels
        if 3.0 ** -config.level > finest / 10.0:
            problems.append(
                f"koch level {config.level} too coarse for {config.mesh_levels} shells; "
                f"use level >= {required_level(finest, 10.0)}"
            )
    if problems:
        raise ConfigValidationError("; ".join(problems))
    return config


def config_dict(config: ExperimentConfig) -> Dict[str, object]:
    return asdict(config)
