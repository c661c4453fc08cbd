"""Run configuration: YAML files, named presets, validation and echo.

A config file is a YAML mapping. Top-level keys configure the device and the
optimiser; the ``hom``, ``sweep`` and ``gradient`` sections configure the
quantum, bias and gradient-check commands. Presets fill defaults, explicit
keys override them, and unknown keys are rejected with their line number.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigurationError, ParseError

PRESETS = {
    "A": {"iterations": 120, "min_feature_nm": 120.0, "wavelengths_nm": [1550.0]},
    "B": {"iterations": 80, "min_feature_nm": 80.0, "wavelengths_nm": [1550.0]},
    "C": {"iterations": 80, "min_feature_nm": 80.0, "wavelengths_nm": [1500.0, 1550.0, 1600.0]},
}

DEVICES = ("mbs", "mdm", "tritter")
SEED_MAX = 2**64 - 1


@dataclass
class HomSection:
    i0: float = 1.0
    eta: float | None = None
    alpha: float = math.pi
    kind: str = "triangular"
    width_ps: float = 2.3
    baseline: float = 3500.0
    integration_s: float = 1.0
    window_ns: float = 2.0
    half_range_ps: float = 5.0
    coarse_step_ps: float = 0.1
    fine_half_ps: float = 0.2
    fine_points: int = 13


@dataclass
class SweepSection:
    biases_nm: list = field(default_factory=lambda: [-5.0, 0.0, 5.0])
    wavelengths_nm: list = field(default_factory=lambda: [1550.0])
    subpixel: bool = True


@dataclass
class GradientSection:
    samples: int = 20
    step: float = 1e-4
    design_cells: int = 8
    tolerance: float = 1e-3


@dataclass
class RunConfig:
    preset: str | None = None
    seed: int = 0
    device: str = "mbs"
    objective: str | None = None
    targets: dict | None = None
    wavelengths_nm: list = field(default_factory=lambda: [1550.0])
    iterations: int = 80
    levelset_iterations: int = 20
    min_feature_nm: float = 80.0
    filter_radius_nm: float | None = None
    domain_um: float = 7.0
    design_um: float = 3.0
    dx_nm: float = 44.0
    pml_thickness: int = 12
    pml_sigma_max: float = 3.0
    pml_order: float = 2.0
    init_noise: float = 0.05
    design: str | None = None
    hom: HomSection = field(default_factory=HomSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    gradient: GradientSection = field(default_factory=GradientSection)
    source: str | None = field(default=None, compare=False)

    # -- derived values ------------------------------------------------------------
    @property
    def wavelengths(self) -> tuple[float, ...]:
        return tuple(to_si(w, -9) for w in self.wavelengths_nm)

    @property
    def continuous_iterations(self) -> int:
        return self.iterations - self.levelset_iterations

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source")
        return d

    def validate(self) -> "RunConfig":
        _validate(self)
        return self


def to_si(value: float, exp10: int) -> float:
    """``value * 10**exp10`` by shifting the decimal point, so 1550 nm is exactly 1.55e-06 m."""
    return float(Decimal(repr(float(value))).scaleb(exp10))


_SECTIONS = {"hom": HomSection, "sweep": SweepSection, "gradient": GradientSection}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _key_lines(text: str) -> dict:
    """Line number of every mapping key, keyed by its dotted path."""
    lines: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    walk(root, "")
    return lines


def _where(cfg, key):
    src = cfg.source or "<config>"
    line = getattr(cfg, "_lines", {}).get(key)
    return f"{src}:{line}" if line else src


def _err(cfg, key, msg):
    return ConfigurationError(f"{_where(cfg, key)}: key '{key}': {msg}")


def _coerce(cfg, key, value, default):
    """Type-check ``value`` against the type of the field default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _err(cfg, key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise _err(cfg, key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _err(cfg, key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise _err(cfg, key, f"expected a list, got {value!r}")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise _err(cfg, key, f"list entries must be numbers, got {v!r}")
            out.append(float(v))
        return out
    if isinstance(default, str):
        if not isinstance(value, str):
            raise _err(cfg, key, f"expected a string, got {value!r}")
        return value
    return value


# type templates for fields whose default is None
_OPTIONAL_TYPES = {"preset": "", "objective": "", "filter_radius_nm": 0.0, "design": "", "eta": 0.0}


def _apply(cfg, target, data: dict, prefix: str = ""):
    fields = _field_types(type(target))
    for key, value in data.items():
        path = f"{prefix}{key}"
        if not isinstance(key, str) or key not in fields or key == "source":
            raise _err(cfg, path, "unknown key")
        if key in _SECTIONS and not prefix:
            if not isinstance(value, dict):
                raise _err(cfg, path, "expected a mapping")
            _apply(cfg, getattr(target, key), value, prefix=f"{key}.")
            continue
        if key == "targets":
            setattr(target, key, _targets(cfg, value))
            continue
        default = getattr(target, key)
        if default is None:
            default = _OPTIONAL_TYPES[key]
        setattr(target, key, _coerce(cfg, path, value, default))


def _targets(cfg, value):
    if value is None:
        return None
    if not isinstance(value, dict):
        raise _err(cfg, "targets", "expected a mapping 'm,s': t")
    out = {}
    for k, t in value.items():
        try:
            m, s = (int(x) for x in str(k).split(","))
        except ValueError:
            raise _err(cfg, "targets", f"bad entry key {k!r}; use 'monitor,source'") from None
        if isinstance(t, bool) or not isinstance(t, (int, float)):
            raise _err(cfg, "targets", f"target for {k} must be a number")
        out[(m, s)] = float(t)
    return out


def _validate(cfg: RunConfig):
    def positive(key, value):
        if value is None or not value > 0 or not math.isfinite(value):
            raise _err(cfg, key, f"must be positive, got {value!r}")

    if cfg.preset is not None and cfg.preset not in PRESETS:
        raise _err(cfg, "preset", f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    if not 0 <= cfg.seed <= SEED_MAX:
        raise _err(cfg, "seed", "must be a 64-bit unsigned integer")
    if cfg.device not in DEVICES:
        raise _err(cfg, "device", f"unknown device {cfg.device!r}; choose from {list(DEVICES)}")
    if cfg.objective is not None and cfg.objective not in ("mbs", "mdm", "tritter", "general"):
        raise _err(cfg, "objective", f"unknown objective {cfg.objective!r}")
    if cfg.objective == "general" and not cfg.targets:
        raise _err(cfg, "targets", "objective 'general' needs targets")
    if not cfg.wavelengths_nm:
        raise _err(cfg, "wavelengths_nm", "must be a non-empty list")
    for w in cfg.wavelengths_nm:
        positive("wavelengths_nm", w)
    for key in ("min_feature_nm", "domain_um", "design_um", "dx_nm", "pml_sigma_max"):
        positive(key, getattr(cfg, key))
    if cfg.filter_radius_nm is not None:
        positive("filter_radius_nm", cfg.filter_radius_nm)
    if cfg.iterations < 1:
        raise _err(cfg, "iterations", "total iterations must be >= 1")
    if not 0 <= cfg.levelset_iterations <= cfg.iterations:
        raise _err(cfg, "levelset_iterations", "must lie in [0, iterations]")
    if cfg.pml_thickness < 8:
        raise _err(cfg, "pml_thickness", "must be >= 8 cells")
    if not 2 <= cfg.pml_order <= 4:
        raise _err(cfg, "pml_order", "must lie in [2, 4]")
    if cfg.init_noise < 0 or cfg.init_noise >= 0.5:
        raise _err(cfg, "init_noise", "must lie in [0, 0.5)")
    if round(cfg.min_feature_nm / cfg.dx_nm) < 2:
        raise _err(cfg, "min_feature_nm", "must span at least two cells")
    if cfg.targets:
        for (m, s), t in cfg.targets.items():
            if not 0 <= t <= 1:
                raise _err(cfg, "targets", f"t{m}{s}={t} outside [0, 1]")
        for s in {s for _, s in cfg.targets}:
            total = sum(t * t for (_, ss), t in cfg.targets.items() if ss == s)
            if total > 1 + 1e-12:
                raise _err(cfg, "targets", f"targets for source {s} exceed unit power")
    if cfg.design is not None and not Path(cfg.design).exists():
        raise ParseError("referenced design file does not exist", cfg.design)
    h = cfg.hom
    if not 0 <= h.i0 <= 1:
        raise _err(cfg, "hom.i0", "must lie in [0, 1]")
    if h.eta is not None and not 0 <= h.eta <= 1:
        raise _err(cfg, "hom.eta", "must lie in [0, 1]")
    if h.kind not in ("triangular", "gaussian"):
        raise _err(cfg, "hom.kind", "must be 'triangular' or 'gaussian'")
    for key in ("width_ps", "baseline", "window_ns", "coarse_step_ps", "half_range_ps"):
        positive(f"hom.{key}", getattr(h, key))
    if h.integration_s < 0:
        raise _err(cfg, "hom.integration_s", "must be >= 0")
    if h.fine_points < 0:
        raise _err(cfg, "hom.fine_points", "must be >= 0")
    if not cfg.sweep.wavelengths_nm:
        raise _err(cfg, "sweep.wavelengths_nm", "must be a non-empty list")
    if not cfg.sweep.biases_nm:
        raise _err(cfg, "sweep.biases_nm", "must be a non-empty list")
    for w in cfg.sweep.wavelengths_nm:
        positive("sweep.wavelengths_nm", w)
    if cfg.gradient.samples < 1:
        raise _err(cfg, "gradient.samples", "must be >= 1")
    positive("gradient.step", cfg.gradient.step)
    if cfg.gradient.design_cells < 1:
        raise _err(cfg, "gradient.design_cells", "must be >= 1")


def config_from_dict(data: dict | None, source: str | None = None, lines: dict | None = None) -> RunConfig:
    data = dict(data or {})
    cfg = RunConfig(source=source)
    cfg._lines = lines or {}
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise _err(cfg, "preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _apply(cfg, cfg, dict(PRESETS[preset]))
    _apply(cfg, cfg, data)
    return cfg.validate()


def parse_config(path) -> RunConfig:
    """Read and validate a YAML run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror or exc}", path) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigurationError(f"{path}{line}: malformed YAML") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(data, str(path), _key_lines(text))


def _plain(value):
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            key = f"{k[0]},{k[1]}" if isinstance(k, tuple) else k
            out[key] = _plain(v)
        return out
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_resolved(cfg: RunConfig, out_dir, command: str, extra: dict | None = None) -> Path:
    """Echo the fully resolved config and the toolkit version into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"toolkit": "modeforge", "version": __version__, "command": command,
           "config": _plain(cfg.resolved())}
    if extra:
        doc["arguments"] = _plain(extra)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=True, default_flow_style=False))
    (out / "VERSION").write_text(f"modeforge {__version__}\n")
    return path


def default_threads() -> int:
    env = os.environ.get("MODEFORGE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"MODEFORGE_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigurationError("MODEFORGE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1
