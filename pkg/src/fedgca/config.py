"""Experiment configuration: flat key/value schema, presets and validation.

Config files are flat JSON objects whose keys are the field names of
:class:`ExperimentConfig`. ``key=value`` overrides are applied last; values
are parsed as JSON when possible, and list-valued keys also accept
comma-separated strings.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from fedgca.classifier import ClassifierSpec
from fedgca.style_complement import AugmentConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationSpec:
    """Which consistency ingredients are on: P, P^G, M, M^G."""

    use_local_pred: bool = True
    use_global_pred: bool = True
    use_local_cam: bool = True
    use_global_cam: bool = True

    def __post_init__(self):
        if self.use_global_pred and not self.use_local_pred:
            raise ConfigError("ablation: use_global_pred requires use_local_pred")
        if self.use_global_cam and not self.use_local_cam:
            raise ConfigError("ablation: use_global_cam requires use_local_cam")
        if self.use_local_cam and not self.use_local_pred:
            raise ConfigError("ablation: use_local_cam requires use_local_pred")

    @property
    def any(self) -> bool:
        return self.use_local_pred

    @property
    def label(self) -> str:
        marks = [self.use_local_pred, self.use_global_pred, self.use_local_cam, self.use_global_cam]
        names = ["P", "PG", "M", "MG"]
        on = [n for n, m in zip(names, marks) if m]
        return "+".join(on) if on else "none"

    @classmethod
    def from_flags(cls, flags: str) -> "AblationSpec":
        """Parse a 4-character flag string such as ``"1100"`` (P, P^G, M, M^G)."""
        if len(flags) != 4 or set(flags) - {"0", "1"}:
            raise ConfigError(f"ablation flags must be four 0/1 characters, got {flags!r}")
        return cls(*(c == "1" for c in flags))


# Rows of the four-factor ablation table, top to bottom.
ABLATION_GRID = [AblationSpec.from_flags(f) for f in ("0000", "1000", "1100", "1110", "1111")]

PRESETS: dict[str, dict[str, typing.Any]] = {
    "fedavg": {"alpha": 0.0, "beta": 0.0, "J": 0},
    "fedavg_rc": {"alpha": 0.0, "beta": 0.0, "J": 2},
    "feddyn": {"alpha": None, "beta": 0.0, "J": 0},
    "feddyn_rc": {"alpha": None, "beta": 0.0, "J": 2},
    "fedgca": {"alpha": None, "beta": None, "J": 2},
}

# alpha/beta that peaked in the sensitivity sweeps, per benchmark family
BENCHMARKS: dict[str, dict[str, typing.Any]] = {
    "digits": {"alpha": 0.1, "beta": 0.1, "class_count": 10, "input_shape": (3, 28, 28)},
    "pacs": {"alpha": 10.0, "beta": 8.0, "class_count": 7, "input_shape": (3, 64, 64)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "fedgca"
    benchmark: str = "digits"
    run_id: str = ""
    source_domain: str = "mnist[0:10000]"
    target_domains: tuple[str, ...] = ("colorshift:0:mnist[10000:12000]",)
    K: int = 10
    T: int = 50
    I: int = 2
    eta: float = 0.05
    alpha: float = 0.1
    beta: float = 0.1
    J: int = 2
    batch_size: int = 64
    dirichlet_concentration: float = 0.3
    master_seed: int = 0
    # ablation flags
    use_local_pred: bool = True
    use_global_pred: bool = True
    use_local_cam: bool = True
    use_global_cam: bool = True
    # classifier
    input_shape: tuple[int, ...] = (3, 28, 28)
    conv_channels: tuple[int, ...] = (32, 64, 128)
    class_count: int = 10
    # augmentation
    kernel_sizes: tuple[int, ...] = (1, 3, 5, 7)
    mixing_weight_range: tuple[float, ...] = (0.0, 1.0)
    corruption_scales: tuple[int, ...] = (1, 2, 4)
    factor_range: tuple[float, ...] = (0.7, 1.3)
    op_probabilities: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    # objective / aggregation knobs
    weighted_aggregation: bool = False
    cp_form: str = "bce"
    cam_norm: str = "softmax"
    cam_temperature: float = 1.0
    # bookkeeping
    eval_every: int = 5
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        validate(self)

    @property
    def ablation(self) -> AblationSpec:
        return AblationSpec(self.use_local_pred, self.use_global_pred, self.use_local_cam, self.use_global_cam)

    @property
    def classifier_spec(self) -> ClassifierSpec:
        return ClassifierSpec(tuple(self.input_shape), tuple(self.conv_channels), self.class_count)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(
            J=self.J,
            kernel_sizes=tuple(self.kernel_sizes),
            mixing_weight_range=tuple(self.mixing_weight_range),
            corruption_scales=tuple(self.corruption_scales),
            factor_range=tuple(self.factor_range),
            op_probabilities=tuple(self.op_probabilities),
        )

    def with_ablation(self, spec: AblationSpec) -> "ExperimentConfig":
        changes = dataclasses.asdict(spec)
        if not spec.any:
            changes.update(beta=0.0, J=0)
        return dataclasses.replace(self, preset="custom", **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, value):
    hint = _HINTS[key]
    try:
        if hint is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)) and value in (0, 1):
                return bool(value)
            raise ValueError(value)
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if hint is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        # tuple[...] fields
        (elem, _) = typing.get_args(hint)
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ValueError(value)
        if elem is str:
            return tuple(str(v) for v in value)
        return tuple(_coerce_scalar(elem, v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(hint, '__name__', hint)}") from exc


def _coerce_scalar(elem, v):
    if elem is int:
        if isinstance(v, float) and not v.is_integer():
            raise ValueError(v)
        return int(v)
    return float(v)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def validate(cfg: ExperimentConfig) -> None:
    if cfg.preset not in PRESETS and cfg.preset != "custom":
        raise ConfigError(f"preset: unknown preset {cfg.preset!r}")
    if cfg.benchmark not in BENCHMARKS:
        raise ConfigError(f"benchmark: unknown benchmark {cfg.benchmark!r}")
    for key in ("K", "batch_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be >= 1")
    for key in ("T", "I", "J", "master_seed", "eval_every", "checkpoint_every"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be >= 0")
    for key in ("eta", "dirichlet_concentration", "cam_temperature"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key}: must be positive")
    for key in ("alpha", "beta"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be non-negative")
    if cfg.cp_form not in ("bce", "kl"):
        raise ConfigError(f"cp_form: expected 'bce' or 'kl', got {cfg.cp_form!r}")
    if cfg.cam_norm not in ("softmax", "minmax"):
        raise ConfigError(f"cam_norm: expected 'softmax' or 'minmax', got {cfg.cam_norm!r}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype: expected float32 or float64, got {cfg.dtype!r}")
    if len(cfg.input_shape) != 3:
        raise ConfigError("input_shape: expected (channels, height, width)")
    if not cfg.target_domains:
        raise ConfigError("target_domains: at least one target domain is required")
    try:
        cfg.ablation
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None
    try:
        cfg.classifier_spec
        cfg.augment
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _check_preset(cfg)


def _check_preset(cfg: ExperimentConfig) -> None:
    p = cfg.preset
    if p == "custom":
        return
    if p in ("fedavg", "fedavg_rc") and (cfg.alpha != 0 or cfg.beta != 0):
        raise ConfigError(f"preset {p} requires alpha=0 and beta=0 (got alpha={cfg.alpha}, beta={cfg.beta})")
    if p in ("fedavg", "feddyn") and cfg.J != 0:
        raise ConfigError(f"J: preset {p} requires J=0, got {cfg.J}")
    if p in ("fedavg_rc", "feddyn_rc", "fedgca") and cfg.J <= 0:
        raise ConfigError(f"J: preset {p} requires J>0, got {cfg.J}")
    if p in ("feddyn", "feddyn_rc") and cfg.beta != 0:
        raise ConfigError(f"beta: preset {p} requires beta=0, got {cfg.beta}")
    if p in ("feddyn", "feddyn_rc", "fedgca") and cfg.alpha <= 0:
        raise ConfigError(f"alpha: preset {p} requires alpha>0, got {cfg.alpha}")
    if p == "fedgca" and cfg.beta <= 0:
        raise ConfigError(f"beta: preset fedgca requires beta>0, got {cfg.beta}")


def build_config(values: dict) -> ExperimentConfig:
    """Coerce a flat mapping, expand preset/benchmark defaults and validate."""
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    explicit = {k: _coerce(k, v) for k, v in values.items()}
    preset = explicit.get("preset", _FIELDS["preset"].default)
    bench = explicit.get("benchmark", _FIELDS["benchmark"].default)
    if preset not in PRESETS and preset != "custom":
        raise ConfigError(f"preset: unknown preset {preset!r}")
    if bench not in BENCHMARKS:
        raise ConfigError(f"benchmark: unknown benchmark {bench!r}")
    expanded = dict(BENCHMARKS[bench])
    for key, val in PRESETS.get(preset, {}).items():
        expanded[key] = BENCHMARKS[bench][key] if val is None else val
    merged = {**expanded, **explicit}
    return ExperimentConfig(**merged)


def parse_overrides(overrides) -> dict:
    out = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw.strip())
    return out


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not a JSON object ({exc})") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: config must be a flat JSON object")
            values.update(doc)
    values.update(parse_overrides(overrides))
    return build_config(values)


def config_keys() -> list[str]:
    return list(_FIELDS)
