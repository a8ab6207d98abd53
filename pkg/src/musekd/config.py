"""JSON run configuration.

Every section maps onto a dataclass; unknown keys are rejected with their full
dotted path so typos surface immediately. The README lists every section.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .nn import BackboneSpec
from .objective import ObjectiveConfig
from .training import Schedule, TrainSettings

MODES = ("self", "online", "offline", "mi-bench", "count")


class ConfigError(ValueError):
    """A configuration document violates the schema."""


@dataclass
class DataConfig:
    format: str = "idx"  # idx | cifar | digits
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list[str] | None = None
    test_files: list[str] | None = None
    coarse: bool = False
    num_classes: int = 10
    per_class: int | None = None
    digits_dir: str | None = None

    def paths(self) -> list[str]:
        if self.format == "idx":
            return [self.train_images, self.train_labels, self.test_images, self.test_labels]
        if self.format == "cifar":
            return list(self.train_files or []) + list(self.test_files or [])
        return []


@dataclass
class TeacherConfig:
    checkpoint: str
    backbone: BackboneSpec


@dataclass
class MIBenchConfig:
    rhos: list[float] = field(default_factory=lambda: [0.0, 0.5, 0.9])
    steps: int = 500
    dim: int = 4
    batch_size: int = 256
    lr: float = 0.05
    seeds: int = 1


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class RunConfig:
    mode: str
    seed: int
    output_dir: str | None = None
    run_id: str | None = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    peer: BackboneSpec | None = None
    peer_seed: int | None = None
    teacher: TeacherConfig | None = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: Schedule = field(default_factory=Schedule)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)
    mi_bench: MIBenchConfig = field(default_factory=MIBenchConfig)

    def settings(self) -> TrainSettings:
        return dataclasses.replace(
            self.train, momentum=self.optim.momentum, weight_decay=self.optim.weight_decay
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    "backbone": BackboneSpec,
    "peer": BackboneSpec,
    "teacher": TeacherConfig,
    "objective": ObjectiveConfig,
    "schedule": Schedule,
    "optim": OptimConfig,
    "train": TrainSettings,
    "data": DataConfig,
    "mi_bench": MIBenchConfig,
}

# TrainSettings carries the optimizer knobs internally; the document keeps them under "optim"
_HIDDEN = {TrainSettings: {"momentum", "weight_decay"}}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    hidden = _HIDDEN.get(cls, set())
    names = {f.name for f in dataclasses.fields(cls)} - hidden
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in {where or 'config'}")
    kwargs = {}
    for key, value in doc.items():
        path = f"{where}.{key}" if where else key
        if key in _NESTED and cls in (RunConfig, TeacherConfig) and value is not None:
            value = _build(_NESTED[key], value, path)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _check_types(obj, where: str) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        path = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(value):
            _check_types(value, path)
            continue
        expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if value is None:
            continue
        if expected.startswith("bool") and not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        if expected.startswith("int") and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if expected.startswith("float") and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if expected.startswith("str") and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")


def config_from_dict(doc: dict, base_dir: Path | None = None, check_paths: bool = True) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("mode", "seed"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    cfg = _build(RunConfig, doc, "")
    _check_types(cfg, "")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {cfg.mode!r}")
    if cfg.data.format not in ("idx", "cifar", "digits"):
        raise ConfigError(f"data.format: expected idx, cifar or digits, got {cfg.data.format!r}")
    if cfg.run_id is None:
        cfg.run_id = cfg.mode
    if cfg.mode in ("self", "online", "offline"):
        if not cfg.output_dir:
            raise ConfigError(f"output_dir is required for mode {cfg.mode!r}")
        if cfg.mode == "offline" and cfg.teacher is None:
            raise ConfigError("offline mode needs a 'teacher' section")
    if base_dir is not None:
        _resolve_paths(cfg, base_dir)
    if check_paths and cfg.mode in ("self", "online", "offline"):
        missing = [p for p in cfg.data.paths() if p is None or not Path(p).exists()]
        if cfg.teacher is not None and cfg.mode == "offline" and not Path(cfg.teacher.checkpoint).exists():
            missing.append(cfg.teacher.checkpoint)
        if missing:
            raise ConfigError(f"referenced paths do not exist: {missing}")
    return cfg


def _resolve_paths(cfg: RunConfig, base: Path) -> None:
    def fix(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    d = cfg.data
    for name in ("train_images", "train_labels", "test_images", "test_labels", "digits_dir"):
        setattr(d, name, fix(getattr(d, name)))
    if d.train_files:
        d.train_files = [fix(p) for p in d.train_files]
    if d.test_files:
        d.test_files = [fix(p) for p in d.test_files]
    if cfg.teacher is not None:
        cfg.teacher.checkpoint = fix(cfg.teacher.checkpoint)
    cfg.output_dir = fix(cfg.output_dir)


def parse_config(path, check_paths: bool = True) -> RunConfig:
    """Load and validate a JSON run config; relative paths resolve against its directory."""
    path = Path(path)
    with path.open() as fh:  # missing file -> OSError
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc, base_dir=path.parent, check_paths=check_paths)


def fingerprint(spec: BackboneSpec) -> bytes:
    """SHA-256 of the canonical JSON of an architecture spec."""
    doc = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).digest()
