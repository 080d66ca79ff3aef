"""RunConfig: one JSON document holding model, training, data, eval and path settings.

Unknown keys are rejected with the dotted key name; the fully resolved
document (defaults included) is written next to every run's outputs.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .model import DetectorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad configuration: unknown key, bad value or unreadable file."""


@dataclass
class DataSection:
    seed: int = 0
    count: int = 500
    eval_seed: int = 1
    eval_count: int = 100
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalSection:
    nms_iou: float = 0.6
    top_k: int = 100
    score_thr: float = 0.5      # duplicate-rate confidence cut

    def __post_init__(self):
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class PathsSection:
    train_data: str | None = None   # directory from gen-data; None means generate in memory
    eval_data: str | None = None
    out: str = "runs/default"


@dataclass
class RunConfig:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        data = asdict(self.data)
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": data,
                "eval": asdict(self.eval), "paths": asdict(self.paths)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.json"
        path.write_text(self.to_json() + "\n")
        return path


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, tuple):
        return isinstance(value, (list, tuple))
    return True


def _check_keys(d, cls, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section '{prefix}' must be an object, got {type(d).__name__}")
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in d.items():
        if key not in defaults:
            where = key if prefix == "config" else f"{prefix}.{key}"
            raise ConfigError(f"unknown config key '{where}'")
        if not _type_ok(defaults[key], value):
            raise ConfigError(f"config key '{prefix}.{key}' has the wrong type: {value!r}")


def _build(factory, d: dict, prefix: str):
    try:
        return factory(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value in '{prefix}': {e}") from e


def from_dict(doc: dict) -> RunConfig:
    """Strict construction; every section is optional."""
    _check_keys(doc, RunConfig, "config")
    model = dict(doc.get("model", {}))
    _check_keys(model, DetectorConfig, "model")
    train = dict(doc.get("train", {}))
    _check_keys(train, TrainConfig, "train")
    data = dict(doc.get("data", {}))
    _check_keys(data, DataSection, "data")
    synth = dict(data.pop("synth", {}))
    _check_keys(synth, SynthConfig, "data.synth")
    ev = dict(doc.get("eval", {}))
    _check_keys(ev, EvalSection, "eval")
    paths = dict(doc.get("paths", {}))
    _check_keys(paths, PathsSection, "paths")
    return RunConfig(
        model=_build(DetectorConfig, model, "model"),
        train=_build(lambda **kw: TrainConfig.from_dict(kw), train, "train"),
        data=_build(DataSection, {**data, "synth": _build(SynthConfig, synth, "data.synth")}, "data"),
        eval=_build(EvalSection, ev, "eval"),
        paths=_build(PathsSection, paths, "paths"),
    )


def parse_value(text: str):
    """JSON if it parses, else the raw string (so ``paths.out=runs/a`` works)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` (or ``data.synth.key=value``) in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key {dotted!r} must name a section and a key")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override key {dotted!r} descends into a non-object")
    node[parts[-1]] = parse_value(raw)


def load(path=None, overrides=()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for item in overrides:
        apply_override(doc, item)
    return from_dict(doc)
