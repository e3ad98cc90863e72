"""Run configuration: one YAML file describing every stage of the pipeline,
with strict unknown-key rejection and dotted-path CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .loss import DetLossWeights, SegLossWeights
from .model import DetPathConfig, SegPathConfig
from .phantom import PhantomConfig
from .targets import TargetConfig
from .train import TrainConfig

# test datasets draw from a disjoint stream of phantom seeds
TEST_SEED_OFFSET = 1_000_000


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending key path."""


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class PhantomSection:
    n_train: int = 20
    n_test: int = 5
    config: PhantomConfig = PhantomConfig()

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass(frozen=True)
class ModelSection:
    atf_enabled: bool = True
    seg: SegPathConfig = SegPathConfig()
    det: DetPathConfig = DetPathConfig()

    def __post_init__(self):
        # the ablation flag lives at model level; mirror it into the det config
        object.__setattr__(self, "det",
                           dataclasses.replace(self.det, atf_enabled=self.atf_enabled))


@dataclass(frozen=True)
class LossSection:
    seg: SegLossWeights = SegLossWeights()
    det: DetLossWeights = DetLossWeights()


@dataclass(frozen=True)
class InferSection:
    threshold: float = 0.3
    nms_iou: float = 0.25
    overlap: tuple[int, int, int] = (15, 15, 15)
    avf_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")
        if isinstance(self.overlap, int):
            object.__setattr__(self, "overlap", (self.overlap,) * 3)
        if len(self.overlap) != 3 or any(o < 0 for o in self.overlap):
            raise ValueError(f"overlap must be a non-negative triple, got {self.overlap}")


@dataclass(frozen=True)
class EvalSection:
    fp_levels: tuple[float, ...] = (2.0, 3.0, 4.0)

    def __post_init__(self):
        if not self.fp_levels or any(f < 0 for f in self.fp_levels):
            raise ValueError("fp_levels must be non-empty and non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    phantom: PhantomSection = PhantomSection()
    targets: TargetConfig = TargetConfig()
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    train: TrainConfig = TrainConfig()
    infer: InferSection = InferSection()
    eval: EvalSection = EvalSection()

    def __post_init__(self):
        # one seed rules all stages; the train section inherits it
        object.__setattr__(self, "train",
                           dataclasses.replace(self.train, seed=self.seed))


# keys callers must set at a different level, with the path to use instead
_REDIRECTED = {
    "train.seed": "seed",
    "model.det.atf_enabled": "model.atf_enabled",
}

def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = getattr(hint, "__origin__", None)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _build(dc_type, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(dc_type)
    names = {f.name for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        child = f"{path}.{key}" if path else key
        if child in _REDIRECTED:
            raise ConfigError(f"{child}: set {_REDIRECTED[child]} instead")
        if key not in names:
            raise ConfigError(f"unknown config key {child!r}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[key] = _build(hint, value, child)
        else:
            kwargs[key] = _coerce(value, hint, child)
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_overrides(pairs: list[str]) -> dict:
    """`a.b.c=value` strings -> nested dict; values parsed as YAML scalars."""
    tree: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key.path=value")
        key, raw = pair.split("=", 1)
        _set_dotted(tree, key.strip(), yaml.safe_load(raw))
    return tree


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read the YAML config (all keys optional), apply dotted overrides,
    validate strictly."""
    tree: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = loaded
    if overrides:
        tree = _merge(tree, parse_overrides(list(overrides)))
    return _build(RunConfig, tree, "")


def config_to_dict(config) -> dict:
    """Resolved config as plain primitives (tuples become lists), suitable
    for provenance blocks and reloadable via load_config."""
    def convert(v):
        if dataclasses.is_dataclass(v) and not isinstance(v, type):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v
    out = convert(config)
    if isinstance(config, RunConfig):
        # derived keys are rejected on load; post_init restores them
        del out["train"]["seed"]
        del out["model"]["det"]["atf_enabled"]
    return out
