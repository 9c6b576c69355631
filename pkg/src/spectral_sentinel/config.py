"""YAML run configuration.

A config file has up to six top-level sections::

    experiment:   # ExperimentConfig scalars (n and rounds are required)
    aggregator:   # AggregatorSpec fields
    detector:     # DetectorConfig fields
    attack:       # AttackSpec fields
    sweep:        # phase-sweep axes
    grid:         # attack/aggregator lists for the comparison grid

Unknown keys are errors. Errors carry the dotted field path and, when the
key exists in the file, its line number.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .aggregators import AggKind, AggregatorSpec
from .attacks import AttackKind, AttackSpec, GRID_ATTACKS
from .detector import DetectorConfig
from .errors import InvalidInput
from .sim import GRID_AGGREGATORS, PHASE_GRID, ExperimentConfig


class ConfigError(InvalidInput):
    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = f"line {line}, " if line is not None else ""
        super().__init__(f"{where}field '{path}': {message}")


@dataclass(frozen=True)
class SweepConfig:
    points: tuple[float, ...] = PHASE_GRID
    seeds: int = 200
    n: int = 512
    d: int = 2048
    f: float = 0.4
    bias: float = 0.5


@dataclass(frozen=True)
class GridConfig:
    attacks: tuple[str, ...] = tuple(a.value for a in GRID_ATTACKS)
    aggregators: tuple[str, ...] = tuple(a.value for a in GRID_AGGREGATORS)
    seeds: int = 2


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    sweep: SweepConfig = field(default_factory=SweepConfig)
    grid: GridConfig = field(default_factory=GridConfig)


SECTIONS = ("experiment", "aggregator", "detector", "attack", "sweep", "grid")
REQUIRED = {"experiment": ("n", "rounds")}
_NESTED = {"aggregator", "attack", "detector"}


def _lines(text: str) -> dict[tuple[str, ...], int]:
    """Map key paths to 1-based line numbers using the YAML node tree."""
    out: dict[tuple[str, ...], int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = prefix + (str(k.value),)
                out[key] = k.start_mark.line + 1
                walk(v, key)
    if root is not None:
        walk(root, ())
    return out


def _build(cls, data: dict, path: str, lines, extra: dict | None = None):
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}", "unknown field", lines.get(tuple(path.split(".")) + (k,)))
    kw = dict(data)
    for k, v in list(kw.items()):
        if isinstance(v, list):
            kw[k] = tuple(v)
    if extra:
        kw.update(extra)
    try:
        return cls(**kw)
    except InvalidInput as exc:
        raise ConfigError(path, str(exc), lines.get(tuple(path.split(".")))) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc), lines.get(tuple(path.split(".")))) from exc


def parse_config(text: str) -> RunConfig:
    lines = _lines(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<file>", f"YAML syntax error: {exc}",
                          mark.line + 1 if mark is not None else None) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    for k in raw:
        if k not in SECTIONS:
            raise ConfigError(str(k), "unknown section", lines.get((str(k),)))
    for sec, keys in REQUIRED.items():
        body = raw.get(sec)
        if not isinstance(body, dict):
            raise ConfigError(sec, "missing required section", lines.get((sec,)))
        for k in keys:
            if k not in body:
                raise ConfigError(f"{sec}.{k}", "missing required field", lines.get((sec,)))
    for sec in SECTIONS:
        if sec in raw and raw[sec] is not None and not isinstance(raw[sec], dict):
            raise ConfigError(sec, "must be a mapping", lines.get((sec,)))
    sec = {k: dict(raw.get(k) or {}) for k in SECTIONS}
    det = _build(DetectorConfig, sec["detector"], "detector", lines)
    agg = _build(AggregatorSpec, sec["aggregator"], "aggregator", lines, {"detector": det})
    atk = _build(AttackSpec, sec["attack"], "attack", lines)
    exp_keys = sec["experiment"]
    for k in exp_keys:
        if k in _NESTED:
            raise ConfigError(f"experiment.{k}", f"use the top-level '{k}' section",
                              lines.get(("experiment", k)))
    exp = _build(ExperimentConfig, exp_keys, "experiment", lines,
                 {"aggregator": agg, "attack": atk})
    sweep = _build(SweepConfig, sec["sweep"], "sweep", lines)
    grid = _build(GridConfig, sec["grid"], "grid", lines)
    for a in grid.attacks:
        try:
            AttackKind(a)
        except ValueError:
            raise ConfigError("grid.attacks", f"unknown attack {a!r}", lines.get(("grid", "attacks")))
    for a in grid.aggregators:
        try:
            AggKind(a)
        except ValueError:
            raise ConfigError("grid.aggregators", f"unknown aggregator {a!r}",
                              lines.get(("grid", "aggregators")))
    return RunConfig(exp, sweep, grid)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def _plain(x: Any) -> Any:
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in fields(x)}
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


def to_dict(rc: RunConfig) -> dict:
    """Inverse of parse_config: the same six-section layout."""
    exp = _plain(rc.experiment)
    agg = exp.pop("aggregator")
    det = agg.pop("detector")
    atk = exp.pop("attack")
    return {"experiment": exp, "aggregator": agg, "detector": det, "attack": atk,
            "sweep": _plain(rc.sweep), "grid": _plain(rc.grid)}


def dump_config(rc: RunConfig) -> str:
    return yaml.safe_dump(to_dict(rc), sort_keys=True)


def config_hash(rc: RunConfig) -> str:
    """SHA-256 of the canonical JSON form; stable under re-serialization."""
    blob = json.dumps(to_dict(rc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
