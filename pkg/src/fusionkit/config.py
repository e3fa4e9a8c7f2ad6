"""Run configuration: a strict YAML subset plus dotted ``key=value`` overrides.

A config file has up to six top-level fields::

    method:                      # algorithm + hyperparameters (MergeSpec)
      algorithm: ties_merging
      scaling: 0.3
    modelpool:
      base: base.safetensors     # optional
      models: {a: a.safetensors, b: b.safetensors}
      stats: {a: fisher_a.safetensors}     # optional
      key_filter: {exclude: ["head.*"]}    # optional
      carrier: base              # optional
    taskpool:                    # optional; list of {name, path} or name: path
      - {name: task_a, path: task_a.safetensors}
    merged_model_save_path: out/merged.safetensors
    report_save_path: out/report.json
    seed: 0

Relative paths in the file resolve against the file's directory; relative
paths given as overrides resolve against the working directory. Anchors,
aliases and merge keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import ConfigTypeError, IoError, ParseError, UnknownField
from .merge_algorithms import MergeSpec
from .model_pool import KeyFilter, ModelPool

TOP_LEVEL = ("method", "modelpool", "taskpool", "merged_model_save_path", "report_save_path", "seed")
POOL_FIELDS = ("base", "models", "stats", "key_filter", "carrier")
DEFAULTS = {"seed": 0}


@dataclass(frozen=True)
class TaskEntry:
    name: str
    path: Path


@dataclass
class PoolConfig:
    models: dict[str, Path]
    base: Path | None = None
    stats: dict[str, Path] = field(default_factory=dict)
    key_filter: KeyFilter | None = None
    carrier: str | None = None

    def build(self) -> ModelPool:
        return ModelPool(
            self.models, base=self.base, stats=self.stats, key_filter=self.key_filter, carrier=self.carrier
        )


@dataclass
class RunConfig:
    method: MergeSpec
    modelpool: PoolConfig
    taskpool: list[TaskEntry] | None = None
    merged_model_save_path: Path | None = None
    report_save_path: Path | None = None
    seed: int = 0


# --------------------------------------------------------------------------
# parsing


def _reject_anchors(text: str) -> None:
    try:
        for event in yaml.parse(text, Loader=yaml.SafeLoader):
            if isinstance(event, yaml.AliasEvent) or getattr(event, "anchor", None):
                mark = event.start_mark
                raise ParseError("anchors and aliases are not supported", mark.line + 1, mark.column + 1)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(
            f"invalid YAML: {exc.problem or exc}", mark.line + 1 if mark else None, mark.column + 1 if mark else None
        ) from None
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from None


def parse_yaml(text: str) -> Any:
    _reject_anchors(text)
    return yaml.safe_load(text)


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ParseError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ParseError(f"override key {key!r} is not a dotted path")
    try:
        value = parse_yaml(raw) if raw.strip() else None
    except ParseError as exc:
        raise ParseError(f"override {item!r}: {exc}") from None
    return parts, value


def _set_path(doc: dict, parts: Sequence[str], value: Any) -> None:
    node = doc
    for p in parts[:-1]:
        child = node.get(p)
        if not isinstance(child, dict):
            child = {}
            node[p] = child
        node = child
    node[parts[-1]] = value


def _deep_merge(dst: dict, src: Mapping) -> dict:
    for k, v in src.items():
        if isinstance(v, Mapping) and isinstance(dst.get(k), dict):
            _deep_merge(dst[k], v)
        else:
            dst[k] = copy.deepcopy(v)
    return dst


def _resolve(value: Any, root: Path) -> Any:
    if isinstance(value, str):
        p = Path(value).expanduser()
        return p if p.is_absolute() else root / p
    return value


def _resolve_paths(doc: dict, root: Path) -> None:
    """Make the known path-valued fields of a raw config absolute."""
    for key in ("merged_model_save_path", "report_save_path"):
        if key in doc:
            doc[key] = _resolve(doc[key], root)
    pool = doc.get("modelpool")
    if isinstance(pool, dict):
        if "base" in pool:
            pool["base"] = _resolve(pool["base"], root)
        for section in ("models", "stats"):
            if isinstance(pool.get(section), dict):
                pool[section] = {n: _resolve(p, root) for n, p in pool[section].items()}
    tasks = doc.get("taskpool")
    if isinstance(tasks, dict):
        doc["taskpool"] = {n: _resolve(p, root) for n, p in tasks.items()}
    elif isinstance(tasks, list):
        for entry in tasks:
            if isinstance(entry, dict) and "path" in entry:
                entry["path"] = _resolve(entry["path"], root)


# --------------------------------------------------------------------------
# typed conversion


def _type_name(value) -> str:
    return "null" if value is None else type(value).__name__


def _expect(field_name, value, types, expected):
    if isinstance(value, bool) and bool not in types:
        raise ConfigTypeError(field_name, expected, _type_name(value))
    if not isinstance(value, types):
        raise ConfigTypeError(field_name, expected, _type_name(value))
    return value


def _path(field_name, value) -> Path:
    if isinstance(value, Path):
        return value
    _expect(field_name, value, (str,), "path string")
    return Path(value)


def _path_map(field_name, value) -> dict[str, Path]:
    _expect(field_name, value, (dict,), "mapping of name to path")
    return {str(n): _path(f"{field_name}.{n}", p) for n, p in value.items()}


def _method(raw) -> MergeSpec:
    _expect("method", raw, (dict,), "mapping")
    # null unsets a parameter so an override can fall back to the default
    raw = {k: v for k, v in raw.items() if v is not None or k == "algorithm"}
    algorithm = raw.get("algorithm")
    if algorithm is None:
        raise ConfigTypeError("method.algorithm", "string", "missing")
    _expect("method.algorithm", algorithm, (str,), "string")
    known = {f.name for f in dataclasses.fields(MergeSpec)}
    for name in raw:
        if name not in known:
            raise UnknownField(f"method.{name}")
    for name, value in raw.items():
        if name == "algorithm":
            continue
        if name == "weights":
            _expect("method.weights", value, (list,), "list of numbers")
            for i, w in enumerate(value):
                _expect(f"method.weights[{i}]", w, (int, float), "number")
        else:
            _expect(f"method.{name}", value, (int, float), "number")
    spec = MergeSpec.from_dict(raw)
    spec.resolved()  # unknown algorithm / parameters fail at load time
    return spec


def _pool(raw) -> PoolConfig:
    _expect("modelpool", raw, (dict,), "mapping")
    for name in raw:
        if name not in POOL_FIELDS:
            raise UnknownField(f"modelpool.{name}")
    if "models" not in raw:
        raise ConfigTypeError("modelpool.models", "non-empty mapping", "missing")
    models = _path_map("modelpool.models", raw["models"])
    if not models:
        raise ConfigTypeError("modelpool.models", "non-empty mapping", "empty mapping")
    key_filter = None
    if raw.get("key_filter") is not None:
        kf = _expect("modelpool.key_filter", raw["key_filter"], (dict,), "mapping")
        for name in kf:
            if name not in ("include", "exclude"):
                raise UnknownField(f"modelpool.key_filter.{name}")
        for name in ("include", "exclude"):
            _expect(f"modelpool.key_filter.{name}", kf.get(name, []), (list,), "list of glob strings")
        key_filter = KeyFilter(kf.get("include", []), kf.get("exclude", []))
    carrier = raw.get("carrier")
    if carrier is not None:
        _expect("modelpool.carrier", carrier, (str,), "string")
    return PoolConfig(
        models=models,
        base=None if raw.get("base") is None else _path("modelpool.base", raw["base"]),
        stats=_path_map("modelpool.stats", raw["stats"]) if raw.get("stats") is not None else {},
        key_filter=key_filter,
        carrier=carrier,
    )


def _taskpool(raw) -> list[TaskEntry] | None:
    if raw is None:
        return None
    if isinstance(raw, dict):
        return [TaskEntry(str(n), _path(f"taskpool.{n}", p)) for n, p in raw.items()]
    _expect("taskpool", raw, (list,), "list of {name, path} entries")
    entries = []
    for i, item in enumerate(raw):
        _expect(f"taskpool[{i}]", item, (dict,), "mapping with name and path")
        for name in item:
            if name not in ("name", "path"):
                raise UnknownField(f"taskpool[{i}].{name}")
        name = _expect(f"taskpool[{i}].name", item.get("name"), (str,), "string")
        entries.append(TaskEntry(name, _path(f"taskpool[{i}].path", item.get("path"))))
    return entries


def build_config(doc: Mapping[str, Any]) -> RunConfig:
    """Type-check a raw (already merged and path-resolved) config mapping."""
    _expect("config", doc, (dict,), "mapping")
    for name in doc:
        if name not in TOP_LEVEL:
            raise UnknownField(name)
    merged = _deep_merge(copy.deepcopy(DEFAULTS), doc)
    if "method" not in merged:
        raise ConfigTypeError("method", "mapping", "missing")
    if "modelpool" not in merged:
        raise ConfigTypeError("modelpool", "mapping", "missing")
    seed = _expect("seed", merged["seed"], (int,), "non-negative integer")
    if seed < 0:
        raise ConfigTypeError("seed", "non-negative integer", str(seed))
    save = merged.get("merged_model_save_path")
    report = merged.get("report_save_path")
    return RunConfig(
        method=_method(merged["method"]),
        modelpool=_pool(merged["modelpool"]),
        taskpool=_taskpool(merged.get("taskpool")),
        merged_model_save_path=None if save is None else _path("merged_model_save_path", save),
        report_save_path=None if report is None else _path("report_save_path", report),
        seed=seed,
    )


def load_config(path, overrides: Sequence[str] = (), cwd: Path | None = None) -> RunConfig:
    """Parse a config file and apply ``key=value`` overrides last.

    Precedence: overrides > file > built-in defaults.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from None
    doc = parse_yaml(text)
    if doc is None:
        doc = {}
    _expect("config", doc, (dict,), "mapping")
    for name in doc:
        if name not in TOP_LEVEL:
            raise UnknownField(name)
    _resolve_paths(doc, path.resolve().parent)

    patch: dict = {}
    for item in overrides:
        parts, value = _parse_override(item)
        if parts[0] not in TOP_LEVEL:
            raise UnknownField(parts[0])
        _set_path(patch, parts, value)
    _resolve_paths(patch, (cwd or Path.cwd()).resolve())
    return build_config(_deep_merge(doc, patch))
