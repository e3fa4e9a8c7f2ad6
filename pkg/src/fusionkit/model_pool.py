"""Model pools: a validated, named set of homogeneous checkpoints.

A pool holds an optional pretrained base, the models to fuse, optional
per-model statistics checkpoints (Fisher diagonals or Gram matrices), and an
optional key filter. Keys removed by the filter are not merged; they are
copied verbatim from a *carrier* model (the base if present, otherwise the
first model) so fused checkpoints stay loadable.

Models may be given as paths/:class:`CheckpointRef` objects or as in-memory
tensor maps.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .checkpoint_io import CheckpointRef, InMemoryCheckpoint, open_lazy
from .errors import (
    EmptyPool,
    InvalidPattern,
    MissingStats,
    NoBaseModel,
    PoolNotMergeable,
    UnknownModel,
    ValidationError,
    ZeroNorm,
)
from .tensor_core import TensorMap, cosine_similarity, map_sub

log = logging.getLogger(__name__)

Source = Union[CheckpointRef, Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class KeyFilter:
    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(self.include))
        object.__setattr__(self, "exclude", tuple(self.exclude))
        for p in self.include + self.exclude:
            _compile_glob(p)


def _compile_glob(pattern) -> re.Pattern:
    if not isinstance(pattern, str) or not pattern:
        raise InvalidPattern(f"key pattern must be a non-empty string, got {pattern!r}")
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")), re.DOTALL)


def apply_key_filter(keys: Iterable[str], key_filter: KeyFilter | None) -> list[str]:
    """Keep keys matching any include glob (all, if none), minus excluded ones.

    Globs support only ``*``; every other character is literal.
    """
    keys = list(keys)
    if key_filter is None:
        return keys
    include = [_compile_glob(p) for p in key_filter.include]
    exclude = [_compile_glob(p) for p in key_filter.exclude]
    if include:
        keys = [k for k in keys if any(p.fullmatch(k) for p in include)]
    return [k for k in keys if not any(p.fullmatch(k) for p in exclude)]


def _as_source(src) -> Source:
    if isinstance(src, Mapping):
        return src
    return src if isinstance(src, CheckpointRef) else CheckpointRef(src)


def open_source(src: Source):
    if isinstance(src, CheckpointRef):
        return open_lazy(src)
    return InMemoryCheckpoint(src)


@dataclass
class ModelIssues:
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    shape_conflicts: list[tuple[str, tuple, tuple]] = field(default_factory=list)
    dtype_conflicts: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.extra or self.shape_conflicts or self.dtype_conflicts)


@dataclass
class ValidationReport:
    reference: str
    models: dict[str, ModelIssues]

    @property
    def mergeable(self) -> bool:
        return all(issues.ok for issues in self.models.values())

    def describe(self) -> str:
        lines = [f"reference: {self.reference}"]
        for name, issues in self.models.items():
            if issues.ok:
                lines.append(f"  {name}: ok")
                continue
            lines.append(f"  {name}:")
            for key in issues.missing:
                lines.append(f"    missing key {key}")
            for key in issues.extra:
                lines.append(f"    extra key {key}")
            for key, want, got in issues.shape_conflicts:
                lines.append(f"    shape conflict {key}: expected {list(want)}, found {list(got)}")
            for key, want, got in issues.dtype_conflicts:
                lines.append(f"    dtype conflict {key}: expected {want}, found {got}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "mergeable": self.mergeable,
            "models": {
                name: {
                    "missing": i.missing,
                    "extra": i.extra,
                    "shape_conflicts": [[k, list(a), list(b)] for k, a, b in i.shape_conflicts],
                    "dtype_conflicts": [list(c) for c in i.dtype_conflicts],
                }
                for name, i in self.models.items()
            },
        }


class ModelPool:
    """Immutable collection of models to fuse."""

    def __init__(
        self,
        models: Mapping[str, Source] | Sequence[tuple[str, Source]],
        base: Source | None = None,
        stats: Mapping[str, Source] | None = None,
        key_filter: KeyFilter | None = None,
        carrier: str | None = None,
    ):
        items = list(models.items()) if isinstance(models, Mapping) else list(models)
        names = [n for n, _ in items]
        if any(not isinstance(n, str) or not n for n in names):
            raise ValidationError("model names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate model names in {names}")
        self._models = {n: _as_source(s) for n, s in items}
        self.base = None if base is None else _as_source(base)
        self.stats = {n: _as_source(s) for n, s in (stats or {}).items()}
        unknown = set(self.stats) - set(self._models)
        if unknown:
            raise UnknownModel(f"statistics given for unknown models {sorted(unknown)}")
        self.key_filter = key_filter
        if carrier not in (None, "base") and carrier not in self._models:
            raise UnknownModel(f"carrier {carrier!r} is not a pool model")
        if carrier == "base" and base is None:
            raise NoBaseModel("carrier 'base' requested but the pool has no base model")
        self._carrier = carrier

    @property
    def model_names(self) -> list[str]:
        return list(self._models)

    @property
    def has_base(self) -> bool:
        return self.base is not None

    def __len__(self):
        return len(self._models)

    def source(self, name: str) -> Source:
        try:
            return self._models[name]
        except KeyError:
            raise UnknownModel(f"no model named {name!r}; pool has {self.model_names}") from None

    @property
    def carrier_name(self) -> str:
        if self._carrier is not None:
            return self._carrier
        return "base" if self.has_base else self.model_names[0]

    def _carrier_source(self) -> Source:
        name = self.carrier_name
        return self.base if name == "base" else self.source(name)

    def _reference(self) -> tuple[str, Source]:
        if self.has_base:
            return "base", self.base
        if not self._models:
            raise EmptyPool("model pool is empty")
        name = self.model_names[0]
        return name, self._models[name]

    def merge_keys(self) -> list[str]:
        """Filtered key set of the structural reference, lexicographic."""
        _, src = self._reference()
        with open_source(src) as cp:
            return apply_key_filter(cp.keys(), self.key_filter)

    def validate(self) -> ValidationReport:
        return validate(self)

    def require_mergeable(self) -> None:
        report = validate(self)
        if not report.mergeable:
            raise PoolNotMergeable(report)

    def _load(self, src: Source, keys: Sequence[str] | None = None) -> TensorMap:
        with open_source(src) as cp:
            if keys is None:
                keys = apply_key_filter(cp.keys(), self.key_filter)
            return {k: cp.load_tensor(k) for k in sorted(keys)}

    def load_model(self, name: str) -> TensorMap:
        """Load the filtered keys of one model."""
        return self._load(self.source(name))

    def load_base(self) -> TensorMap:
        if self.base is None:
            raise NoBaseModel("this operation needs a pretrained base model")
        return self._load(self.base)

    def load_stats(self, name: str) -> TensorMap:
        self.source(name)
        if name not in self.stats:
            raise MissingStats(f"no statistics checkpoint for model {name!r}")
        with open_source(self.stats[name]) as cp:
            return cp.load_all()

    def carrier_keys(self) -> TensorMap:
        """Keys excluded by the filter, copied from the carrier model."""
        with open_source(self._carrier_source()) as cp:
            kept = set(apply_key_filter(cp.keys(), self.key_filter))
            return {k: cp.load_tensor(k) for k in cp.keys() if k not in kept}

    def with_output(self, merged: Mapping[str, np.ndarray]) -> TensorMap:
        """Combine merged keys with carrier pass-through keys."""
        out = dict(self.carrier_keys())
        out.update(merged)
        return dict(sorted(out.items()))

    def __repr__(self):
        return f"ModelPool(models={self.model_names}, base={'yes' if self.has_base else 'no'})"


def validate(pool: ModelPool) -> ValidationReport:
    """Compare every model's filtered header against the reference.

    Only headers are read. The reference is the base if present, else the
    first model (which is then reported against itself).
    """
    ref_name, ref_src = pool._reference()
    with open_source(ref_src) as cp:
        ref_keys = apply_key_filter(cp.keys(), pool.key_filter)
        ref_index = {k: cp.index[k] for k in ref_keys}
    report = ValidationReport(ref_name, {})
    for name in pool.model_names:
        with open_source(pool.source(name)) as cp:
            keys = apply_key_filter(cp.keys(), pool.key_filter)
            index = {k: cp.index[k] for k in keys}
        issues = ModelIssues()
        issues.missing = sorted(set(ref_index) - set(index))
        issues.extra = sorted(set(index) - set(ref_index))
        for key in sorted(set(ref_index) & set(index)):
            want, got = ref_index[key], index[key]
            if want.shape != got.shape:
                issues.shape_conflicts.append((key, want.shape, got.shape))
            if want.dtype is not got.dtype:
                issues.dtype_conflicts.append((key, want.dtype.tag, got.dtype.tag))
        report.models[name] = issues
    return report


@dataclass(frozen=True)
class TaskVector:
    name: str
    delta: TensorMap


def task_vector(pool: ModelPool, name: str, base: TensorMap | None = None) -> TaskVector:
    """``theta_name - theta_base`` over the filtered keys."""
    if not pool.has_base:
        raise NoBaseModel("task vectors need a pretrained base model")
    pool.source(name)
    pool.require_mergeable()
    if base is None:
        base = pool.load_base()
    return TaskVector(name, map_sub(pool.load_model(name), base))


def task_vectors(pool: ModelPool) -> list[TaskVector]:
    """All task vectors in pool order, loading the base once."""
    if not pool.has_base:
        raise NoBaseModel("task vectors need a pretrained base model")
    pool.require_mergeable()
    base = pool.load_base()
    return [TaskVector(n, map_sub(pool.load_model(n), base)) for n in pool.model_names]


def task_vector_cosine_matrix(pool: ModelPool) -> tuple[list[str], np.ndarray]:
    """Pairwise cosine similarity of the pool's task vectors."""
    if len(pool) == 0:
        raise EmptyPool("model pool is empty")
    tvs = task_vectors(pool)
    n = len(tvs)
    out = np.eye(n)
    for tv in tvs:
        if not any(np.any(v != 0) for v in tv.delta.values()):
            raise ZeroNorm(f"task vector of model {tv.name!r} is zero")
    for i in range(n):
        out[i, i] = cosine_similarity(tvs[i].delta, tvs[i].delta)
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine_similarity(tvs[i].delta, tvs[j].delta)
    return [tv.name for tv in tvs], out
