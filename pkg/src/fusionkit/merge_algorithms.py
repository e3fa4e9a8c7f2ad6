"""Parameter-space fusion algorithms.

Every algorithm takes a :class:`~fusionkit.model_pool.ModelPool` and returns
a full tensor map: merged values for the pool's filtered keys plus the
carrier's pass-through keys. :func:`merge` dispatches on a
:class:`MergeSpec` and also returns a :class:`MergeReport`.

Arithmetic is carried out in float64 and each key is stored back in the
dtype of the reference model (base if present, else the first model).
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DivisionByZero,
    EmptyPool,
    GramShapeMismatch,
    InvalidParameter,
    InvalidSparsity,
    InvalidTrimFraction,
    LengthMismatch,
    MissingStats,
    NegativeFisher,
    NegativeWeight,
    NoBaseModel,
    ShapeMismatch,
    SingularSystem,
    UnexpectedParameter,
    UnknownAlgorithm,
    ValidationError,
    ZeroWeightSum,
)
from .model_pool import ModelPool, open_source
from .tensor_core import DType, TensorMap, cast, svd_2d, widen

log = logging.getLogger(__name__)

DEFAULT_SCALING = 0.3
DEFAULT_TRIM_FRACTION = 0.2
DEFAULT_TALL_SCALING = 0.4
DEFAULT_FISHER_EPSILON = 1e-8
DEFAULT_GRAM_REGULARIZER = 0.9
REGMEAN_RESIDUAL_TOL = 1e-5

MaskSet = dict  # model name -> TensorMap of uint8 {0, 1}


# --------------------------------------------------------------------------
# spec and report


@dataclass(frozen=True)
class MergeSpec:
    """Algorithm name plus its static hyperparameters.

    Unset fields are ``None``; :func:`merge` fills in defaults and rejects
    fields the chosen algorithm does not use.
    """

    algorithm: str
    scaling: float | None = None
    weights: tuple[float, ...] | None = None
    trim_fraction: float | None = None
    epsilon: float | None = None
    gram_regularizer: float | None = None
    sparsity: float | None = None

    def __post_init__(self):
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MergeSpec":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise UnexpectedParameter(f"unknown method parameter(s) {unknown}")
        if "algorithm" not in d:
            raise UnexpectedParameter("method.algorithm is required")
        return cls(**d)

    def set_fields(self) -> dict[str, Any]:
        return {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name != "algorithm" and getattr(self, f.name) is not None
        }

    def resolved(self) -> dict[str, Any]:
        """Parameters the algorithm will run with, defaults filled in."""
        algo = get_algorithm(self.algorithm)
        given = self.set_fields()
        extra = sorted(set(given) - set(algo.params))
        if extra:
            raise UnexpectedParameter(
                f"{self.algorithm} does not take parameter(s) {extra}; accepts {sorted(algo.params)}"
            )
        params = {}
        for name, default in algo.params.items():
            if name in given:
                params[name] = given[name]
            elif default is REQUIRED:
                raise UnexpectedParameter(f"{self.algorithm} requires parameter {name!r}")
            else:
                params[name] = default
        return params


@dataclass
class MergeReport:
    algorithm: str
    parameters: dict[str, Any]
    models: list[str]
    fallbacks: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.parameters.items()}
        return {
            "algorithm": self.algorithm,
            "fallbacks": list(self.fallbacks),
            "models": list(self.models),
            "parameters": dict(sorted(params.items())),
            "seconds": self.seconds,
        }


@dataclass
class MergeResult:
    model: TensorMap
    report: MergeReport
    masks: MaskSet | None = None


@dataclass
class _Outcome:
    merged: TensorMap
    masks: MaskSet | None = None
    fallbacks: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# shared helpers


def _check_finite(name, value) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidParameter(f"{name} must be finite, got {value}")
    return value


def _count(fraction: float, n: int) -> float:
    # snap k*n to 6 decimals so e.g. 0.7 * 10 counts as 7, not 7.000000000000001
    return round(fraction * n, 6)


def _reference_dtypes(pool: ModelPool) -> dict[str, DType]:
    src = pool.base if pool.has_base else pool.source(pool.model_names[0])
    with open_source(src) as cp:
        return {k: cp.index[k].dtype for k in pool.merge_keys()}


def _prepare(pool: ModelPool, need_base: bool) -> None:
    if need_base and not pool.has_base:
        raise NoBaseModel("this algorithm needs a pretrained base model")
    if len(pool) == 0:
        raise EmptyPool("model pool is empty")
    pool.require_mergeable()


def _task_vectors_f64(pool: ModelPool) -> tuple[dict[str, np.ndarray], list[dict[str, np.ndarray]]]:
    """Base and per-model task vectors, all widened to float64."""
    base = {k: widen(v) for k, v in pool.load_base().items()}
    taus = []
    for name in pool.model_names:
        model = pool.load_model(name)
        taus.append({k: widen(model[k]) - base[k] for k in base})
    return base, taus


def _sum_in_order(arrays: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(arrays[0], dtype=np.float64)
    for a in arrays:
        acc = acc + a
    return acc


def _store(values: Mapping[str, np.ndarray], dtypes: Mapping[str, DType]) -> TensorMap:
    return {k: cast(values[k], dtypes[k]) for k in sorted(values)}


def _normalized_weights(weights: Sequence[float], n: int) -> list[float]:
    if len(weights) != n:
        raise LengthMismatch(f"got {len(weights)} weights for {n} models")
    w = [float(x) for x in weights]
    for x in w:
        if not math.isfinite(x):
            raise InvalidParameter(f"weights must be finite, got {x}")
        if x < 0:
            raise NegativeWeight(f"weights must be non-negative, got {x}")
    total = math.fsum(w)
    if total <= 0:
        raise ZeroWeightSum("weights sum to zero")
    return [x / total for x in w]


# --------------------------------------------------------------------------
# averaging family


def _simple_average(pool: ModelPool) -> _Outcome:
    _prepare(pool, need_base=False)
    dtypes = _reference_dtypes(pool)
    acc = None
    for name in pool.model_names:
        model = pool.load_model(name)
        if acc is None:
            acc = {k: widen(model[k]) for k in dtypes}
        else:
            for k in dtypes:
                acc[k] = acc[k] + widen(model[k])
    n = len(pool)
    return _Outcome(_store({k: v / n for k, v in acc.items()}, dtypes))


def _weighted_average(pool: ModelPool, weights: Sequence[float]) -> _Outcome:
    _prepare(pool, need_base=False)
    coeffs = _normalized_weights(weights, len(pool))
    if len(set(coeffs)) == 1:
        # equal weights are exactly the unweighted mean
        return _simple_average(pool)
    dtypes = _reference_dtypes(pool)
    acc = {k: 0.0 for k in dtypes}
    for c, name in zip(coeffs, pool.model_names):
        model = pool.load_model(name)
        for k in dtypes:
            acc[k] = acc[k] + c * widen(model[k])
    return _Outcome(_store(acc, dtypes))


def _fisher_merging(pool: ModelPool, epsilon: float) -> _Outcome:
    epsilon = _check_finite("epsilon", epsilon)
    if epsilon < 0:
        raise InvalidParameter(f"epsilon must be non-negative, got {epsilon}")
    _prepare(pool, need_base=False)
    dtypes = _reference_dtypes(pool)
    num = {k: 0.0 for k in dtypes}
    den = {k: 0.0 for k in dtypes}
    for name in pool.model_names:
        model = pool.load_model(name)
        fisher = pool.load_stats(name)
        for k in dtypes:
            if k not in fisher:
                raise MissingStats(f"Fisher statistics of model {name!r} lack key {k!r}")
            f = widen(fisher[k])
            if f.shape != model[k].shape:
                raise ShapeMismatch(k, model[k].shape, f.shape)
            if np.any(~(f >= 0)):
                raise NegativeFisher(f"Fisher diagonal of {name!r} has negative or NaN entries at {k!r}")
            weight = f + epsilon
            num[k] = num[k] + weight * widen(model[k])
            den[k] = den[k] + weight
    out = {}
    for k in dtypes:
        if np.any(den[k] == 0):
            raise DivisionByZero(f"all Fisher weights are zero somewhere in {k!r}; use epsilon > 0")
        out[k] = num[k] / den[k]
    return _Outcome(_store(out, dtypes))


def _regmean(pool: ModelPool, gram_regularizer: float) -> _Outcome:
    alpha = _check_finite("gram_regularizer", gram_regularizer)
    if not 0 <= alpha <= 1:
        raise InvalidParameter(f"gram_regularizer must lie in [0, 1], got {alpha}")
    _prepare(pool, need_base=False)
    dtypes = _reference_dtypes(pool)
    models = [pool.load_model(n) for n in pool.model_names]
    grams = [pool.load_stats(n) for n in pool.model_names]
    out, fallbacks = {}, []
    for k in dtypes:
        ws = [widen(m[k]) for m in models]
        has = [k in g for g in grams]
        if ws[0].ndim != 2 or not any(has):
            out[k] = _sum_in_order(ws) / len(ws)
            fallbacks.append(k)
            continue
        if not all(has):
            missing = [n for n, h in zip(pool.model_names, has) if not h]
            raise MissingStats(f"Gram matrix for {k!r} missing from models {missing}")
        _, cols = ws[0].shape
        lhs = np.zeros((cols, cols))
        rhs = np.zeros((cols, ws[0].shape[0]))
        for name, g, w in zip(pool.model_names, grams, ws):
            gram = widen(g[k])
            if gram.shape != (cols, cols):
                raise GramShapeMismatch(
                    f"{name!r}: Gram for {k!r} has shape {gram.shape}, expected {(cols, cols)}"
                )
            reg = alpha * gram + (1 - alpha) * np.diag(np.diag(gram))
            lhs += reg
            rhs += reg @ w.T
        out[k] = _solve_regmean(k, lhs, rhs).T
    if fallbacks:
        log.info("regmean: %d key(s) averaged without Gram statistics", len(fallbacks))
    return _Outcome(_store(out, dtypes), fallbacks=fallbacks)


def _solve_regmean(key: str, lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem(f"regularized Gram system for {key!r} is singular") from None
    residual = np.linalg.norm(lhs @ sol - rhs)
    if not np.all(np.isfinite(sol)) or residual > REGMEAN_RESIDUAL_TOL * max(1.0, np.linalg.norm(rhs)):
        raise SingularSystem(f"regularized Gram system for {key!r} is numerically singular")
    return sol


# --------------------------------------------------------------------------
# task-vector family


def _task_arithmetic(pool: ModelPool, scaling: float) -> _Outcome:
    lam = _check_finite("scaling", scaling)
    _prepare(pool, need_base=True)
    dtypes = _reference_dtypes(pool)
    base, taus = _task_vectors_f64(pool)
    out = {k: base[k] + lam * _sum_in_order([t[k] for t in taus]) for k in base}
    return _Outcome(_store(out, dtypes))


def _ties_merging(pool: ModelPool, scaling: float, trim_fraction: float) -> _Outcome:
    lam = _check_finite("scaling", scaling)
    k_frac = float(trim_fraction)
    if not (0 < k_frac <= 1):
        raise InvalidTrimFraction(f"trim_fraction must lie in (0, 1], got {trim_fraction}")
    _prepare(pool, need_base=True)
    dtypes = _reference_dtypes(pool)
    base, taus = _task_vectors_f64(pool)
    keys = sorted(base)
    flat = [np.concatenate([t[k].ravel() for k in keys]) if keys else np.zeros(0) for t in taus]
    merged = ties_merge_flat(flat, k_frac)

    out, offset = {}, 0
    for k in keys:
        n = base[k].size
        out[k] = base[k] + lam * merged[offset : offset + n].reshape(base[k].shape)
        offset += n
    return _Outcome(_store(out, dtypes))


def ties_merge_flat(flat_taus: Sequence[np.ndarray], trim_fraction: float) -> np.ndarray:
    """Trim, elect sign, and disjoint-merge flattened task vectors.

    Each vector keeps its top ``ceil(k*d)`` entries by magnitude (ties keep
    the lower index). The elected sign per coordinate is the sign of the sum
    of trimmed values, ``+`` on a zero sum. The merged value is the mean of
    trimmed entries whose sign strictly agrees with it, or 0 if none do.
    """
    d = flat_taus[0].size
    keep = min(d, math.ceil(_count(trim_fraction, d)))
    trimmed = []
    for tau in flat_taus:
        order = np.argsort(-np.abs(tau), kind="stable")
        t = np.zeros_like(tau)
        t[order[:keep]] = tau[order[:keep]]
        trimmed.append(t)

    elected = np.where(_sum_in_order(trimmed) >= 0, 1.0, -1.0)
    total = np.zeros(d)
    count = np.zeros(d)
    for t in trimmed:
        agree = np.sign(t) == elected
        total = total + np.where(agree, t, 0.0)
        count = count + agree
    return np.divide(total, count, out=np.zeros(d), where=count > 0)


def _tall_mask(pool: ModelPool, scaling: float) -> _Outcome:
    lam = _check_finite("scaling", scaling)
    _prepare(pool, need_base=True)
    dtypes = _reference_dtypes(pool)
    base, taus = _task_vectors_f64(pool)
    mtl = {k: _sum_in_order([t[k] for t in taus]) for k in base}
    masks = {}
    for name, tau in zip(pool.model_names, taus):
        masks[name] = {
            k: (np.abs(tau[k]) >= lam * np.abs(mtl[k] - tau[k])).astype(np.uint8) for k in sorted(base)
        }
    out = {k: base[k] + mtl[k] for k in base}
    return _Outcome(_store(out, dtypes), masks=masks)


def _isotropic_merge(pool: ModelPool) -> _Outcome:
    _prepare(pool, need_base=True)
    dtypes = _reference_dtypes(pool)
    base, taus = _task_vectors_f64(pool)
    n = len(taus)
    out = {}
    for k in base:
        delta = _sum_in_order([t[k] for t in taus])
        if delta.ndim == 2 and delta.size:
            u, s, vt = svd_2d(delta)
            out[k] = base[k] + s.mean() * (u @ vt)
        else:
            out[k] = base[k] + delta / n
    return _Outcome(_store(out, dtypes))


# --------------------------------------------------------------------------
# pruning


def magnitude_prune(m: Mapping[str, np.ndarray], sparsity: float) -> TensorMap:
    """Zero the ``floor(s * numel)`` smallest-magnitude entries of each tensor.

    Ties prune the lower flat index first; surviving values are untouched.
    """
    s = float(sparsity)
    if not (0 <= s < 1):
        raise InvalidSparsity(f"sparsity must lie in [0, 1), got {sparsity}")
    out = {}
    for k in sorted(m):
        arr = np.asarray(m[k])
        pruned = arr.copy()
        n_prune = math.floor(_count(s, arr.size))
        if n_prune:
            order = np.argsort(np.abs(widen(arr)).ravel(), kind="stable")
            pruned.reshape(-1)[order[:n_prune]] = 0
        out[k] = pruned
    return out


def _magnitude_prune_pool(pool: ModelPool, sparsity: float) -> _Outcome:
    if len(pool) != 1:
        raise ValidationError(f"magnitude_prune takes a pool of exactly one model, got {len(pool)}")
    return _Outcome(magnitude_prune(pool.load_model(pool.model_names[0]), sparsity))


# --------------------------------------------------------------------------
# public entry points and dispatch

REQUIRED = object()


@dataclass(frozen=True)
class Algorithm:
    name: str
    fn: Callable[..., _Outcome]
    params: dict[str, Any]


ALGORITHMS = {
    a.name: a
    for a in [
        Algorithm("simple_average", _simple_average, {}),
        Algorithm("weighted_average", _weighted_average, {"weights": REQUIRED}),
        Algorithm("task_arithmetic", _task_arithmetic, {"scaling": DEFAULT_SCALING}),
        Algorithm(
            "ties_merging",
            _ties_merging,
            {"scaling": DEFAULT_SCALING, "trim_fraction": DEFAULT_TRIM_FRACTION},
        ),
        Algorithm("fisher_merging", _fisher_merging, {"epsilon": DEFAULT_FISHER_EPSILON}),
        Algorithm("regmean", _regmean, {"gram_regularizer": DEFAULT_GRAM_REGULARIZER}),
        Algorithm("tall_mask", _tall_mask, {"scaling": DEFAULT_TALL_SCALING}),
        Algorithm("isotropic_merge", _isotropic_merge, {}),
        Algorithm("magnitude_prune", _magnitude_prune_pool, {"sparsity": REQUIRED}),
    ]
}

# algorithms that fuse several models into one (pruning is single-model)
MERGING_ALGORITHMS = [n for n in ALGORITHMS if n != "magnitude_prune"]


def get_algorithm(name: str) -> Algorithm:
    try:
        return ALGORITHMS[name]
    except KeyError:
        raise UnknownAlgorithm(f"unknown algorithm {name!r}; known: {sorted(ALGORITHMS)}") from None


def merge(pool: ModelPool, spec: MergeSpec) -> MergeResult:
    """Run ``spec`` on ``pool`` and return the fused model with a report."""
    algo = get_algorithm(spec.algorithm)
    params = spec.resolved()
    log.info("merging %d model(s) with %s %s", len(pool), algo.name, params)
    start = time.perf_counter()
    outcome = algo.fn(pool, **params)
    model = pool.with_output(outcome.merged)
    report = MergeReport(
        algorithm=algo.name,
        parameters=params,
        models=pool.model_names,
        fallbacks=outcome.fallbacks,
        seconds=time.perf_counter() - start,
    )
    return MergeResult(model, report, outcome.masks)


def run(pool: ModelPool, spec: MergeSpec) -> TensorMap:
    return merge(pool, spec).model


def simple_average(pool: ModelPool) -> TensorMap:
    return pool.with_output(_simple_average(pool).merged)


def weighted_average(pool: ModelPool, weights: Sequence[float]) -> TensorMap:
    return pool.with_output(_weighted_average(pool, weights).merged)


def task_arithmetic(pool: ModelPool, scaling: float = DEFAULT_SCALING) -> TensorMap:
    """``base + scaling * sum(task vectors)``."""
    return pool.with_output(_task_arithmetic(pool, scaling).merged)


def ties_merging(
    pool: ModelPool, scaling: float = DEFAULT_SCALING, trim_fraction: float = DEFAULT_TRIM_FRACTION
) -> TensorMap:
    """TIES merging with a global per-model trim over all filtered keys."""
    return pool.with_output(_ties_merging(pool, scaling, trim_fraction).merged)


def fisher_merging(pool: ModelPool, epsilon: float = DEFAULT_FISHER_EPSILON) -> TensorMap:
    """Per-coordinate average weighted by ``fisher + epsilon``.

    Fisher diagonals come from ``pool.stats`` and must mirror model keys.
    """
    return pool.with_output(_fisher_merging(pool, epsilon).merged)


def regmean(pool: ModelPool, gram_regularizer: float = DEFAULT_GRAM_REGULARIZER) -> TensorMap:
    """RegMean over 2-D weights with precomputed input Gram matrices.

    For a weight of shape (out, in) each model's stats must hold an
    (in, in) Gram under the same key. Off-diagonal Gram mass is scaled by
    ``gram_regularizer``. Keys without Grams are plainly averaged.
    """
    return pool.with_output(_regmean(pool, gram_regularizer).merged)


def tall_mask(pool: ModelPool, scaling: float = DEFAULT_TALL_SCALING) -> tuple[TensorMap, MaskSet]:
    """Unit-scale task arithmetic plus per-model localization masks.

    ``mask_i = |tau_i| >= scaling * |sum(tau) - tau_i|`` elementwise.
    """
    outcome = _tall_mask(pool, scaling)
    return pool.with_output(outcome.merged), outcome.masks


def isotropic_merge(pool: ModelPool) -> TensorMap:
    return pool.with_output(_isotropic_merge(pool).merged)
