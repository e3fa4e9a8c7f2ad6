"""Dense tensor and tensor-map arithmetic.

Tensors are plain numpy arrays. A tensor map (a checkpoint's "state dict")
is a ``dict[str, np.ndarray]``; every function here returns a new dict whose
keys are inserted in lexicographic order, and never mutates its inputs.

All reductions and linear combinations accumulate in float64. Results are
cast back to the dtype of the first operand.
"""

from __future__ import annotations

import enum
import math
from typing import Mapping, Sequence

import ml_dtypes
import numpy as np

from .errors import (
    DivisionByZero,
    KeyMismatch,
    LengthMismatch,
    NoConvergence,
    NonFiniteInput,
    NonFiniteScalar,
    NotRank2,
    ShapeMismatch,
    UnsupportedDtype,
    ZeroNorm,
)

TensorMap = dict  # dict[str, np.ndarray], keys in lexicographic order

SVD_TOLERANCE = 1e-12
SVD_MAX_SWEEPS = 100


class DType(enum.Enum):
    F64 = ("F64", np.dtype(np.float64))
    F32 = ("F32", np.dtype(np.float32))
    F16 = ("F16", np.dtype(np.float16))
    BF16 = ("BF16", np.dtype(ml_dtypes.bfloat16))
    U8 = ("U8", np.dtype(np.uint8))
    I64 = ("I64", np.dtype(np.int64))

    def __init__(self, tag, np_dtype):
        self.tag = tag
        self.np_dtype = np_dtype

    @property
    def width(self) -> int:
        return self.np_dtype.itemsize

    @property
    def is_float(self) -> bool:
        return self in (DType.F64, DType.F32, DType.F16, DType.BF16)

    @classmethod
    def from_tag(cls, tag: str) -> "DType":
        for member in cls:
            if member.tag == tag:
                return member
        raise UnsupportedDtype(f"unsupported dtype {tag!r}")

    @classmethod
    def of(cls, array: np.ndarray) -> "DType":
        dt = np.dtype(array.dtype)
        for member in cls:
            if member.np_dtype == dt:
                return member
        raise UnsupportedDtype(f"unsupported numpy dtype {dt}")


def widen(x: np.ndarray) -> np.ndarray:
    """Return ``x`` as a float64 array (exact for every supported dtype)."""
    return np.asarray(x).astype(np.float64)


def _f64_to_bf16(x: np.ndarray) -> np.ndarray:
    # Round to odd into float32 first so the final RNE step to bfloat16
    # matches a single correct rounding of the float64 value.
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        f = x.astype(np.float32)
    bits = f.view(np.uint32).copy()
    finite = np.isfinite(x)
    inexact = finite & (f.astype(np.float64) != x)
    away = inexact & (np.abs(f.astype(np.float64)) > np.abs(x))
    bits[away] -= 1
    bits[inexact] |= 1
    return bits.view(np.float32).astype(ml_dtypes.bfloat16)


def cast(values: np.ndarray, dtype: DType | np.dtype) -> np.ndarray:
    """Store float64 ``values`` in ``dtype`` with round-to-nearest-even."""
    if not isinstance(dtype, DType):
        dtype = DType.of(np.empty(0, dtype=dtype))
    values = np.asarray(values, dtype=np.float64)
    if dtype is DType.F64:
        return values.copy()
    if dtype is DType.BF16:
        return _f64_to_bf16(values)
    if dtype.is_float:
        with np.errstate(over="ignore"):
            return values.astype(dtype.np_dtype)
    info = np.iinfo(dtype.np_dtype)
    return np.clip(np.rint(values), info.min, info.max).astype(dtype.np_dtype)


def zeros_like(a: Mapping[str, np.ndarray]) -> TensorMap:
    return {k: np.zeros_like(a[k]) for k in sorted(a)}


def check_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    """Raise unless ``a`` and ``b`` share keys and per-key shapes."""
    ka, kb = set(a), set(b)
    if ka != kb:
        raise KeyMismatch(ka - kb, kb - ka)
    for k in sorted(ka):
        if np.shape(a[k]) != np.shape(b[k]):
            raise ShapeMismatch(k, np.shape(a[k]), np.shape(b[k]))


def _check_scalar(c) -> float:
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteScalar(f"scalar must be finite, got {c}")
    return c


def map_add(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> TensorMap:
    check_compatible(a, b)
    return {k: cast(widen(a[k]) + widen(b[k]), DType.of(a[k])) for k in sorted(a)}


def map_sub(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> TensorMap:
    check_compatible(a, b)
    return {k: cast(widen(a[k]) - widen(b[k]), DType.of(a[k])) for k in sorted(a)}


def map_scale(a: Mapping[str, np.ndarray], c: float) -> TensorMap:
    c = _check_scalar(c)
    return {k: cast(widen(a[k]) * c, DType.of(a[k])) for k in sorted(a)}


def map_div_scalar(a: Mapping[str, np.ndarray], n: float) -> TensorMap:
    n = _check_scalar(n)
    if n == 0:
        raise DivisionByZero("cannot divide a tensor map by zero")
    return {k: cast(widen(a[k]) / n, DType.of(a[k])) for k in sorted(a)}


def map_linear_combination(
    maps: Sequence[Mapping[str, np.ndarray]], coeffs: Sequence[float]
) -> TensorMap:
    """Return ``sum(c * m for c, m in zip(coeffs, maps))``.

    Terms are accumulated in list order in float64; each key is cast back to
    the dtype it has in ``maps[0]``.
    """
    if len(maps) == 0 or len(maps) != len(coeffs):
        raise LengthMismatch(
            f"need equal, non-empty lists; got {len(maps)} maps and {len(coeffs)} coefficients"
        )
    coeffs = [_check_scalar(c) for c in coeffs]
    for m in maps[1:]:
        check_compatible(maps[0], m)
    out = {}
    for k in sorted(maps[0]):
        acc = np.zeros(np.shape(maps[0][k]), dtype=np.float64)
        for c, m in zip(coeffs, maps):
            acc += c * widen(m[k])
        out[k] = cast(acc, DType.of(maps[0][k]))
    return out


def flat_dot(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    check_compatible(a, b)
    total = 0.0
    for k in sorted(a):
        total += float(np.dot(widen(a[k]).ravel(), widen(b[k]).ravel()))
    return total


def flat_norm(a: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(flat_dot(a, a))


def cosine_similarity(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    check_compatible(a, b)
    na, nb = flat_norm(a), flat_norm(b)
    if na == 0:
        raise ZeroNorm("first operand has zero norm")
    if nb == 0:
        raise ZeroNorm("second operand has zero norm")
    # both norms multiply in the same order regardless of argument order
    lo, hi = sorted((na, nb))
    return flat_dot(a, b) / (lo * hi)


def svd_2d(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations in float64.

    Returns ``(U, S, Vt)`` with ``U`` of shape (rows, k), ``S`` of length
    ``k = min(rows, cols)`` sorted descending, and ``Vt`` of shape (k, cols).
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise NotRank2(f"expected a rank-2 tensor, got shape {m.shape}")
    a = widen(m)
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("svd input contains non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape
    if cols == 0:
        u = np.zeros((rows, 0))
        s = np.zeros(0)
        vt = np.zeros((0, cols))
        return (vt.T, s, u.T) if transposed else (u, s, vt)

    # normalise so squared column norms neither overflow nor underflow
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    a = a / scale if scale > 0 else a.copy()
    v = np.eye(cols)
    # columns below this squared norm are numerically zero and never rotated
    negligible = (max(rows, cols) * np.finfo(np.float64).eps) ** 2 * float(np.sum(a * a))
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                alpha = a[:, p] @ a[:, p]
                beta = a[:, q] @ a[:, q]
                gamma = a[:, p] @ a[:, q]
                if alpha <= negligible or beta <= negligible or abs(gamma) <= SVD_TOLERANCE * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p].copy(), a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NoConvergence(f"one-sided Jacobi did not converge in {SVD_MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    u = _left_vectors(a, sigma)
    sigma = sigma * (scale if scale > 0 else 1.0)
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def _orthogonalize(w: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for _ in range(2):
        for b in basis:
            w = w - (b @ w) * b
    return w


def _left_vectors(a: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Normalised columns of ``a``, re-orthogonalised in descending order.

    Columns that are (numerically) zero or collapse under re-orthogonalisation
    are replaced by an orthonormal completion; their singular values are at
    rounding level, so reconstruction is unaffected.
    """
    rows, cols = a.shape
    u = np.zeros((rows, cols))
    basis, dead = [], []
    for j in range(cols):
        if sigma[j] > 0:
            w = _orthogonalize(a[:, j] / sigma[j], basis)
            norm = np.linalg.norm(w)
            if norm > 0.5:
                u[:, j] = w / norm
                basis.append(u[:, j])
                continue
        dead.append(j)
    candidates = iter(np.eye(rows))
    for j in dead:
        for e in candidates:
            w = _orthogonalize(e, basis)
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                u[:, j] = w / norm
                basis.append(u[:, j])
                break
    return u
