"""Embedding and similarity primitives on the unit hypersphere."""

import math
from collections.abc import Iterable

import numpy as np
import numpy.typing as npt

from unipair.errors import NonFinite, ShapeMismatch, ZeroRow

#: A B×D matrix of unit-norm rows, one row per item of a modality.
EmbeddingBatch = npt.NDArray[np.float64]

#: A B×B matrix of cosine similarities, rows are visual items, columns text items.
SimilarityMatrix = npt.NDArray[np.float64]

NORM_EPS = 1e-12


def as_matrix(m, name: str = "matrix") -> npt.NDArray[np.float64]:
    """Return `m` as a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D", arr.shape, ("B", "D"))
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or infinity")
    return arr


def row_norms(m: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Euclidean norm of every row."""
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def normalize_rows(m) -> EmbeddingBatch:
    """
    Project every row onto the unit hypersphere.

    Args:
        m: B×D matrix of raw features

    Returns:
        A new B×D matrix whose rows have unit Euclidean norm

    Raises:
        ZeroRow: if any row norm is below 1e-12
    """
    arr = as_matrix(m, "embeddings")
    norms = row_norms(arr)
    short = np.flatnonzero(norms < NORM_EPS)
    if short.size:
        raise ZeroRow(int(short[0]), float(norms[short[0]]))
    return arr / norms[:, None]


def cosine_similarity_matrix(v: EmbeddingBatch, t: EmbeddingBatch) -> SimilarityMatrix:
    """
    Cosine similarities between two normalized batches.

    Entry (i, j) is the dot product of visual item i with text item j. Values
    are not clamped to [-1, 1].

    Raises:
        ShapeMismatch: if the batches differ in size or dimension
    """
    v = as_matrix(v, "v")
    t = as_matrix(t, "t")
    if v.shape != t.shape:
        raise ShapeMismatch("similarity batches", v.shape, t.shape)
    # einsum reduces over D in a fixed order, so building from (t, v) is the exact transpose
    return np.einsum("id,jd->ij", v, t)


def log1p_sum_exp(xs: Iterable[float]) -> float:
    """
    Stable log(1 + sum(exp(x))) over a list of exponents.

    The exponents are shifted by max(0, max(xs)) so no exponential exceeds 1.

    Raises:
        NonFinite: if any exponent is NaN or infinite
    """
    values = [float(x) for x in xs]
    if not all(math.isfinite(x) for x in values):
        raise NonFinite("log1p_sum_exp needs finite exponents")
    if not values:
        return 0.0
    shift = max(0.0, max(values))
    total = math.fsum(math.exp(x - shift) for x in values)
    if shift == 0.0:
        return math.log1p(total)
    return shift + math.log(math.exp(-shift) + total)


def log1p_sum_exp_rows(x: npt.NDArray[np.float64], mask: npt.NDArray[np.bool_]) -> npt.NDArray[np.float64]:
    """
    Row-wise log(1 + sum(exp(x))) over the masked entries of each row.

    Rows with no masked entries give exactly 0. Unmasked entries are ignored
    even if they are not finite.

    Returns:
        Vector with one value per row
    """
    # row sums over C-ordered memory round the same for s.T and a copy of it
    x = np.ascontiguousarray(x)
    masked = np.where(mask, x, -np.inf)
    if not np.all(np.isfinite(x[mask])):
        raise NonFinite("log1p_sum_exp needs finite exponents")
    shift = np.maximum(0.0, masked.max(axis=1, initial=-np.inf))
    total = np.exp(masked - shift[:, None]).sum(axis=1)
    return np.where(
        shift == 0.0,
        np.log1p(total),
        shift + np.log(np.exp(-shift) + total),
    )


def softmax_with_one(x: npt.NDArray[np.float64], mask: npt.NDArray[np.bool_]) -> npt.NDArray[np.float64]:
    """
    Row-wise exp(x_j) / (1 + sum_k exp(x_k)) over the masked entries.

    This is the derivative of `log1p_sum_exp_rows` with respect to each
    exponent and uses the same shift. Unmasked entries come back as 0.
    """
    x = np.ascontiguousarray(x)
    masked = np.where(mask, x, -np.inf)
    shift = np.maximum(0.0, masked.max(axis=1, initial=-np.inf))
    num = np.exp(masked - shift[:, None])
    return num / (np.exp(-shift) + num.sum(axis=1))[:, None]


def off_diagonal(b: int) -> npt.NDArray[np.bool_]:
    """Boolean B×B mask that is False on the diagonal."""
    return ~np.eye(b, dtype=bool)
