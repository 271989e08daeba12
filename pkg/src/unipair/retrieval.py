"""Hard-negative mining, recall metrics and similarity-gap statistics."""

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt

from unipair.core import SimilarityMatrix, as_matrix, off_diagonal
from unipair.errors import BadCutoff, ShapeMismatch, TooFewItems

Direction = Literal["i2t", "t2i"]

RECALL_CUTOFFS = (1, 5, 10)


def _oriented(s: SimilarityMatrix, direction: Direction) -> SimilarityMatrix:
    s = as_matrix(s, "similarity matrix")
    if s.shape[0] != s.shape[1]:
        raise ShapeMismatch("similarity matrix must be square", s.shape, (s.shape[0], s.shape[0]))
    if direction == "i2t":
        return s
    if direction == "t2i":
        return s.T
    raise ValueError(f"direction must be 'i2t' or 't2i', got {direction!r}")


def hardest_negative_indices(s: SimilarityMatrix) -> npt.NDArray[np.intp]:
    """Column of the most similar negative in every row, lowest index on ties."""
    masked = np.where(off_diagonal(s.shape[0]), s, -np.inf)
    return np.argmax(masked, axis=1)


def mine_hardest_negative(s: SimilarityMatrix, i: int, direction: Direction = "i2t") -> int:
    """
    Index of the hardest negative for anchor `i`.

    For image anchors this is argmax_{j!=i} s(i, j), for text anchors
    argmax_{j!=i} s(j, i). Ties go to the lowest index.

    Raises:
        TooFewItems: if the batch has fewer than two items
    """
    s = _oriented(s, direction)
    b = s.shape[0]
    if b < 2:
        raise TooFewItems(f"hard-negative mining needs B >= 2, got B={b}")
    if not 0 <= i < b:
        raise IndexError(f"anchor {i} outside 0..{b - 1}")
    row = s[i].copy()
    row[i] = -np.inf
    return int(np.argmax(row))


def ranks(s: SimilarityMatrix, direction: Direction = "i2t") -> npt.NDArray[np.intp]:
    """
    0-based rank of each anchor's positive among its candidates.

    Candidates are sorted by descending similarity; a candidate tied with the
    positive ranks ahead of it only if its index is lower.
    """
    s = _oriented(s, direction)
    pos = np.diag(s)[:, None]
    idx = np.arange(s.shape[0])
    ahead = (s > pos) | ((s == pos) & (idx[None, :] < idx[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(s: SimilarityMatrix, k: int, direction: Direction = "i2t") -> float:
    """
    Percentage of anchors whose positive ranks within the top `k`.

    Raises:
        BadCutoff: unless 1 <= k <= B
    """
    s = _oriented(s, direction)
    b = s.shape[0]
    if not 1 <= k <= b:
        raise BadCutoff(f"cutoff k={k} outside 1..{b}")
    return 100.0 * float(np.count_nonzero(ranks(s) < k)) / b


@dataclass(frozen=True)
class RetrievalMetrics:
    """R@1/5/10 for both directions, their sum, and median ranks (1-based)."""

    r1_i2t: float
    r5_i2t: float
    r10_i2t: float
    r1_t2i: float
    r5_t2i: float
    r10_t2i: float
    rsum: float
    medr_i2t: float
    medr_t2i: float

    def recalls(self) -> tuple[float, ...]:
        return (self.r1_i2t, self.r5_i2t, self.r10_i2t, self.r1_t2i, self.r5_t2i, self.r10_t2i)

    def to_dict(self) -> dict:
        return asdict(self)


def rsum(metrics: RetrievalMetrics) -> float:
    """Sum of the six recalls."""
    return float(sum(metrics.recalls()))


def evaluate(s: SimilarityMatrix) -> RetrievalMetrics:
    """
    All retrieval metrics of a similarity matrix in one pass.

    Cutoffs larger than the number of candidates are clamped to B, where
    recall is 100 by definition.
    """
    s = _oriented(s, "i2t")
    b = s.shape[0]
    values = {}
    medr = {}
    for direction in ("i2t", "t2i"):
        r = ranks(s, direction)
        for k in RECALL_CUTOFFS:
            values[f"r{k}_{direction}"] = 100.0 * float(np.count_nonzero(r < min(k, b))) / b
        medr[direction] = float(np.median(r)) + 1.0
    total = sum(values[f"r{k}_{d}"] for d in ("i2t", "t2i") for k in RECALL_CUTOFFS)
    return RetrievalMetrics(**values, rsum=total, medr_i2t=medr["i2t"], medr_t2i=medr["t2i"])


@dataclass(frozen=True)
class GapStats:
    """Mean positive similarity, mean hardest-negative similarity, and their difference."""

    mean_pos: float
    mean_hardneg: float
    gap: float


def gap_stats(s: SimilarityMatrix) -> GapStats:
    """
    Positive versus hardest-negative similarity over the whole matrix.

    The hardest negative of anchor i is max_{j!=i} s(i, j).

    Raises:
        TooFewItems: if B < 2
    """
    s = _oriented(s, "i2t")
    b = s.shape[0]
    if b < 2:
        raise TooFewItems(f"gap statistics need B >= 2, got B={b}")
    rows = np.arange(b)
    pos = float(np.mean(s[rows, rows]))
    hardneg = float(np.mean(s[rows, hardest_negative_indices(s)]))
    return GapStats(mean_pos=pos, mean_hardneg=hardneg, gap=pos - hardneg)
