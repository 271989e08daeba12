"""
Pair-similarity losses.

Every loss is a function of a B×B similarity matrix whose diagonal holds the
positive pairs. Each one returns the per-anchor terms for both retrieval
directions; the text-to-image terms are always computed by running the
image-to-text row kernel on the transposed matrix, so transposing `s` swaps
the two vectors bitwise.
"""

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from unipair.core import SimilarityMatrix, as_matrix, log1p_sum_exp_rows, off_diagonal
from unipair.errors import ConfigError, MarginLengthMismatch, MissingWeights, ShapeMismatch
from unipair.retrieval import hardest_negative_indices

LossKind = Literal["triplet_hn", "vlc", "unified", "weighted_unified", "adaptive_margin_unified"]

LOSS_KINDS: tuple[str, ...] = ("triplet_hn", "vlc", "unified", "weighted_unified", "adaptive_margin_unified")

DEFAULT_MARGIN = 0.2
DEFAULT_GAMMA = 60.0


def canonical_kind(kind: str) -> str:
    """Accept `triplet-hn` style names as well as `triplet_hn`."""
    name = kind.strip().lower().replace("-", "_")
    if name not in LOSS_KINDS:
        raise ConfigError("loss.kind", f"unknown loss {kind!r}, expected one of {', '.join(LOSS_KINDS)}")
    return name


@dataclass(frozen=True)
class LossSpec:
    """
    Which loss to evaluate and its hyper-parameters.

    `weights` is a B×B matrix whose diagonal holds w_ii (weighted_unified
    only); `margins` holds one m_i per anchor (adaptive_margin_unified only).
    """

    kind: LossKind = "unified"
    margin: float = DEFAULT_MARGIN
    gamma: float = DEFAULT_GAMMA
    weights: npt.NDArray[np.float64] | None = field(default=None, compare=False, repr=False)
    margins: npt.NDArray[np.float64] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not math.isfinite(self.margin) or self.margin < 0:
            raise ConfigError("loss.margin", f"must be a finite value >= 0, got {self.margin}")
        if not math.isfinite(self.gamma) or self.gamma <= 0:
            raise ConfigError("loss.gamma", f"must be a finite value > 0, got {self.gamma}")
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=np.float64)
            if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
                raise ConfigError("loss.weights", f"must be a square matrix, got shape {weights.shape}")
            if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
                raise ConfigError("loss.weights", "must be finite and strictly positive")
            object.__setattr__(self, "weights", weights)
        if self.margins is not None:
            margins = np.asarray(self.margins, dtype=np.float64)
            if margins.ndim != 1:
                raise ConfigError("loss.margins", f"must be a vector, got shape {margins.shape}")
            if not np.all(np.isfinite(margins)) or np.any(margins < 0):
                raise ConfigError("loss.margins", "must be finite and >= 0")
            object.__setattr__(self, "margins", margins)

    def to_dict(self) -> dict:
        """Plain JSON-ready form."""
        out = {"kind": self.kind, "margin": self.margin, "gamma": self.gamma}
        if self.weights is not None:
            out["weights"] = self.weights.tolist()
        if self.margins is not None:
            out["margins"] = self.margins.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LossSpec":
        unknown = set(data) - {"kind", "margin", "gamma", "weights", "margins"}
        if unknown:
            raise ConfigError("loss", f"unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LossValue:
    """A loss total with its per-anchor terms for both retrieval directions."""

    total: float
    i2t: npt.NDArray[np.float64]
    t2i: npt.NDArray[np.float64]


def _value(i2t: npt.NDArray[np.float64], t2i: npt.NDArray[np.float64]) -> LossValue:
    return LossValue(total=float(i2t.sum() + t2i.sum()), i2t=i2t, t2i=t2i)


def _hinge_rows(s: npt.NDArray[np.float64], margin) -> npt.NDArray[np.float64]:
    b = s.shape[0]
    if b < 2:
        return np.zeros(b)
    hard = hardest_negative_indices(s)
    rows = np.arange(b)
    return np.maximum(0.0, s[rows, hard] - s[rows, rows] + margin)


def _pair_rows(s: npt.NDArray[np.float64], margin, gamma: float) -> npt.NDArray[np.float64]:
    diff = s - np.diag(s)[:, None] + np.reshape(margin, (-1, 1))
    return log1p_sum_exp_rows(gamma * diff, off_diagonal(s.shape[0]))


def _log_rows(s: npt.NDArray[np.float64], margin, gamma: float) -> npt.NDArray[np.float64]:
    return _pair_rows(s, margin, gamma) / gamma


def _square(s) -> SimilarityMatrix:
    s = as_matrix(s, "similarity matrix")
    if s.shape[0] != s.shape[1]:
        raise ShapeMismatch("similarity matrix must be square", s.shape, (s.shape[0], s.shape[0]))
    return s


def anchor_margins(margins, b: int) -> npt.NDArray[np.float64]:
    """
    Validate per-anchor margins for a batch of `b` anchors.

    Raises:
        MarginLengthMismatch: if `margins` is None or does not have `b` entries
    """
    if margins is None:
        raise MarginLengthMismatch(0, b)
    margins = np.asarray(margins, dtype=np.float64).reshape(-1)
    if margins.shape[0] != b:
        raise MarginLengthMismatch(margins.shape[0], b)
    if np.any(margins < 0) or not np.all(np.isfinite(margins)):
        raise ConfigError("loss.margins", "must be finite and >= 0")
    return margins


def weighted_similarities(s: SimilarityMatrix, weights) -> SimilarityMatrix:
    """Entrywise w_ij·s_ij; raises MissingWeights when there is no weight matrix."""
    if weights is None:
        raise MissingWeights("weighted_unified needs a B×B weight matrix")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != s.shape:
        raise ShapeMismatch("weights", weights.shape, s.shape)
    return weights * s


def loss_triplet_hn(s: SimilarityMatrix, m: float) -> LossValue:
    """
    Hinge triplet loss on the hardest in-batch negative of each anchor.

    Args:
        s: B×B similarity matrix
        m: margin

    Returns:
        Per anchor [max_{j!=i} s_ij - s_ii + m]_+ and the column analogue;
        all zero when B = 1
    """
    s = _square(s)
    return _value(_hinge_rows(s, m), _hinge_rows(s.T, m))


def loss_vlc(s: SimilarityMatrix, gamma: float) -> LossValue:
    """
    Bidirectional softmax cross-entropy, -log(e^{γ s_ii} / sum_j e^{γ s_ij}).

    The logits of each row are re-centred on the positive logit, which turns
    the cross-entropy into log(1 + sum_{j!=i} e^{logit_j - logit_i}).
    """
    s = _square(s)

    def rows(x):
        logits = gamma * x
        return log1p_sum_exp_rows(logits - np.diag(logits)[:, None], off_diagonal(x.shape[0]))

    return _value(rows(s), rows(s.T))


def loss_vlc_pair_form(s: SimilarityMatrix, gamma: float) -> LossValue:
    """VLC written over pair differences, log(1 + sum_{j!=i} e^{γ(s_ij - s_ii)})."""
    s = _square(s)
    return _value(_pair_rows(s, 0.0, gamma), _pair_rows(s.T, 0.0, gamma))


def loss_unified(s: SimilarityMatrix, m: float, gamma: float) -> LossValue:
    """
    Unified loss, (1/γ)·log(1 + sum_{j!=i} e^{γ(s_ij - s_ii + m)}) per anchor and direction.

    With m = 0 it is VLC divided by γ; as γ grows it approaches the hinge
    triplet loss on the hardest negative.
    """
    s = _square(s)
    return _value(_log_rows(s, m, gamma), _log_rows(s.T, m, gamma))


def loss_weighted_unified(s: SimilarityMatrix, spec: LossSpec) -> LossValue:
    """
    Unified loss with every similarity multiplied by its weight.

    Exponents are γ(w_ij s_ij - w_ii s_ii + m) for image anchors and
    γ(w_ji s_ji - w_ii s_ii + m) for text anchors; one diagonal weight per
    anchor serves both directions.

    Raises:
        MissingWeights: if `spec.weights` is None
    """
    s = _square(s)
    ws = weighted_similarities(s, spec.weights)
    return _value(_log_rows(ws, spec.margin, spec.gamma), _log_rows(ws.T, spec.margin, spec.gamma))


def loss_adaptive_margin_unified(s: SimilarityMatrix, gamma: float, margins) -> LossValue:
    """
    Unified loss where anchor i uses its own margin m_i in both directions.

    Raises:
        MarginLengthMismatch: if `margins` does not have B entries
    """
    s = _square(s)
    mi = anchor_margins(margins, s.shape[0])
    return _value(_log_rows(s, mi, gamma), _log_rows(s.T, mi, gamma))


def loss_weighted_triplet_hn(s: SimilarityMatrix, weights, m: float) -> LossValue:
    """Hinge form of the weighted unified loss: the hardest weighted negative per anchor."""
    s = _square(s)
    ws = weighted_similarities(s, weights)
    return _value(_hinge_rows(ws, m), _hinge_rows(ws.T, m))


def loss_adaptive_margin_triplet_hn(s: SimilarityMatrix, margins) -> LossValue:
    """Hinge form with per-anchor margins, [max_{j!=i} s_ij - s_ii + m_i]_+."""
    s = _square(s)
    mi = anchor_margins(margins, s.shape[0])
    return _value(_hinge_rows(s, mi), _hinge_rows(s.T, mi))


def limit_gap_bound(b: int, gamma: float) -> float:
    """Upper bound 2B·log(B)/γ on the distance between a log-sum-exp loss and its hinge limit."""
    return 2.0 * b * math.log(b) / gamma if b > 1 else 0.0


def triplet_limit_gap(s: SimilarityMatrix, m: float, gamma: float) -> float:
    """|unified - triplet_hn| on the same batch; at most `limit_gap_bound(B, γ)`."""
    return abs(loss_unified(s, m, gamma).total - loss_triplet_hn(s, m).total)


def evaluate_loss(s: SimilarityMatrix, spec: LossSpec) -> LossValue:
    """Evaluate whichever loss `spec.kind` names."""
    match spec.kind:
        case "triplet_hn":
            return loss_triplet_hn(s, spec.margin)
        case "vlc":
            return loss_vlc(s, spec.gamma)
        case "unified":
            return loss_unified(s, spec.margin, spec.gamma)
        case "weighted_unified":
            return loss_weighted_unified(s, spec)
        case "adaptive_margin_unified":
            return loss_adaptive_margin_unified(s, spec.gamma, spec.margins)
    raise ConfigError("loss.kind", f"unknown loss {spec.kind!r}")
