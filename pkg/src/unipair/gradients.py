"""
Closed-form gradients of the pair-similarity losses.

Every loss here depends on the embeddings only through the similarity matrix,
so the gradients are built in two steps: the derivative of the loss with
respect to each similarity, then the chain rule through the cosine and the
row normalization. Inputs are treated as raw coordinates and normalized
inside the function being differentiated, which is also what
`finite_diff_grad` perturbs.
"""

from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from unipair.core import (
    EmbeddingBatch,
    SimilarityMatrix,
    as_matrix,
    cosine_similarity_matrix,
    normalize_rows,
    off_diagonal,
    row_norms,
    softmax_with_one,
)
from unipair.errors import ConfigError, ShapeMismatch
from unipair.losses import LossSpec, anchor_margins, evaluate_loss, weighted_similarities
from unipair.retrieval import Direction, hardest_negative_indices

FD_STEP_RANGE = (1e-8, 1e-4)

#: Distance below which a triplet configuration counts as sitting on a hinge kink or argmax tie.
KINK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    """Loss value and its gradients with respect to the raw visual and text rows."""

    loss: float
    d_v: npt.NDArray[np.float64]
    d_t: npt.NDArray[np.float64]


@dataclass(frozen=True)
class SoftWeight:
    """
    Softmax weights of the image-to-text unified and VLC terms.

    `unified` and `vlc` hold D(t_j) = e^{γ(v_i·t_j - v_i·t_i + m)} (m = 0 for
    VLC), with zeros on the diagonal. `share_*` is D / (1 + sum_k D), the
    weight each negative gets in the gradient; `pair_*` is D / (1 + D).
    """

    unified: npt.NDArray[np.float64]
    vlc: npt.NDArray[np.float64]
    share_unified: npt.NDArray[np.float64]
    share_vlc: npt.NDArray[np.float64]
    pair_unified: npt.NDArray[np.float64]
    pair_vlc: npt.NDArray[np.float64]


@dataclass(frozen=True)
class TangentReport:
    """
    Hypersphere-tangent gradient magnitudes for one retrieval direction.

    `anchor[i]` is the tangent magnitude of the gradient of anchor i's term
    with respect to the anchor itself; `negative[i, j]` is that of the same
    term with respect to negative j. Angles are in radians: `theta_anchor`
    between each anchor and its gradient, `theta_negative` between
    negative j and anchor i (the direction of its gradient).
    """

    anchor: npt.NDArray[np.float64]
    negative: npt.NDArray[np.float64]
    hard: npt.NDArray[np.intp]
    theta_anchor: npt.NDArray[np.float64]
    theta_negative: npt.NDArray[np.float64]
    grad_norm_anchor: npt.NDArray[np.float64]

    @property
    def hardest(self) -> npt.NDArray[np.float64]:
        """Tangent magnitude on each anchor's hardest negative."""
        return self.negative[np.arange(self.hard.shape[0]), self.hard]


def _softmax_rows(x: SimilarityMatrix, margin, gamma: float) -> SimilarityMatrix:
    # d/dx of (1/γ)·log(1 + Σ_{j≠i} e^{γ(x_ij - x_ii + m)}) for every row i
    args = gamma * (x - np.diag(x)[:, None] + np.reshape(margin, (-1, 1)))
    share = softmax_with_one(args, off_diagonal(x.shape[0]))
    return share - np.diag(share.sum(axis=1))


def _hinge_rows(x: SimilarityMatrix, margin) -> SimilarityMatrix:
    b = x.shape[0]
    out = np.zeros((b, b))
    if b < 2:
        return out
    rows = np.arange(b)
    hard = hardest_negative_indices(x)
    active = x[rows, hard] - x[rows, rows] + np.broadcast_to(margin, (b,)) > 0
    out[rows[active], hard[active]] = 1.0
    out[rows[active], rows[active]] = -1.0
    return out


def row_gradients(s: SimilarityMatrix, spec: LossSpec, direction: Direction = "i2t") -> SimilarityMatrix:
    """
    Derivative of one direction's per-anchor terms with respect to `s`.

    Returns a B×B matrix in the coordinates of `s`: entry (i, j) is the
    derivative of the summed `direction` terms with respect to s_ij.
    """
    transpose = direction == "t2i"
    weights = None
    if spec.kind == "weighted_unified":
        x = weighted_similarities(s, spec.weights)
        weights = spec.weights
    else:
        x = s
    if transpose:
        x = x.T
    match spec.kind:
        case "triplet_hn":
            g = _hinge_rows(x, spec.margin)
        case "vlc":
            g = spec.gamma * _softmax_rows(x, 0.0, spec.gamma)
        case "unified" | "weighted_unified":
            g = _softmax_rows(x, spec.margin, spec.gamma)
        case "adaptive_margin_unified":
            g = _softmax_rows(x, anchor_margins(spec.margins, s.shape[0]), spec.gamma)
        case _:
            raise ConfigError("loss.kind", f"no gradient for {spec.kind!r}")
    if transpose:
        g = g.T
    return g * weights if weights is not None else g


def similarity_gradient(s: SimilarityMatrix, spec: LossSpec) -> SimilarityMatrix:
    """Derivative of the full bidirectional loss with respect to every similarity."""
    return row_gradients(s, spec, "i2t") + row_gradients(s, spec, "t2i")


def _tangent_backprop(unit: EmbeddingBatch, norms, g: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    # d/dx of f(x / |x|) = (g - x̂ (x̂·g)) / |x|
    radial = np.einsum("ij,ij->i", unit, g)
    return (g - unit * radial[:, None]) / norms[:, None]


def _pair(v, t) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    v = as_matrix(v, "v")
    t = as_matrix(t, "t")
    if v.shape != t.shape:
        raise ShapeMismatch("gradient batches", v.shape, t.shape)
    return v, t


def grad_for_spec(v: EmbeddingBatch, t: EmbeddingBatch, spec: LossSpec) -> GradResult:
    """
    Loss and gradient with respect to the raw rows of `v` and `t`.

    Rows are normalized inside the differentiated function, so for unit-norm
    inputs the gradient is already tangent to the hypersphere.
    """
    v, t = _pair(v, t)
    vn, tn = row_norms(v), row_norms(t)
    vh, th = normalize_rows(v), normalize_rows(t)
    s = cosine_similarity_matrix(vh, th)
    ds = similarity_gradient(s, spec)
    g_v = np.einsum("ij,jd->id", ds, th)
    g_t = np.einsum("ji,jd->id", ds, vh)
    return GradResult(
        loss=evaluate_loss(s, spec).total,
        d_v=_tangent_backprop(vh, vn, g_v),
        d_t=_tangent_backprop(th, tn, g_t),
    )


def grad_triplet_hn(v: EmbeddingBatch, t: EmbeddingBatch, m: float) -> GradResult:
    """
    Gradient of the hardest-negative triplet loss.

    For every anchor with an active hinge the anchor receives t̂ - t and the
    hard negative receives the anchor (projected onto the tangent plane);
    inactive anchors contribute nothing. Both retrieval directions are summed.
    """
    return grad_for_spec(v, t, LossSpec(kind="triplet_hn", margin=m))


def grad_unified(v: EmbeddingBatch, t: EmbeddingBatch, m: float, gamma: float) -> GradResult:
    """
    Gradient of the unified loss for any γ.

    The anchor receives sum_j (t_j - t_i)·D(t_j) / (1 + sum_k D(t_k)), each
    negative t_j receives v_i·D(t_j) / (1 + sum_k D(t_k)) and the positive
    t_i receives -v_i times the summed share.
    """
    return grad_for_spec(v, t, LossSpec(kind="unified", margin=m, gamma=gamma))


def grad_vlc(v: EmbeddingBatch, t: EmbeddingBatch, gamma: float) -> GradResult:
    """Gradient of VLC, i.e. γ times the unified gradient at m = 0."""
    return grad_for_spec(v, t, LossSpec(kind="vlc", margin=0.0, gamma=gamma))


def grad_weighted_unified(v: EmbeddingBatch, t: EmbeddingBatch, spec: LossSpec) -> GradResult:
    """Gradient of the weighted unified loss; `spec` must carry the weight matrix."""
    return grad_for_spec(v, t, replace(spec, kind="weighted_unified"))


def grad_adaptive_margin_unified(v: EmbeddingBatch, t: EmbeddingBatch, gamma: float, margins) -> GradResult:
    """Gradient of the unified loss with per-anchor margins."""
    return grad_for_spec(v, t, LossSpec(kind="adaptive_margin_unified", margin=0.0, gamma=gamma, margins=margins))


def soft_weights(v: EmbeddingBatch, t: EmbeddingBatch, m: float, gamma: float) -> SoftWeight:
    """Softmax weights D_unified and D_vlc of the image-to-text terms on a normalized batch."""
    v, t = _pair(v, t)
    s = cosine_similarity_matrix(v, t)
    mask = off_diagonal(s.shape[0])
    args = gamma * (s - np.diag(s)[:, None])
    with np.errstate(over="ignore"):
        d_vlc = np.where(mask, np.exp(args), 0.0)
        d_unified = np.exp(gamma * m) * d_vlc
    return SoftWeight(
        unified=d_unified,
        vlc=d_vlc,
        share_unified=softmax_with_one(args + gamma * m, mask),
        share_vlc=softmax_with_one(args, mask),
        pair_unified=np.where(mask, expit(args + gamma * m), 0.0),
        pair_vlc=np.where(mask, expit(args), 0.0),
    )


def _cos_between(x: npt.NDArray[np.float64], g: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    nx = np.linalg.norm(x, axis=-1)
    ng = np.linalg.norm(g, axis=-1)
    denom = nx * ng
    dot = np.sum(x * g, axis=-1)
    cos = np.divide(dot, denom, out=np.ones_like(dot), where=denom > 0)
    return np.clip(cos, -1.0, 1.0)


def tangent_norm(x: npt.NDArray[np.float64], g: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """|g|·sin θ(x, g), with sin θ = sqrt(max(0, 1 - cos²θ)); rows of x and g pair up."""
    cos = _cos_between(x, g)
    return np.linalg.norm(g, axis=-1) * np.sqrt(np.maximum(0.0, 1.0 - cos * cos))


def tangent_norm_projected(x: npt.NDArray[np.float64], g: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Norm of g after removing its component along x."""
    unit = x / np.linalg.norm(x, axis=-1, keepdims=True)
    radial = np.sum(unit * g, axis=-1, keepdims=True)
    return np.linalg.norm(g - unit * radial, axis=-1)


def tangent_magnitudes(
    v: EmbeddingBatch, t: EmbeddingBatch, spec: LossSpec, direction: Direction = "i2t"
) -> TangentReport:
    """
    Tangent components of the per-anchor gradients on a normalized batch.

    For image anchors (`i2t`) the gradient of anchor i's term is
    sum_j ds_ij·t_j with respect to v_i and ds_ij·v_i with respect to t_j;
    `t2i` swaps the roles of the two modalities.
    """
    v, t = _pair(v, t)
    if direction == "t2i":
        v, t = t, v
        if spec.weights is not None:
            spec = replace(spec, weights=spec.weights.T)
    s = cosine_similarity_matrix(v, t)
    ds = row_gradients(s, spec, "i2t")
    g_anchor = np.einsum("ij,jd->id", ds, t)
    b, d = v.shape
    anchors = np.broadcast_to(v[:, None, :], (b, b, d))
    negatives = np.broadcast_to(t[None, :, :], (b, b, d))
    cos_neg = _cos_between(negatives, anchors)
    negative = np.abs(ds) * np.linalg.norm(anchors, axis=-1) * np.sqrt(np.maximum(0.0, 1.0 - cos_neg * cos_neg))
    np.fill_diagonal(negative, 0.0)
    return TangentReport(
        anchor=tangent_norm(v, g_anchor),
        negative=negative,
        hard=hardest_negative_indices(s),
        theta_anchor=np.arccos(_cos_between(v, g_anchor)),
        theta_negative=np.arccos(cos_neg),
        grad_norm_anchor=np.linalg.norm(g_anchor, axis=-1),
    )


LossFunctional = Callable[[npt.NDArray[np.float64], npt.NDArray[np.float64]], float]


def raw_loss(spec: LossSpec) -> LossFunctional:
    """The loss of `spec` as a function of raw (unnormalized) rows."""

    def functional(v, t) -> float:
        return evaluate_loss(cosine_similarity_matrix(normalize_rows(v), normalize_rows(t)), spec).total

    return functional


def finite_diff_grad(loss: LossFunctional, v: EmbeddingBatch, t: EmbeddingBatch, h: float = 1e-6) -> GradResult:
    """
    Central-difference gradient of `loss` at (v, t).

    Args:
        loss: callable taking raw (v, t) and returning a scalar
        v: visual rows
        t: text rows
        h: step, within [1e-8, 1e-4]

    Returns:
        GradResult with the loss at (v, t) and (L(x+h) - L(x-h)) / 2h per coordinate
    """
    lo, hi = FD_STEP_RANGE
    if not lo <= h <= hi:
        raise ConfigError("h", f"finite-difference step must be in [{lo:g}, {hi:g}], got {h:g}")
    v, t = _pair(v, t)
    grads = []
    for which in (0, 1):
        base = (v, t)[which]
        out = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            if which == 0:
                f_plus, f_minus = loss(plus, t), loss(minus, t)
            else:
                f_plus, f_minus = loss(v, plus), loss(v, minus)
            out[idx] = (f_plus - f_minus) / (2.0 * h)
        grads.append(out)
    return GradResult(loss=float(loss(v, t)), d_v=grads[0], d_t=grads[1])


def relative_error(analytic: GradResult, numeric: GradResult, floor: float = 1e-2) -> float:
    """
    Largest entrywise |a - n| / max(|a|, |n|, floor·scale).

    `scale` is the largest gradient entry, so entries that are tiny next to
    the rest of the gradient are judged on an absolute scale instead of
    dividing round-off by nearly zero.
    """
    a = np.concatenate([analytic.d_v.ravel(), analytic.d_t.ravel()])
    n = np.concatenate([numeric.d_v.ravel(), numeric.d_t.ravel()])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def kink_distance(s: SimilarityMatrix, m: float) -> float:
    """
    How far a triplet configuration is from non-differentiability.

    The smaller of the closest hinge argument to zero and the closest gap
    between the two most similar negatives, over all anchors and both
    directions. Infinite when B < 3 and no hinge is near zero.
    """
    b = s.shape[0]
    if b < 2:
        return float("inf")
    best = float("inf")
    for x in (s, s.T):
        rows = np.arange(b)
        masked = np.where(off_diagonal(b), x, -np.inf)
        hard = np.argmax(masked, axis=1)
        best = min(best, float(np.min(np.abs(x[rows, hard] - x[rows, rows] + m))))
        if b > 2:
            top2 = np.sort(masked, axis=1)[:, -2:]
            best = min(best, float(np.min(top2[:, 1] - top2[:, 0])))
    return best
