"""unipair - pair-similarity losses, their gradients and a synthetic retrieval lab."""

from importlib.metadata import version

__version__ = version("unipair")

from unipair.core import cosine_similarity_matrix, log1p_sum_exp, normalize_rows  # noqa: E402
from unipair.gradients import grad_for_spec, grad_triplet_hn, grad_unified, grad_vlc  # noqa: E402
from unipair.losses import (  # noqa: E402
    LossSpec,
    LossValue,
    evaluate_loss,
    loss_adaptive_margin_unified,
    loss_triplet_hn,
    loss_unified,
    loss_vlc,
    loss_vlc_pair_form,
    loss_weighted_unified,
)
from unipair.retrieval import evaluate, gap_stats, recall_at_k  # noqa: E402

__all__ = [
    "LossSpec",
    "LossValue",
    "cosine_similarity_matrix",
    "evaluate",
    "evaluate_loss",
    "gap_stats",
    "grad_for_spec",
    "grad_triplet_hn",
    "grad_unified",
    "grad_vlc",
    "log1p_sum_exp",
    "loss_adaptive_margin_unified",
    "loss_triplet_hn",
    "loss_unified",
    "loss_vlc",
    "loss_vlc_pair_form",
    "loss_weighted_unified",
    "normalize_rows",
    "recall_at_k",
]
