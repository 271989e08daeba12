"""
Synthetic cross-modal data and a deterministic trainer.

The paired data is a latent unit vector per item seen through two noisy
"modalities". Training learns one linear map per modality, initialised at
the identity, so the evaluation split moves with the training split and
retrieval on held-out items measures what the loss taught the maps.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, NamedTuple

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from unipair.core import EmbeddingBatch, as_matrix, cosine_similarity_matrix, normalize_rows
from unipair.errors import ConfigError, Diverged, ShapeMismatch
from unipair.gradients import grad_for_spec
from unipair.losses import LossSpec, evaluate_loss
from unipair.retrieval import GapStats, RetrievalMetrics, evaluate, gap_stats

logger = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SynthConfig:
    """Size, structure, noise and seed of a synthetic paired dataset."""

    n_pairs: int = 256
    dim: int = 32
    noise_sigma: float = 0.3
    seed: int = 0
    text_rotation: bool = False
    shared_offset: float = 0.0
    n_clusters: int = 0
    cluster_spread: float = 1.0

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError("synth.n_pairs", f"must be >= 2, got {self.n_pairs}")
        if self.dim < 2:
            raise ConfigError("synth.dim", f"must be >= 2, got {self.dim}")
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma", f"must be >= 0, got {self.noise_sigma}")
        if not math.isfinite(self.shared_offset) or self.shared_offset < 0:
            raise ConfigError("synth.shared_offset", f"must be >= 0, got {self.shared_offset}")
        if not 0 <= self.n_clusters <= self.n_pairs:
            raise ConfigError("synth.n_clusters", f"must be in [0, {self.n_pairs}], got {self.n_clusters}")
        if not math.isfinite(self.cluster_spread) or self.cluster_spread < 0:
            raise ConfigError("synth.cluster_spread", f"must be >= 0, got {self.cluster_spread}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("synth", f"unknown keys {sorted(unknown)}")
        return cls(**data)


class Split(NamedTuple):
    train: npt.NDArray[np.intp]
    eval: npt.NDArray[np.intp]


class SyntheticPairs(NamedTuple):
    v: EmbeddingBatch
    t: EmbeddingBatch
    split: Split


def split_by_index(n: int, fraction: float = TRAIN_FRACTION) -> Split:
    """First `fraction` of the items train, the rest evaluate; both sides keep at least one item."""
    n_train = min(max(int(n * fraction), 1), n - 1)
    return Split(train=np.arange(n_train), eval=np.arange(n_train, n))


def generate_synthetic_pairs(cfg: SynthConfig) -> SyntheticPairs:
    """
    Draw paired embeddings around shared latent unit vectors.

    v_i = normalize(latent_i + σ·noise) and t_i = normalize(latent_i + σ·noise')
    with independent isotropic gaussian noise of expected squared length σ²,
    so the same σ corrupts any dimension equally.

    With `n_clusters` the latents are spread around that many random unit
    centers, item i belonging to center i mod `n_clusters`, which leaves
    near-duplicate items in both splits. With `text_rotation` the text side
    sees the latents through a random orthogonal map. A nonzero
    `shared_offset` adds that multiple of one random unit direction to every
    row of both sides before normalizing, so at the identity maps every
    similarity, positive or not, starts close to 1.

    Deterministic given the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.n_pairs, cfg.dim)
    if cfg.n_clusters:
        centers = normalize_rows(rng.standard_normal((cfg.n_clusters, cfg.dim)))
        members = centers[np.arange(cfg.n_pairs) % cfg.n_clusters]
        latent = normalize_rows(members + cfg.cluster_spread / math.sqrt(cfg.dim) * rng.standard_normal(shape))
    else:
        latent = normalize_rows(rng.standard_normal(shape))
    text_latent = latent
    if cfg.text_rotation:
        q, r = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
        text_latent = latent @ (q * np.sign(np.diag(r)))
    scale = cfg.noise_sigma / math.sqrt(cfg.dim)
    v = latent + scale * rng.standard_normal(shape)
    t = text_latent + scale * rng.standard_normal(shape)
    if cfg.shared_offset > 0:
        offset = cfg.shared_offset * normalize_rows(rng.standard_normal((1, cfg.dim)))
        v = v + offset
        t = t + offset
    return SyntheticPairs(v=normalize_rows(v), t=normalize_rows(t), split=split_by_index(cfg.n_pairs))


@dataclass(frozen=True)
class OptimizerSpec:
    """Plain gradient descent, heavy-ball momentum, or Adam."""

    name: Literal["plain_gd", "momentum", "adam"] = "plain_gd"
    beta: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("plain_gd", "momentum", "adam"):
            raise ConfigError("train.optimizer.name", f"unknown optimizer {self.name!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("train.optimizer.beta", f"must be in [0, 1), got {self.beta}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("train.optimizer.beta2", f"must be in [0, 1), got {self.beta2}")
        if not self.eps > 0:
            raise ConfigError("train.optimizer.eps", f"must be > 0, got {self.eps}")


@dataclass(frozen=True)
class TrainConfig:
    """Loss, schedule and optimizer of one training run."""

    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.5
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0
    eval_every: int = 1
    lr_decay: Literal["constant", "linear"] = "constant"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size", f"must be >= 2, got {self.batch_size}")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError("train.learning_rate", f"must be >= 0, got {self.learning_rate}")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every", f"must be >= 1, got {self.eval_every}")
        if self.lr_decay not in ("constant", "linear"):
            raise ConfigError("train.lr_decay", f"must be 'constant' or 'linear', got {self.lr_decay!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = self.loss.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("train", f"unknown keys {sorted(unknown)}")
        data = dict(data)
        if "loss" in data:
            data["loss"] = LossSpec.from_dict(data["loss"])
        if "optimizer" in data:
            data["optimizer"] = OptimizerSpec(**data["optimizer"])
        return cls(**data)


@dataclass
class TrainState:
    """
    Mutable state of a run.

    `w_v` and `w_t` are the per-modality linear maps; embeddings are the
    input rows mapped through them and normalized on use.
    """

    w_v: npt.NDArray[np.float64]
    w_t: npt.NDArray[np.float64]
    buffers: dict[str, npt.NDArray[np.float64]]
    epoch: int
    step: int
    rng: np.random.Generator


@dataclass(frozen=True)
class ExperimentRecord:
    """One snapshot: training loss per anchor, held-out retrieval metrics and similarity gaps."""

    epoch: int
    loss: float
    metrics: RetrievalMetrics
    gaps: GapStats


def embed(x: npt.NDArray[np.float64], w: npt.NDArray[np.float64]) -> EmbeddingBatch:
    """Map input rows through `w` and project them onto the unit hypersphere."""
    return normalize_rows(x @ w)


def subset_spec(spec: LossSpec, idx: npt.NDArray[np.intp]) -> LossSpec:
    """Restrict item-indexed weights or margins to the rows in `idx`."""
    if spec.weights is None and spec.margins is None:
        return spec
    return replace(
        spec,
        weights=None if spec.weights is None else spec.weights[np.ix_(idx, idx)],
        margins=None if spec.margins is None else spec.margins[idx],
    )


def _check_item_arrays(spec: LossSpec, n: int):
    if spec.weights is not None and spec.weights.shape != (n, n):
        raise ConfigError("loss.weights", f"training needs an {n}×{n} item weight matrix, got {spec.weights.shape}")
    if spec.margins is not None and spec.margins.shape != (n,):
        raise ConfigError("loss.margins", f"training needs {n} item margins, got {spec.margins.shape[0]}")


def _snapshot(v0, t0, state: TrainState, split: Split, spec: LossSpec) -> ExperimentRecord:
    tr, ev = split
    s_train = cosine_similarity_matrix(embed(v0[tr], state.w_v), embed(t0[tr], state.w_t))
    loss = evaluate_loss(s_train, subset_spec(spec, tr)).total / len(tr)
    if not math.isfinite(loss):
        raise Diverged(state.epoch, state.step, loss)
    s_eval = cosine_similarity_matrix(embed(v0[ev], state.w_v), embed(t0[ev], state.w_t))
    record = ExperimentRecord(epoch=state.epoch, loss=loss, metrics=evaluate(s_eval), gaps=gap_stats(s_eval))
    logger.info(
        "epoch %d loss %.6f rsum %.2f gap %.4f", record.epoch, record.loss, record.metrics.rsum, record.gaps.gap
    )
    return record


def learning_rate_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Step size for the 1-based `step`; the linear schedule falls towards 0 at `total_steps`."""
    if cfg.lr_decay == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - (step - 1) / total_steps)


def _apply(state: TrainState, name: str, param, grad, cfg: TrainConfig, lr: float):
    opt = cfg.optimizer
    if opt.name == "plain_gd":
        param -= lr * grad
    elif opt.name == "momentum":
        buf = state.buffers.setdefault(name, np.zeros_like(param))
        buf *= opt.beta
        buf += grad
        param -= lr * buf
    else:
        m = state.buffers.setdefault(name + ".m", np.zeros_like(param))
        v = state.buffers.setdefault(name + ".v", np.zeros_like(param))
        m *= opt.beta
        m += (1.0 - opt.beta) * grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * grad * grad
        m_hat = m / (1.0 - opt.beta**state.step)
        v_hat = v / (1.0 - opt.beta2**state.step)
        param -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def minibatches(rng: np.random.Generator, items: npt.NDArray[np.intp], size: int) -> list[npt.NDArray[np.intp]]:
    """Seeded shuffle of `items` cut into batches of `size`; a trailing single item is dropped."""
    order = rng.permutation(items)
    batches = [order[i : i + size] for i in range(0, len(order), size)]
    return [b for b in batches if len(b) >= 2]


def fit(
    v0: EmbeddingBatch, t0: EmbeddingBatch, cfg: TrainConfig, split: Split | None = None, progress: bool = False
) -> tuple[list[ExperimentRecord], TrainState]:
    """
    Train and return every snapshot together with the final state.

    Snapshots are taken before the first step (epoch 0), every `eval_every`
    epochs and after the last epoch.

    Raises:
        Diverged: if the loss or a parameter stops being finite
    """
    v0 = as_matrix(v0, "v0")
    t0 = as_matrix(t0, "t0")
    if v0.shape != t0.shape:
        raise ShapeMismatch("training batches", v0.shape, t0.shape)
    n, d = v0.shape
    split = split if split is not None else split_by_index(n)
    if cfg.batch_size > len(split.train):
        raise ConfigError("train.batch_size", f"must be <= {len(split.train)} training pairs, got {cfg.batch_size}")
    _check_item_arrays(cfg.loss, n)

    state = TrainState(
        w_v=np.eye(d), w_t=np.eye(d), buffers={}, epoch=0, step=0, rng=np.random.default_rng(cfg.seed)
    )
    records = [_snapshot(v0, t0, state, split, cfg.loss)]
    full, rest = divmod(len(split.train), cfg.batch_size)
    total_steps = cfg.epochs * (full + (rest >= 2))
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not progress):
        state.epoch = epoch
        for idx in minibatches(state.rng, split.train, cfg.batch_size):
            state.step += 1
            xv, xt = v0[idx], t0[idx]
            ev, et = xv @ state.w_v, xt @ state.w_t
            if not (np.all(np.isfinite(ev)) and np.all(np.isfinite(et))):
                raise Diverged(epoch, state.step, float("nan"))
            result = grad_for_spec(ev, et, subset_spec(cfg.loss, idx))
            if not math.isfinite(result.loss):
                raise Diverged(epoch, state.step, result.loss)
            scale = 1.0 / len(idx)
            lr = learning_rate_at(cfg, state.step, total_steps)
            _apply(state, "w_v", state.w_v, scale * (xv.T @ result.d_v), cfg, lr)
            _apply(state, "w_t", state.w_t, scale * (xt.T @ result.d_t), cfg, lr)
            if not (np.all(np.isfinite(state.w_v)) and np.all(np.isfinite(state.w_t))):
                raise Diverged(epoch, state.step, float("nan"))
            logger.debug("epoch %d step %d batch loss %.6f", epoch, state.step, result.loss * scale)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            records.append(_snapshot(v0, t0, state, split, cfg.loss))
    return records, state


def train(
    v0: EmbeddingBatch, t0: EmbeddingBatch, cfg: TrainConfig, split: Split | None = None, progress: bool = False
) -> list[ExperimentRecord]:
    """
    Minibatch training of the per-modality maps on the chosen loss.

    The i-th visual row is always paired with the i-th text row. Without
    `split` the first 80% of the rows train and the rest evaluate.
    """
    return fit(v0, t0, cfg, split, progress)[0]


def epochs_to_fraction(records: list[ExperimentRecord], fraction: float = 0.95) -> int:
    """First snapshot epoch whose RSUM reaches `fraction` of the final RSUM."""
    target = fraction * records[-1].metrics.rsum
    return next(r.epoch for r in records if r.metrics.rsum >= target)


def early_gain(records: list[ExperimentRecord], upto_epoch: int = 3) -> float:
    """RSUM improvement from the first snapshot to the last one at or before `upto_epoch`."""
    early = [r for r in records if r.epoch <= upto_epoch]
    return early[-1].metrics.rsum - records[0].metrics.rsum


@dataclass(frozen=True)
class ComparisonRow:
    loss: LossSpec
    records: list[ExperimentRecord]
    epochs_to_target: int
    early_gain: float

    @property
    def final(self) -> ExperimentRecord:
        return self.records[-1]


def _run_all(jobs, workers: int, progress: bool, desc: str):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(lambda job: job(), jobs), total=len(jobs), desc=desc, disable=not progress))
    return [job() for job in tqdm(jobs, desc=desc, disable=not progress)]


def run_convergence_comparison(
    losses: list[LossSpec],
    synth: SynthConfig,
    cfg: TrainConfig,
    fraction: float = 0.95,
    upto_epoch: int = 3,
    workers: int = 1,
    progress: bool = False,
) -> list[ComparisonRow]:
    """
    Train the same data from the same start with each loss.

    Returns one row per loss, in input order, with its snapshots, the epoch
    at which it first reached `fraction` of its own final RSUM, and its RSUM
    gain over the first `upto_epoch` epochs.
    """
    data = generate_synthetic_pairs(synth)

    def job(spec):
        def run():
            logger.info("training %s", spec.kind)
            return train(data.v, data.t, replace(cfg, loss=spec), data.split)

        return run

    results = _run_all([job(spec) for spec in losses], workers, progress, "losses")
    return [
        ComparisonRow(
            loss=spec,
            records=records,
            epochs_to_target=epochs_to_fraction(records, fraction),
            early_gain=early_gain(records, upto_epoch),
        )
        for spec, records in zip(losses, results)
    ]


@dataclass(frozen=True)
class SweepRow:
    value: float
    records: list[ExperimentRecord]

    @property
    def final(self) -> ExperimentRecord:
        return self.records[-1]


def run_sweep(
    axis: Literal["m", "gamma"],
    values: list[float],
    synth: SynthConfig,
    cfg: TrainConfig,
    workers: int = 1,
    progress: bool = False,
) -> list[SweepRow]:
    """
    Retrain with the margin or the scale set to each value in turn.

    Data, initialisation and seed are shared by every point.
    """
    if axis not in ("m", "gamma"):
        raise ConfigError("axis", f"must be 'm' or 'gamma', got {axis!r}")
    if not values:
        raise ConfigError("values", "need at least one sweep value")
    if list(values) != sorted(values):
        raise ConfigError("values", f"must be sorted ascending, got {list(values)}")
    data = generate_synthetic_pairs(synth)
    key = "margin" if axis == "m" else "gamma"

    def job(value):
        def run():
            logger.info("sweep %s=%g", axis, value)
            return train(data.v, data.t, replace(cfg, loss=replace(cfg.loss, **{key: value})), data.split)

        return run

    results = _run_all([job(value) for value in values], workers, progress, f"{axis} sweep")
    return [SweepRow(value=float(value), records=records) for value, records in zip(values, results)]
