"""Tests for synthetic data generation and the trainer."""

from dataclasses import replace

import numpy as np
import pytest
from unipair import synthlab
from unipair.core import cosine_similarity_matrix, row_norms
from unipair.errors import ConfigError, Diverged
from unipair.gradients import GradResult
from unipair.losses import LossSpec
from unipair.retrieval import GapStats, RetrievalMetrics
from unipair.synthlab import (
    ExperimentRecord,
    OptimizerSpec,
    SynthConfig,
    TrainConfig,
    early_gain,
    embed,
    epochs_to_fraction,
    fit,
    generate_synthetic_pairs,
    learning_rate_at,
    minibatches,
    run_convergence_comparison,
    run_sweep,
    split_by_index,
    subset_spec,
    train,
)

SMALL = SynthConfig(n_pairs=40, dim=8, noise_sigma=0.3, seed=1)


def small_cfg(**kwargs) -> TrainConfig:
    base = {"epochs": 3, "batch_size": 8, "learning_rate": 0.05, "loss": LossSpec(gamma=10.0)}
    return TrainConfig(**(base | kwargs))


def record(epoch: int, rsum: float) -> ExperimentRecord:
    metrics = RetrievalMetrics(0, 0, 0, 0, 0, 0, rsum=rsum, medr_i2t=1.0, medr_t2i=1.0)
    return ExperimentRecord(epoch=epoch, loss=0.0, metrics=metrics, gaps=GapStats(0.0, 0.0, 0.0))


class TestSyntheticPairs:
    def test_no_noise_means_identical_pairs(self):
        """σ = 0 puts every positive at similarity 1."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=20, dim=6, noise_sigma=0.0))
        np.testing.assert_allclose(np.diag(cosine_similarity_matrix(data.v, data.t)), 1.0, atol=1e-12)

    def test_deterministic(self):
        """The same seed draws the same data."""
        a = generate_synthetic_pairs(SMALL)
        b = generate_synthetic_pairs(SMALL)
        assert np.array_equal(a.v, b.v) and np.array_equal(a.t, b.t)

    def test_seed_changes_data(self):
        """Different seeds draw different data."""
        a = generate_synthetic_pairs(SMALL)
        b = generate_synthetic_pairs(SynthConfig(n_pairs=40, dim=8, seed=2))
        assert not np.array_equal(a.v, b.v)

    def test_positives_beat_negatives_on_average(self):
        """At σ = 0.3 the paired rows are closer than unpaired ones."""
        data = generate_synthetic_pairs(SynthConfig())
        s = cosine_similarity_matrix(data.v, data.t)
        off = s[~np.eye(256, dtype=bool)]
        assert np.diag(s).mean() > off.mean()

    @pytest.mark.parametrize("rotation", [False, True])
    def test_rows_are_unit_norm(self, rotation):
        """Both modalities come out on the sphere."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=30, dim=5, text_rotation=rotation))
        np.testing.assert_allclose(row_norms(data.v), 1.0, atol=1e-12)
        np.testing.assert_allclose(row_norms(data.t), 1.0, atol=1e-12)

    def test_split_is_eighty_twenty(self):
        """First 80% train, the rest evaluate, disjoint and complete."""
        split = split_by_index(256)
        assert len(split.train) == 204 and len(split.eval) == 52
        assert sorted(np.concatenate(split).tolist()) == list(range(256))

    def test_shared_offset_crowds_every_pair(self):
        """A long shared direction pushes unpaired similarities towards 1 as well."""
        plain = generate_synthetic_pairs(SynthConfig(text_rotation=True))
        crowded = generate_synthetic_pairs(SynthConfig(text_rotation=True, shared_offset=5.0))
        off = ~np.eye(256, dtype=bool)
        assert abs(cosine_similarity_matrix(plain.v, plain.t)[off].mean()) < 0.1
        assert cosine_similarity_matrix(crowded.v, crowded.t)[off].mean() > 0.7

    def test_shared_offset_keeps_noiseless_pairs_identical(self):
        """Both sides get the same offset, so σ = 0 still pairs each row with itself."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=20, dim=6, noise_sigma=0.0, shared_offset=3.0))
        np.testing.assert_allclose(data.v, data.t, atol=1e-12)

    def test_clusters_make_near_duplicates(self):
        """Items sharing a center are closer to each other than to the rest."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=64, n_clusters=8, cluster_spread=0.5, noise_sigma=0.0))
        s = cosine_similarity_matrix(data.v, data.v)
        same = (np.arange(64)[:, None] % 8 == np.arange(64)[None, :] % 8) & ~np.eye(64, dtype=bool)
        assert s[same].mean() > 0.7
        assert abs(s[~same & ~np.eye(64, dtype=bool)].mean()) < 0.2

    def test_every_cluster_reaches_the_eval_split(self):
        """Membership interleaves, so held-out items have near duplicates in training."""
        cfg = SynthConfig(n_clusters=32)
        split = generate_synthetic_pairs(cfg).split
        assert set(split.eval % cfg.n_clusters) <= set(split.train % cfg.n_clusters)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_pairs": 1},
            {"dim": 1},
            {"noise_sigma": -0.1},
            {"shared_offset": -1.0},
            {"shared_offset": float("nan")},
            {"n_clusters": -1},
            {"n_pairs": 4, "n_clusters": 5},
            {"cluster_spread": -0.5},
        ],
    )
    def test_invalid_config(self, kwargs):
        """Out-of-range values raise ConfigError."""
        with pytest.raises(ConfigError):
            SynthConfig(**kwargs)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"epochs": 0}, {"batch_size": 1}, {"learning_rate": -1.0}, {"eval_every": 0}, {"lr_decay": "cosine"}],
    )
    def test_invalid(self, kwargs):
        """Bad schedules are rejected naming the field."""
        with pytest.raises(ConfigError) as exc:
            TrainConfig(**kwargs)
        assert exc.value.field.startswith("train.")

    def test_unknown_optimizer(self):
        """Only the three optimizers exist."""
        with pytest.raises(ConfigError):
            OptimizerSpec(name="sgd")

    def test_adam_eps_must_be_positive(self):
        """A zero epsilon would divide by zero on a flat coordinate."""
        with pytest.raises(ConfigError) as exc:
            OptimizerSpec(name="adam", eps=0.0)
        assert exc.value.field == "train.optimizer.eps"

    def test_dict_round_trip(self):
        """to_dict output rebuilds the same config."""
        cfg = small_cfg(optimizer=OptimizerSpec(name="adam"), loss=LossSpec(kind="vlc", gamma=20.0))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        """Typos in a config are errors, not silently ignored."""
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epoch": 3})


class TestTrainer:
    def test_zero_learning_rate_freezes_metrics(self):
        """With lr = 0 every snapshot equals the first."""
        data = generate_synthetic_pairs(SMALL)
        records = train(data.v, data.t, small_cfg(learning_rate=0.0), data.split)
        assert len(records) == 4
        for r in records[1:]:
            assert r.loss == records[0].loss
            assert r.metrics == records[0].metrics
            assert r.gaps == records[0].gaps

    @pytest.mark.parametrize("optimizer", ["plain_gd", "momentum", "adam"])
    def test_deterministic(self, optimizer):
        """Same config, same seed, same records."""
        data = generate_synthetic_pairs(SMALL)
        cfg = small_cfg(optimizer=OptimizerSpec(name=optimizer), learning_rate=0.01)
        assert train(data.v, data.t, cfg, data.split) == train(data.v, data.t, cfg, data.split)

    def test_full_batch_descent_is_monotone(self):
        """Full-batch gradient descent with a small enough step lowers the loss every epoch."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=16, dim=8, seed=3))
        lr = 1.0
        for _ in range(20):
            cfg = TrainConfig(loss=LossSpec(gamma=10.0), epochs=20, batch_size=12, learning_rate=lr)
            losses = [r.loss for r in train(data.v, data.t, cfg, data.split)]
            if all(b < a for a, b in zip(losses, losses[1:])):
                break
            lr /= 2
        else:
            pytest.fail("no learning rate gave a monotone loss")
        assert losses[-1] < losses[0]

    def test_training_improves_retrieval(self):
        """A short run on clean data raises RSUM."""
        data = generate_synthetic_pairs(SynthConfig(n_pairs=80, dim=8, noise_sigma=0.2, text_rotation=True))
        cfg = TrainConfig(
            loss=LossSpec(gamma=10.0),
            epochs=20,
            batch_size=16,
            learning_rate=0.05,
            optimizer=OptimizerSpec(name="adam"),
        )
        records = train(data.v, data.t, cfg, data.split)
        assert records[-1].metrics.rsum > records[0].metrics.rsum

    def test_embeddings_stay_on_the_sphere(self):
        """Mapped rows are renormalized after every update."""
        data = generate_synthetic_pairs(SMALL)
        _, state = fit(data.v, data.t, small_cfg(), data.split)
        assert state.step > 0
        np.testing.assert_allclose(row_norms(embed(data.v, state.w_v)), 1.0, atol=1e-9)
        np.testing.assert_allclose(row_norms(embed(data.t, state.w_t)), 1.0, atol=1e-9)

    def test_snapshot_epochs(self):
        """Snapshots at 0, every eval_every epochs and the last epoch."""
        data = generate_synthetic_pairs(SMALL)
        records = train(data.v, data.t, small_cfg(epochs=5, eval_every=2), data.split)
        assert [r.epoch for r in records] == [0, 2, 4, 5]

    def test_batch_larger_than_train_split(self):
        """The batch must fit in the training split."""
        data = generate_synthetic_pairs(SMALL)
        with pytest.raises(ConfigError):
            train(data.v, data.t, small_cfg(batch_size=64), data.split)

    def test_non_finite_loss_diverges(self, monkeypatch):
        """A NaN loss stops training with Diverged."""
        data = generate_synthetic_pairs(SMALL)

        def broken(v, t, spec):
            return GradResult(loss=float("nan"), d_v=np.zeros_like(v), d_t=np.zeros_like(t))

        monkeypatch.setattr(synthlab, "grad_for_spec", broken)
        with pytest.raises(Diverged) as exc:
            train(data.v, data.t, small_cfg(), data.split)
        assert exc.value.epoch == 1 and exc.value.step == 1

    def test_item_margins_follow_the_batch(self):
        """Per-item margins are sliced to each minibatch."""
        data = generate_synthetic_pairs(SMALL)
        spec = LossSpec(kind="adaptive_margin_unified", gamma=10.0, margins=np.linspace(0.0, 0.4, 40))
        records = train(data.v, data.t, small_cfg(loss=spec), data.split)
        assert len(records) == 4
        idx = np.array([3, 7])
        np.testing.assert_array_equal(subset_spec(spec, idx).margins, spec.margins[idx])

    def test_item_weights_must_cover_every_pair(self):
        """A weight matrix smaller than the dataset is rejected."""
        data = generate_synthetic_pairs(SMALL)
        spec = LossSpec(kind="weighted_unified", gamma=10.0, weights=np.ones((8, 8)))
        with pytest.raises(ConfigError):
            train(data.v, data.t, small_cfg(loss=spec), data.split)

    def test_linear_decay_schedule(self):
        """The linear schedule starts at the full rate and stops one step short of zero."""
        cfg = small_cfg(learning_rate=0.1, lr_decay="linear")
        assert learning_rate_at(cfg, 1, 10) == 0.1
        assert learning_rate_at(cfg, 10, 10) == pytest.approx(0.01)
        assert learning_rate_at(small_cfg(learning_rate=0.1), 10, 10) == 0.1

    @pytest.mark.parametrize(("batch_size", "total"), [(8, 12), (10, 12), (31, 3)])
    def test_decay_spans_the_whole_run(self, monkeypatch, batch_size, total):
        """The last update of the run is the last step of the schedule."""
        seen = []
        schedule = synthlab.learning_rate_at

        def record_steps(cfg, step, total_steps):
            seen.append((step, total_steps))
            return schedule(cfg, step, total_steps)

        monkeypatch.setattr(synthlab, "learning_rate_at", record_steps)
        data = generate_synthetic_pairs(SMALL)
        train(data.v, data.t, small_cfg(batch_size=batch_size, lr_decay="linear"), data.split)
        assert seen[-1] == (total, total)

    def test_minibatches_drop_singletons(self):
        """Every batch has at least two items and none repeats."""
        batches = minibatches(np.random.default_rng(0), np.arange(9), 4)
        assert [len(b) for b in batches] == [4, 4]
        assert len(set(np.concatenate(batches).tolist())) == 8


class TestConvergenceSummaries:
    def test_epochs_to_fraction(self):
        """First epoch at 95% of the final RSUM."""
        records = [record(0, 100.0), record(1, 300.0), record(2, 580.0), record(3, 600.0)]
        assert epochs_to_fraction(records) == 2
        assert epochs_to_fraction(records, 0.5) == 1

    def test_early_gain(self):
        """RSUM gained up to the cutoff epoch."""
        records = [record(0, 100.0), record(2, 150.0), record(4, 400.0)]
        assert early_gain(records, upto_epoch=3) == 50.0


class TestSweepsAndComparisons:
    def test_single_value_sweep_equals_train(self):
        """A one-point sweep is a plain training run."""
        cfg = small_cfg()
        rows = run_sweep("m", [0.2], SMALL, cfg)
        data = generate_synthetic_pairs(SMALL)
        assert rows[0].value == 0.2
        assert rows[0].records == train(data.v, data.t, cfg, data.split)

    @pytest.mark.parametrize("values", [[], [0.2, 0.1]])
    def test_sweep_values_validated(self, values):
        """Sweep values must be non-empty and ascending."""
        with pytest.raises(ConfigError):
            run_sweep("gamma", values, SMALL, small_cfg())

    def test_sweep_axis_validated(self):
        """Only m and gamma can be swept."""
        with pytest.raises(ConfigError):
            run_sweep("lr", [0.1], SMALL, small_cfg())

    def test_comparison_matches_individual_runs(self):
        """Each row is the run of that loss alone, in input order."""
        cfg = small_cfg()
        losses = [LossSpec(kind="triplet_hn"), LossSpec(kind="unified", gamma=10.0)]
        rows = run_convergence_comparison(losses, SMALL, cfg)
        data = generate_synthetic_pairs(SMALL)
        assert [r.loss.kind for r in rows] == ["triplet_hn", "unified"]
        for row, spec in zip(rows, losses):
            records = train(data.v, data.t, replace(cfg, loss=spec), data.split)
            assert row.records == records
            assert row.epochs_to_target == epochs_to_fraction(records)

    def test_workers_do_not_change_results(self):
        """Threaded runs give the same rows as sequential ones."""
        losses = [LossSpec(kind="vlc", gamma=10.0), LossSpec(kind="unified", gamma=10.0)]
        one = run_convergence_comparison(losses, SMALL, small_cfg(), workers=1)
        two = run_convergence_comparison(losses, SMALL, small_cfg(), workers=2)
        assert [r.records for r in one] == [r.records for r in two]
