import csv

import numpy as np
import pytest
from helpers import color_toy, pixel_model, random_bank, random_dataset, small_model

from fcnbnl import nbnl, training
from fcnbnl.fcn import pyramid_batch
from fcnbnl.nbnl import NbnlConfig
from fcnbnl.training import TrainingConfig, TrainingDiverged


class TestConfig:
    def test_schedule(self):
        cfg = TrainingConfig(epochs=30, learning_rate=0.1, lr_drop_epochs=(10, 20))
        assert [cfg.lr_at(e) for e in (0, 9)] == [0.1, 0.1]
        assert cfg.lr_at(10) == pytest.approx(0.01, rel=1e-12)
        assert cfg.lr_at(19) == pytest.approx(0.01, rel=1e-12)
        assert cfg.lr_at(20) == pytest.approx(0.001, rel=1e-12)
        assert cfg.lr_at(29) == pytest.approx(0.001, rel=1e-12)

    def test_default_drops(self):
        assert TrainingConfig(epochs=20).drops == (10, 15)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"lr_drop_epochs": (5, 2)},
            {"lr_drop_epochs": (1, 2, 3)},
            {"learning_rate": -1.0},
            {"batch_size": 0},
            {"lr_drop_factor": 0.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainingConfig(**kwargs)


class TestTrain:
    def test_zero_lr_is_null_step(self, rng):
        ds = random_dataset(rng)
        model = small_model()
        bank = random_bank(rng, 2, 2, 8)
        trained, tbank, history = training.train(model, bank, ds, TrainingConfig(epochs=2, learning_rate=0.0))
        for name, p in model.parameters().items():
            assert np.array_equal(trained.parameters()[name], p), name
        assert np.array_equal(tbank.W, bank.W)
        assert len(history) == 2

    def test_inputs_untouched(self, rng):
        ds = random_dataset(rng)
        model, bank = small_model(), random_bank(rng, 2, 2, 8)
        before = {n: p.copy() for n, p in model.parameters().items()}
        W = bank.W.copy()
        training.train(model, bank, ds, TrainingConfig(epochs=1, learning_rate=0.1))
        assert all(np.array_equal(before[n], p) for n, p in model.parameters().items())
        assert np.array_equal(W, bank.W)

    def test_separable_toy_frozen_extractor(self, rng):
        ds = color_toy(rng)
        model = pixel_model()
        bank = random_bank(rng, 2, 2, 3)
        cfg = TrainingConfig(epochs=50, batch_size=4, learning_rate=1.0, fine_tune_last_n_layers=0)
        trained, tbank, _ = training.train(model, bank, ds, cfg)
        assert np.array_equal(trained.weights[0], model.weights[0])
        assert training.evaluate(trained, tbank, ds).accuracy == 1.0

    def test_fine_tune_mask(self, rng):
        ds = random_dataset(rng)
        model = small_model()
        cfg = TrainingConfig(epochs=1, learning_rate=0.5, fine_tune_last_n_layers=2)
        trained, _, _ = training.train(model, random_bank(rng, 2, 2, 8), ds, cfg)
        assert np.array_equal(trained.weights[0], model.weights[0])
        assert not np.array_equal(trained.weights[2], model.weights[2])

    def test_prototypes_stay_in_ball(self, rng):
        ds = random_dataset(rng)
        norms = []
        model, bank = small_model(), random_bank(rng, 2, 3, 8)
        cfg = TrainingConfig(epochs=1, batch_size=2, learning_rate=50.0)
        scaled = pyramid_batch(ds.images, model)
        for start in range(0, len(ds), 2):
            idx = np.arange(start, start + 2)
            _, grads, gW = training.batch_loss_and_grads(
                model, bank, [s[idx] for s in scaled], np.asarray(ds.labels)[idx]
            )
            training.sgd_step(model, bank, grads, gW, cfg.learning_rate, cfg)
            norms.append(np.linalg.norm(bank.W, axis=-1).max())
        assert max(norms) <= 1 + 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_small_step_decreases_loss(self, seed):
        r = np.random.default_rng(seed)
        ds = random_dataset(r, k=3, per_class=2)
        model = small_model(seed)
        bank = training.initial_bank(model, ds, NbnlConfig(k=3, p=2, q=10.0), r)
        cfg = TrainingConfig(epochs=1, learning_rate=1e-4)
        scaled = pyramid_batch(ds.images, model)
        labels = np.asarray(ds.labels)
        before, grads, gW = training.batch_loss_and_grads(model, bank, scaled, labels)
        training.sgd_step(model, bank, grads, gW, cfg.learning_rate, cfg)
        after, _, _ = training.batch_loss_and_grads(model, bank, scaled, labels)
        assert before - after > 0

    def test_divergence_guard(self, rng):
        ds = random_dataset(rng)
        model, bank = small_model(), random_bank(rng, 2, 2, 8)
        bank.W[0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="batch 0"):
            training.train(model, bank, ds, TrainingConfig(epochs=1))

    def test_class_count_mismatch(self, rng):
        with pytest.raises(ValueError, match="classes"):
            training.train(
                small_model(), random_bank(rng, 3, 2, 8), random_dataset(rng), TrainingConfig(epochs=1)
            )

    def test_deterministic(self, rng):
        ds = random_dataset(rng)
        model, bank = small_model(dtype=np.float32), random_bank(rng, 2, 2, 8, dtype=np.float32)
        cfg = TrainingConfig(epochs=2, batch_size=3, rgb_jitter=True, seed=5)
        a = training.train(model, bank, ds, cfg)
        b = training.train(model, bank, ds, cfg)
        assert all(np.array_equal(a[0].parameters()[n], b[0].parameters()[n]) for n in model.parameters())
        assert np.array_equal(a[1].W, b[1].W)
        assert [h.loss for h in a[2]] == [h.loss for h in b[2]]

    def test_history_csv(self, tmp_path):
        rows = [training.HistoryRow(0, 0.5, 0.1), training.HistoryRow(1, 0.25, 0.01)]
        training.write_history_csv(rows, tmp_path / "h.csv")
        with open(tmp_path / "h.csv") as fh:
            got = list(csv.reader(fh))
        assert got == [["epoch", "loss", "lr"], ["0", "0.5", "0.1"], ["1", "0.25", "0.01"]]


class TestEvaluate:
    def test_perfect(self):
        rep = training.report_from_predictions([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert rep.accuracy == 1.0
        assert np.array_equal(rep.confusion, np.diag([1, 2, 1]))

    def test_constant(self):
        rep = training.report_from_predictions([0, 1, 2, 1], [2, 2, 2, 2], 3)
        assert np.count_nonzero(rep.confusion.sum(axis=0)) == 1
        assert rep.accuracy == 0.25

    def test_invariants(self, rng):
        truth, pred = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        rep = training.report_from_predictions(truth, pred, 4)
        assert np.array_equal(rep.confusion.sum(axis=1), np.bincount(truth, minlength=4))
        assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / 50)
        assert rep.accuracy == pytest.approx(np.mean(truth == pred))

    def test_evaluate_matches_per_image_argmax(self, rng):
        ds = random_dataset(rng, k=3, per_class=3)
        model = small_model(factors=(1.0, 1.5))
        bank = random_bank(rng, 3, 2, 8)
        rep = training.evaluate(model, bank, ds, batch_size=4)
        from fcnbnl.fcn import multiscale_descriptors

        expected = [nbnl.classify_nbnl(multiscale_descriptors(model, img), bank) for img in ds.images]
        assert rep.predictions.tolist() == expected
        assert rep == training.evaluate(model, bank, ds)
        assert rep.descriptors_per_second > 0

    def test_descriptor_scaling_keeps_labels(self, rng):
        ds = random_dataset(rng, k=3, per_class=2)
        model, bank = small_model(), random_bank(rng, 3, 2, 8)
        scaled = pyramid_batch(ds.images, model)
        from fcnbnl.fcn import multiscale_forward

        outs, _ = multiscale_forward(model, scaled)
        base = np.argmax(nbnl.batch_likelihoods(outs, bank), axis=1)
        for alpha in (0.01, 3.0, 100.0):
            assert np.array_equal(
                np.argmax(nbnl.batch_likelihoods([alpha * o for o in outs], bank), axis=1), base
            )

    def test_label_out_of_range(self, rng):
        ds = random_dataset(rng, k=3, per_class=2)
        with pytest.raises(ValueError, match="outside"):
            training.evaluate(small_model(), random_bank(rng, 2, 2, 8), ds)

    def test_confusion_csv(self, tmp_path):
        rep = training.report_from_predictions([0, 1, 1], [0, 0, 1], 2)
        training.write_report(rep, tmp_path, "x")
        with open(tmp_path / "x_confusion.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["label_true", "label_pred", "count"]
        assert rows[1:] == [["0", "0", "1"], ["0", "1", "0"], ["1", "0", "1"], ["1", "1", "1"]]
