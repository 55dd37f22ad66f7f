import math

import numpy as np
import pytest

from speechswin import dsp, synth
from speechswin import training as T
from speechswin.autodiff import Tape, Tensor
from speechswin.model import ModelConfig, init_params

from conftest import REDUCED


def softmax_then_log(logits, labels):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    return -np.mean(np.log(p[np.arange(len(labels)), labels]))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item()
        assert abs(loss - math.log(4)) < 1e-6

    def test_confident_correct(self):
        assert T.cross_entropy(Tensor(np.array([[1e6, 0.0, 0.0, 0.0]])), [0]).item() < 1e-6

    def test_confident_wrong_is_finite(self):
        loss = T.cross_entropy(Tensor(np.array([[1e6, 0.0, 0.0, 0.0]])), [2]).item()
        assert loss == pytest.approx(1e6)

    def test_matches_two_step_oracle(self, rng):
        logits = rng.standard_normal((6, 4)) * 3
        labels = rng.integers(0, 4, 6)
        assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(softmax_then_log(logits, labels), abs=1e-12)

    def test_nonnegative_and_monotone(self):
        prev = None
        for margin in np.linspace(-5, 5, 21):
            loss = T.cross_entropy(Tensor(np.array([[margin, 0.0, 0.0]])), [0]).item()
            assert loss >= 0
            if prev is not None:
                assert loss < prev
            prev = loss

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((1, 4))), [4])


class TestAdam:
    def test_zero_gradient_is_noop(self, rng):
        params = {"w": Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True)}
        state = T.AdamState.create(params, lr=0.1)
        new, state = T.adam_step(params, {"w": np.zeros((3, 2), np.float32)}, state)
        assert new["w"].data.tobytes() == params["w"].data.tobytes()
        assert state.step == 1

    def test_first_step_is_signed_lr(self, rng):
        w0 = rng.standard_normal(5)
        g = rng.standard_normal(5)
        params = {"w": Tensor(w0, requires_grad=True)}
        new, _ = T.adam_step(params, {"w": g}, T.AdamState.create(params, lr=1e-3))
        np.testing.assert_allclose(new["w"].data - w0, -1e-3 * np.sign(g), rtol=1e-6)

    def test_inputs_not_mutated(self, rng):
        params = {"w": Tensor(rng.standard_normal(4), requires_grad=True)}
        before = params["w"].data.copy()
        state = T.AdamState.create(params)
        T.adam_step(params, {"w": np.ones(4)}, state)
        np.testing.assert_array_equal(params["w"].data, before)
        assert state.step == 0 and not state.m["w"].any()

    def test_quadratic_converges(self):
        params = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        state = T.AdamState.create(params, lr=0.1)
        for _ in range(200):
            w = params["w"]
            with Tape() as tape:
                d = w - Tensor(np.array([3.0]))
                loss = (d * d).sum()
            tape.backward(loss, [w])
            params, state = T.adam_step(params, {"w": w.grad}, state)
        assert abs(params["w"].item() - 3.0) < 1e-2

    def test_shape_mismatch(self):
        params = {"w": Tensor(np.zeros(3))}
        with pytest.raises(ValueError):
            T.adam_step(params, {"w": np.zeros(4)}, T.AdamState.create(params))


def toy_dataset(n_speakers, per_speaker=3, k=2):
    n = n_speakers * per_speaker
    return T.LabeledDataset(
        np.zeros((n, 1, 2, 2), np.float32),
        np.arange(n) % k,
        np.repeat(np.arange(n_speakers), per_speaker),
        [f"clip{i // 2}_{i // per_speaker}" for i in range(n)],
        k,
    )


class TestLoso:
    @pytest.mark.parametrize("n_speakers", [4, 10])
    def test_fold_count_and_partition(self, n_speakers):
        ds = toy_dataset(n_speakers)
        folds = T.loso_splits(ds)
        assert len(folds) == n_speakers
        tests = np.concatenate([te for _, te in folds])
        assert sorted(tests) == list(range(len(ds)))
        for spk, (tr, te) in enumerate(folds):
            assert set(ds.speakers[te]) == {spk}
            assert spk not in set(ds.speakers[tr])
            assert len(tr) + len(te) == len(ds)

    def test_single_speaker(self):
        with pytest.raises(ValueError):
            T.loso_splits(toy_dataset(1))

    def test_clip_leakage_detected(self):
        ds = toy_dataset(2)
        ds.clip_ids[0] = ds.clip_ids[-1]
        with pytest.raises(ValueError):
            T.loso_splits(ds)


class TestMetrics:
    def test_perfect(self):
        r = T.compute_metrics([[5, 0], [0, 5]])
        assert (r.war, r.uar) == (1.0, 1.0)

    def test_balanced_example(self):
        r = T.compute_metrics([[9, 1], [4, 6]])
        assert r.war == 0.75 and r.uar == 0.75

    def test_balanced_supports(self):
        r = T.compute_metrics([[8, 2], [0, 10]])
        assert r.war == 0.9 and r.uar == 0.9

    def test_skewed_supports(self):
        r = T.compute_metrics([[8, 2], [0, 90]])
        assert r.war == 0.98 and r.uar == 0.9

    def test_empty_class_skipped_in_uar(self):
        r = T.compute_metrics([[3, 1, 0], [0, 0, 0], [0, 0, 2]])
        assert r.uar == pytest.approx((0.75 + 1.0) / 2)

    def test_balanced_equality_is_exact(self, rng):
        for _ in range(200):
            k = int(rng.integers(2, 8))
            support = int(rng.integers(1, 30))
            cm = np.stack([rng.multinomial(support, np.ones(k) / k) for _ in range(k)])
            r = T.compute_metrics(cm)
            assert r.war == r.uar

    @pytest.mark.parametrize("cm", [[[0, 0], [0, 0]], [[1, -1], [0, 1]], [[1, 2, 3]]])
    def test_invalid(self, cm):
        with pytest.raises(ValueError):
            T.compute_metrics(cm)

    def test_report_text(self):
        text = T.compute_metrics([[9, 1], [4, 6]], ["a", "b"]).to_text()
        assert "WAR 0.7500" in text and "UAR 0.7500" in text


class TestVoting:
    def test_probability_averaging(self):
        probs = np.array([[0.6, 0.4], [0.2, 0.8]])
        pred, truth = T.vote_clips(probs, np.array([1, 1]), ["a", "a"])
        assert pred.tolist() == [1] and truth.tolist() == [1]

    def test_tie_goes_to_lowest_class(self):
        probs = np.array([[0.7, 0.3], [0.3, 0.7]])
        pred, _ = T.vote_clips(probs, np.array([0, 0]), ["a", "a"])
        assert pred.tolist() == [0]

    def test_clip_order_preserved(self):
        probs = np.eye(3)[[2, 0, 2, 1]]
        pred, truth = T.vote_clips(probs, np.array([2, 0, 2, 1]), ["z", "a", "z", "m"])
        assert pred.tolist() == [2, 0, 1] == truth.tolist()


def perfect_model(k):
    """Any model object; the tests below stub out its probabilities."""
    cfg = ModelConfig(**{**REDUCED, "k": k})
    return T.TrainedModel(cfg, init_params(cfg), np.zeros(cfg.f, np.float32), np.ones(cfg.f, np.float32))


class TestEvaluate:
    def test_perfect_classifier_both_modes(self, monkeypatch):
        k = 3
        model = perfect_model(k)
        labels = np.array([0, 0, 1, 1, 2, 2])
        ds = T.LabeledDataset(np.zeros((6, 1, 8, 16), np.float32), labels, np.zeros(6), ["a", "a", "b", "b", "c", "c"], k)
        monkeypatch.setattr(T, "segment_probabilities", lambda m, d, batch_size=64: np.eye(k)[d.labels])
        for vote in ("segment", "clip"):
            r = T.evaluate(model, ds, vote)
            assert r.war == r.uar == 1.0
        assert T.evaluate(model, ds, "clip").confusion.sum() == 3

    def test_row_sums_are_supports(self, rng, monkeypatch):
        k = 4
        model = perfect_model(k)
        labels = np.repeat(np.arange(k), 5)
        ds = T.LabeledDataset(np.zeros((20, 1, 8, 16), np.float32), labels, np.zeros(20), [str(i) for i in range(20)], k)
        monkeypatch.setattr(T, "segment_probabilities", lambda m, d, batch_size=64: rng.random((len(d), k)))
        r = T.evaluate(model, ds)
        assert r.confusion.sum(axis=1).tolist() == [5] * 4
        assert r.war == r.uar

    def test_unknown_vote(self):
        model = perfect_model(2)
        ds = T.LabeledDataset(np.zeros((1, 1, 8, 16), np.float32), [0], [0], ["a"], 2)
        with pytest.raises(ValueError):
            T.evaluate(model, ds, "majority")


def tiny_train_set(rng, n=12, k=3):
    feats = rng.standard_normal((n, 1, 8, 16)).astype(np.float32)
    labels = np.arange(n) % k
    return T.LabeledDataset(feats, labels, np.arange(n) % 2, [str(i) for i in range(n)], k)


class TestTrainFold:
    def test_initial_loss_near_log_k(self, rng):
        cfg = ModelConfig(**{**REDUCED, "k": 4})
        ds = tiny_train_set(rng, 16, 4)
        model = T.train_fold(ds, cfg, T.TrainHyper(epochs=1, batch_size=16, lr=1e-12))
        assert abs(model.history[0]["loss"] - math.log(4)) < 0.3

    def test_deterministic(self, rng):
        cfg = ModelConfig(**REDUCED)
        ds = tiny_train_set(rng)
        hyper = T.TrainHyper(epochs=2, batch_size=4, lr=1e-3, seed=7)
        a = T.train_fold(ds, cfg, hyper, fold=1, eval_set=ds.subset([0, 1]))
        b = T.train_fold(ds, cfg, hyper, fold=1, eval_set=ds.subset([0, 1]))
        assert a.history == b.history
        assert a.to_bytes() == b.to_bytes()
        c = T.train_fold(ds, cfg, T.TrainHyper(epochs=2, batch_size=4, lr=1e-3, seed=8), fold=1)
        assert c.to_bytes() != a.to_bytes()

    def test_log_records(self, rng):
        ds = tiny_train_set(rng)
        seen = []
        model = T.train_fold(ds, ModelConfig(**REDUCED), T.TrainHyper(epochs=2, batch_size=6), eval_set=ds, on_epoch=seen.append)
        assert [(r["epoch"], r["split"]) for r in seen] == [(0, "train"), (0, "test"), (1, "train"), (1, "test")]
        assert set(seen[0]) == {"epoch", "fold", "split", "loss", "war", "uar"}
        assert model.history == seen

    def test_loss_decreases_when_overfitting(self, rng):
        ds = tiny_train_set(rng, 6, 3)
        model = T.train_fold(ds, ModelConfig(**REDUCED), T.TrainHyper(epochs=40, batch_size=6, lr=3e-3))
        assert model.history[-1]["loss"] < 0.5 * model.history[0]["loss"]

    def test_normalizer_round_trip(self, rng, tmp_path):
        ds = tiny_train_set(rng)
        model = T.train_fold(ds, ModelConfig(**REDUCED), T.TrainHyper(epochs=1, batch_size=6))
        model.save(tmp_path / "m.bin", {"fold": 0})
        loaded, extra = T.TrainedModel.load(tmp_path / "m.bin")
        assert extra == {"fold": 0}
        assert loaded.to_bytes({"fold": 0}) == model.to_bytes({"fold": 0})
        np.testing.assert_array_equal(T.segment_probabilities(loaded, ds), T.segment_probabilities(model, ds))

    def test_feature_stats_use_training_data_only(self, rng):
        ds = tiny_train_set(rng)
        mean, std = T.feature_stats(ds.features * 2 + 5)
        assert mean.shape == std.shape == (8,)
        np.testing.assert_allclose(mean, (ds.features * 2 + 5).mean(), rtol=1e-5)
        cfg = ModelConfig(**REDUCED)
        normalized = T.TrainedModel(cfg, init_params(cfg), mean, std).normalize(ds.features * 2 + 5)
        assert abs(normalized.mean()) < 1e-5 and abs(normalized.std() - 1) < 1e-4


class TestSynth:
    def test_counts(self):
        clips = synth.synth_clips(16, 4, seed=0)
        assert len(clips) == 64
        assert sorted({c.speaker for c in clips}) == [0, 1, 2, 3]
        for c in range(4):
            assert sum(clip.label == c for clip in clips) == 16
        for spk in range(4):
            assert sum(clip.speaker == spk for clip in clips) == 16

    def test_seeded(self):
        a = synth.synth_clips(2, 2, seed=3)
        b = synth.synth_clips(2, 2, seed=3)
        assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))
        assert synth.synth_clips(2, 2, seed=4)[0].samples.tobytes() != a[0].samples.tobytes()

    def test_k_range(self):
        with pytest.raises(ValueError):
            synth.synth_clips(1, 9)

    def test_dominant_band(self):
        fb = dsp.mel_filterbank()
        for clip in synth.synth_clips(1, 4, seed=0):
            lm = dsp.log_mel_frames(dsp.AudioClip(clip.samples))
            expected = np.argmin(np.abs(fb.center_hz - synth.class_frequency(clip.label)))
            assert np.bincount(lm.argmax(axis=1)).argmax() == expected

    def test_nearest_centroid_separates_speakers(self):
        clips = synth.synth_clips(16, 4, seed=0)
        feats, labels, spk, cids = [], [], [], []
        for c in clips:
            for seg in dsp.extract_segments(dsp.AudioClip(c.samples)):
                feats.append(seg)
                labels.append(c.label)
                spk.append(c.speaker)
                cids.append(c.clip_id)
        ds = T.LabeledDataset(np.stack(feats), labels, spk, cids, 4)
        assert len(ds) == 128
        for tr, te in T.loso_splits(ds):
            assert T.nearest_centroid_accuracy(ds.subset(tr), ds.subset(te)) == 1.0
