"""Optimizer, schedule, metrics, selection, early stopping, persistence."""

import numpy as np
import pytest

from cmhl import tensor as T
from cmhl import training
from cmhl.affect import LossWeights
from cmhl.data import LabeledExample, build_vocab
from cmhl.encoder import EncoderConfig
from cmhl.errors import ConfigError, DataError, NumericError
from cmhl.heads import EmotionModel
from cmhl.training import (
    AdamW,
    Checkpoint,
    Metrics,
    TrainConfig,
    adamw_step,
    combined_score,
    evaluate,
    load_checkpoint,
    lr_at,
    model_from_checkpoint,
    save_checkpoint,
    select_checkpoint,
    train,
    write_metrics_csv,
)

from conftest import synthetic_emotion_examples


def scalar_state():
    return {"step": 0, "m": {"x": np.zeros(())}, "v": {"x": np.zeros(())}}


class TestAdamW:
    def test_zero_gradient_zero_decay_leaves_params(self):
        p = {"x": np.array(1.5)}
        adamw_step(p, {"x": np.zeros(())}, scalar_state(), lr_t=1e-3, decay=0.0)
        assert p["x"] == pytest.approx(1.5)

    def test_first_step_magnitude_matches_lr(self):
        p = {"x": np.array(0.0)}
        adamw_step(p, {"x": np.array(1.0)}, scalar_state(), lr_t=1e-3, decay=0.0)
        # bias-corrected m_hat / sqrt(v_hat) equals 1 on the first step
        assert abs(p["x"]) == pytest.approx(1e-3, rel=1e-6)

    def test_decoupled_decay_pure_shrink(self):
        p = {"x": np.array(2.0)}
        adamw_step(p, {"x": np.zeros(())}, scalar_state(), lr_t=0.1, decay=0.5)
        assert p["x"] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_nan_gradient_aborts_with_name(self):
        p = {"x": np.array(0.0)}
        with pytest.raises(NumericError, match="x"):
            adamw_step(p, {"x": np.array(np.nan)}, scalar_state(), lr_t=1e-3, decay=0.0)

    def test_wrapper_consumes_tensor_grads(self):
        t = T.tensor(1.0, requires_grad=True)
        opt = AdamW({"w": t}, weight_decay=0.0)
        T.backward(t * t)
        opt.step(1e-2)
        opt.zero_grad()
        assert t.item() != 1.0
        assert t.grad is None


class TestLrSchedule:
    def test_step_zero_is_zero(self):
        assert lr_at(0, 1000, 100, 2e-5) == 0.0

    def test_ramp_apex(self):
        assert lr_at(100, 1000, 100, 2e-5) == pytest.approx(2e-5)

    def test_halfway_down_decay(self):
        assert lr_at(550, 1000, 100, 2e-5) == pytest.approx(1e-5)

    def test_warmup_must_be_shorter_than_run(self):
        with pytest.raises(ConfigError):
            lr_at(0, 100, 100, 1e-3)

    def test_zero_warmup_starts_at_peak(self):
        assert lr_at(0, 100, 0, 1e-3) == pytest.approx(1e-3)

    def test_piecewise_linear_continuity(self):
        total, warmup, lr = 250, 40, 3e-4
        bound = lr / min(warmup, total - warmup) + 1e-15
        values = [lr_at(s, total, warmup, lr) for s in range(total + 1)]
        for a, b in zip(values, values[1:]):
            assert abs(b - a) <= bound


class StubModel:
    """Returns pre-set probability rows in corpus order."""

    task = "emotion"

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)
        self.cursor = 0

    @property
    def num_primary_classes(self):
        return self.probs.shape[1]

    def forward(self, batch, training=False, rng=None):
        rows = self.probs[self.cursor : self.cursor + len(batch)]
        self.cursor += len(batch)
        return rows

    def primary_probs(self, preds):
        return T.tensor(preds)


def stub_examples(labels):
    return [LabeledExample(text=f"t{i}", emotion=int(y)) for i, y in enumerate(labels)]


def stub_vocab():
    return build_vocab([LabeledExample(text="t0 t1 t2 t3", emotion=0)], min_freq=1)


class TestEvaluate:
    config = TrainConfig(batch_size=4, epochs=1)

    def test_perfect_predictions(self):
        model = StubModel([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.3, 0.7]])
        metrics = evaluate(model, stub_examples([0, 0, 1, 1]), stub_vocab(), self.config)
        assert metrics.macro_f1 == 1.0
        assert metrics.macro_recall == 1.0
        assert metrics.per_class_recall == (1.0, 1.0)

    def test_symmetric_confusion_gives_half(self):
        # TP=1, FP=1, FN=1, TN=1 per class
        model = StubModel([[0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.1, 0.9]])
        metrics = evaluate(model, stub_examples([0, 0, 1, 1]), stub_vocab(), self.config)
        assert metrics.macro_f1 == pytest.approx(0.5)

    def test_mean_confidence(self):
        model = StubModel([[0.9, 0.1], [0.3, 0.7]])
        metrics = evaluate(model, stub_examples([0, 1]), stub_vocab(), self.config)
        assert metrics.mean_confidence == pytest.approx(0.8)
        assert metrics.combined_score == pytest.approx(0.7 * 1.0 + 0.3 * 0.8)

    def test_empty_set_rejected(self):
        with pytest.raises(DataError):
            evaluate(StubModel([[1.0, 0.0]]), [], stub_vocab(), self.config)

    def test_combined_score_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            f1, conf = rng.random(), rng.random()
            assert 0.0 <= combined_score(f1, conf) <= 1.0


def metrics_row(f1, conf):
    return Metrics(
        macro_f1=f1,
        per_class_recall=(f1,),
        macro_recall=f1,
        mean_confidence=conf,
        combined_score=combined_score(f1, conf),
    )


class TestSelectCheckpoint:
    def test_weighted_sum_value(self):
        assert combined_score(0.9, 0.8) == pytest.approx(0.87)

    def test_single_entry(self):
        assert select_checkpoint([metrics_row(1.0, 1.0)]) == 0

    def test_confident_model_wins(self):
        history = [metrics_row(0.92, 0.60), metrics_row(0.88, 0.95)]
        assert history[0].combined_score == pytest.approx(0.824)
        assert history[1].combined_score == pytest.approx(0.901)
        assert select_checkpoint(history) == 1

    def test_tie_breaks_earliest(self):
        history = [metrics_row(0.8, 0.8), metrics_row(0.8, 0.8)]
        assert select_checkpoint(history) == 0

    def test_selector_is_argmax_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            history = [metrics_row(rng.random(), rng.random()) for _ in range(rng.integers(1, 12))]
            idx = select_checkpoint(history)
            best = max(m.combined_score for m in history)
            assert history[idx].combined_score == best
            assert all(m.combined_score < best for m in history[:idx])

    def test_empty_history_rejected(self):
        with pytest.raises(DataError):
            select_checkpoint([])


def tiny_model_and_corpus(default_schema, n=32, seed=0):
    examples = synthetic_emotion_examples(n, seed, default_schema)
    vocab = build_vocab(examples, min_freq=1)
    cfg = EncoderConfig(layers=1, heads=2, hidden=8, ffn_dim=16, max_positions=16, dropout=0.0)
    model = EmotionModel.build(cfg, len(vocab), default_schema, LossWeights(), seed=seed)
    return model, vocab, examples


class TestTrainLoop:
    def test_fixed_seed_reproducible(self, default_schema):
        losses = []
        for _ in range(2):
            model, vocab, examples = tiny_model_and_corpus(default_schema)
            config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=2,
                                 warmup=0.1, seed=3, dropout=0.0, max_seq_len=16)
            result = train(model, vocab, examples, config)
            losses.append(result.epoch_losses)
        assert losses[0] == losses[1]

    def test_early_stopping_walkthrough(self, default_schema, monkeypatch):
        scores = iter([0.5, 0.6, 0.59, 0.58, 0.57, 0.99])
        monkeypatch.setattr(
            training, "evaluate", lambda *a, **k: metrics_row(next(scores), 0.0)
        )
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=16)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=10,
                             warmup=0, early_stop_patience=3, seed=0, dropout=0.0,
                             max_seq_len=16)
        result = train(model, vocab, examples, config)
        assert len(result.history) == 5
        assert result.best_index == 1
        assert result.stopped_early

    def test_early_stop_needs_patience_plus_one_evals(self, default_schema, monkeypatch):
        # strictly decreasing scores: earliest possible stop is patience + 1 epochs
        scores = iter([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
        monkeypatch.setattr(
            training, "evaluate", lambda *a, **k: metrics_row(next(scores), 0.0)
        )
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=16)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=6,
                             warmup=0, early_stop_patience=2, seed=0, dropout=0.0,
                             max_seq_len=16)
        result = train(model, vocab, examples, config)
        assert len(result.history) == 3
        assert result.stopped_early

    def test_accumulation_matches_large_batch(self, default_schema):
        """batch 8 x accum 2 tracks batch 16 x accum 1 step for step."""
        n_examples, steps = 64, 4
        trajectories = []
        for batch_size, accum in ((8, 2), (16, 1)):
            model, vocab, examples = tiny_model_and_corpus(default_schema, n=n_examples, seed=5)
            config = TrainConfig(
                batch_size=batch_size, grad_accumulation_steps=accum, epochs=1,
                warmup=0, seed=5, dropout=0.0, max_seq_len=16,
            )
            snaps = []
            train(model, vocab, examples, config, validation=examples[:8],
                  step_callback=lambda s, p: snaps.append({k: v.data.copy() for k, v in p.items()}))
            trajectories.append(snaps)
        a, b = trajectories
        assert len(a) == len(b) == steps
        for step in range(steps):
            for name in a[step]:
                np.testing.assert_allclose(a[step][name], b[step][name], atol=1e-9, err_msg=name)

    def test_divergence_reports_last_good_epoch(self, default_schema, monkeypatch):
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=16)
        poisoned = T.tensor(float("nan"))
        monkeypatch.setattr(model, "loss", lambda preds, batch: poisoned, raising=False)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=2,
                             warmup=0, seed=0, dropout=0.0, max_seq_len=16)
        with pytest.raises(NumericError, match="last completed epoch: 0"):
            train(model, vocab, examples, config)

    def test_best_index_matches_selector(self, default_schema):
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=24, seed=4)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=3,
                             warmup=0, seed=4, dropout=0.0, max_seq_len=16)
        result = train(model, vocab, examples, config)
        assert result.best_index == select_checkpoint(result.history)

    def test_preset_values_pinned(self):
        emotion = TrainConfig.emotion_preset()
        assert (emotion.learning_rate, emotion.weight_decay) == (2e-5, 0.01)
        assert (emotion.warmup, emotion.batch_size) == (0.1, 16)
        assert (emotion.grad_accumulation_steps, emotion.epochs) == (2, 5)
        assert emotion.max_seq_len == 256
        assert emotion.early_stop_patience is None and not emotion.augment
        mh = TrainConfig.mental_health_preset()
        assert (mh.learning_rate, mh.batch_size, mh.epochs) == (1.5e-5, 12, 10)
        assert (mh.warmup, mh.dropout, mh.early_stop_patience) == (400, 0.15, 3)
        assert mh.max_seq_len == 256 and mh.augment
        assert (mh.p_synonym, mh.p_deletion) == (0.1, 0.1)

    def test_warmup_longer_than_run_rejected(self, default_schema):
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=16)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=1,
                             warmup=400, seed=0, max_seq_len=16)
        with pytest.raises(ConfigError):
            train(model, vocab, examples, config)

    def test_best_params_snapshot_differs_from_final(self, default_schema, monkeypatch):
        # degrading scores: best params are epoch 1, final params are later
        scores = iter([0.9, 0.1, 0.1])
        monkeypatch.setattr(
            training, "evaluate", lambda *a, **k: metrics_row(next(scores), 0.0)
        )
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=16)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=3,
                             warmup=0, seed=1, dropout=0.0, max_seq_len=16)
        result = train(model, vocab, examples, config)
        assert result.best_index == 0
        current = model.parameters()
        assert any(
            not np.array_equal(result.best_params[k], current[k].data) for k in result.best_params
        )


class TestPersistence:
    def test_checkpoint_round_trip_bitexact_eval(self, default_schema, tmp_path):
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=24, seed=7)
        config = TrainConfig(batch_size=8, grad_accumulation_steps=1, epochs=1,
                             warmup=0, seed=7, dropout=0.0, max_seq_len=16)
        result = train(model, vocab, examples, config, validation=examples[:8])
        before = evaluate(model, examples[:8], vocab, config)

        ckpt = Checkpoint(
            task=model.task,
            encoder_config=model.encoder.config,
            train_config=config,
            loss_weights=model.weights,
            vocab=vocab,
            schema_json=default_schema.to_jsonable(),
            epoch=result.best_index + 1,
            metrics=result.best_metrics,
            tensors={k: v.data for k, v in model.parameters().items()},
        )
        save_checkpoint(ckpt, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        restored = model_from_checkpoint(loaded)
        after = evaluate(restored, examples[:8], loaded.vocab, loaded.train_config)

        assert abs(after.macro_f1 - before.macro_f1) < 1e-12
        assert abs(after.mean_confidence - before.mean_confidence) < 1e-12
        assert abs(after.combined_score - before.combined_score) < 1e-12
        assert loaded.epoch == result.best_index + 1

    def test_tensor_mismatch_detected(self, default_schema, tmp_path):
        model, vocab, examples = tiny_model_and_corpus(default_schema, n=8, seed=2)
        config = TrainConfig(batch_size=8, epochs=1, warmup=0, seed=2, max_seq_len=16)
        ckpt = Checkpoint(
            task=model.task,
            encoder_config=model.encoder.config,
            train_config=config,
            loss_weights=model.weights,
            vocab=vocab,
            schema_json=default_schema.to_jsonable(),
            epoch=1,
            metrics=None,
            tensors={k: v.data for k, v in model.parameters().items() if "w_e" not in k},
        )
        save_checkpoint(ckpt, tmp_path / "ckpt")
        with pytest.raises(DataError):
            model_from_checkpoint(load_checkpoint(tmp_path / "ckpt"))

    def test_metrics_csv_columns(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [0.5], [metrics_row(0.8, 0.6)])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,macro_f1,macro_recall,mean_confidence,combined_score"
        assert lines[1].startswith("1,0.5")

    def test_checkpoint_wire_format(self, default_schema, tmp_path):
        """Manifest layout and little-endian float64 tensor files."""
        import json

        model, vocab, examples = tiny_model_and_corpus(default_schema, n=8, seed=3)
        config = TrainConfig(batch_size=8, epochs=1, warmup=0, seed=3, max_seq_len=16)
        ckpt = Checkpoint(
            task=model.task,
            encoder_config=model.encoder.config,
            train_config=config,
            loss_weights=model.weights,
            vocab=vocab,
            schema_json=default_schema.to_jsonable(),
            epoch=1,
            metrics=None,
            tensors={k: v.data for k, v in model.parameters().items()},
        )
        save_checkpoint(ckpt, tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        assert set(manifest) == {
            "format", "task", "epoch", "metrics", "encoder", "train",
            "loss_weights", "vocab", "schema", "tensors",
        }
        for entry in manifest["tensors"]:
            assert entry["dtype"] == "<f8"
            blob = (tmp_path / "ckpt" / entry["file"]).read_bytes()
            assert len(blob) == int(np.prod(entry["shape"])) * 8
            np.testing.assert_array_equal(
                np.frombuffer(blob, dtype="<f8").reshape(entry["shape"]),
                ckpt.tensors[entry["name"]],
            )
