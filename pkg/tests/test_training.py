import numpy as np
import pytest

from corrpool.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from corrpool.downstream import DownstreamModel
from corrpool.errors import CheckpointError, ParameterError, TrainingError
from corrpool.layerwise import LayerStack
from corrpool.synth import SynthSpec, sample_dataset
from corrpool.training import Example, TrainConfig, evaluate_model, train

SID_HEAD = {"proj_dim": 6, "post_proj_dim": 8}


def sid_data(seed=0, regime="correlation_coded", per_class=12):
    spec = SynthSpec(regime=regime, num_classes=3, utterances_per_class=per_class, dim=6, num_layers=3,
                     t_min=20, t_max=30, seed=seed)
    data = sample_dataset(spec)
    labels = [c.name for c in data.classes]
    index = {n: i for i, n in enumerate(labels)}

    def split(name):
        return [Example(u.utt_id, LayerStack(u.layers), index[u.label]) for u in data.split(name)]

    return labels, split("train"), split("dev")


def build(config, labels):
    return DownstreamModel.build(config.task, config.head_config(6), 3, labels, config.seed)


def run(config, labels, tr, dv, **kw):
    return train(build(config, labels), tr, config, dv, **kw)


class TestConfig:
    def test_aliases_resolve(self):
        assert TrainConfig(pooling="meanstd").pooling == "statistics"

    @pytest.mark.parametrize("bad", [{"task": "asr"}, {"dropout": 1.5}, {"learning_rate": -1.0},
                                     {"optimizer": "rmsprop"}, {"patience": 0}, {"epochs": 0}])
    def test_invalid(self, bad):
        with pytest.raises(ParameterError):
            TrainConfig(**bad)

    def test_unknown_field(self):
        with pytest.raises(ParameterError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_dict_round_trip(self):
        cfg = TrainConfig(task="sv", pooling="corr", dropout=0.25, head={"width_divisor": 8})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="corr", epochs=1, learning_rate=0.0, head=SID_HEAD)
        model = build(cfg, labels)
        before = model.state_arrays()
        train(model, tr, cfg, dv)
        for k, v in model.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_identical_seeds_identical_logs(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="corr", epochs=3, dropout=0.25, head=SID_HEAD, seed=4)
        assert run(cfg, labels, tr, dv).log == run(cfg, labels, tr, dv).log

    def test_different_seeds_differ(self):
        labels, tr, dv = sid_data()
        a = run(TrainConfig(pooling="corr", epochs=2, head=SID_HEAD, seed=1), labels, tr, dv)
        b = run(TrainConfig(pooling="corr", epochs=2, head=SID_HEAD, seed=2), labels, tr, dv)
        assert a.log != b.log

    def test_frozen_layer_logits_unchanged(self):
        labels, tr, dv = sid_data(per_class=40)
        cfg = TrainConfig(pooling="mean", epochs=5, batch_size=4, freeze_layer_weights=True, head=SID_HEAD)
        model = build(cfg, labels)
        model.weights.logits.assign([0.3, -0.2, 1.0])
        result = train(model, tr, cfg, dv)
        assert len(tr) * 5 // 4 >= 100  # at least 100 optimizer steps
        np.testing.assert_array_equal(model.weights.logits.data, [0.3, -0.2, 1.0])
        np.testing.assert_array_equal(result.model.weights.logits.data, [0.3, -0.2, 1.0])

    def test_transplanted_weights_survive_training(self):
        labels, tr, dv = sid_data(regime="mixed")
        corr = run(TrainConfig(pooling="corr", epochs=2, learning_rate=1e-2, head=SID_HEAD), labels, tr, dv).model
        cfg = TrainConfig(pooling="mean", epochs=2, freeze_layer_weights=True, head=SID_HEAD)
        model = build(cfg, labels)
        model.weights.logits.assign(corr.weights.logits.data)
        result = train(model, tr, cfg, dv)
        np.testing.assert_array_equal(result.model.weights.gammas(), corr.weights.gammas())

    def test_patience_stops_early(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="mean", epochs=30, learning_rate=0.0, patience=2, head=SID_HEAD)
        result = run(cfg, labels, tr, dv)
        assert len(result.log) == 3 and result.best_epoch == 1

    def test_learns_correlation_coded_classes(self):
        labels, tr, dv = sid_data(per_class=30)
        cfg = TrainConfig(pooling="corr", epochs=8, learning_rate=1e-2, head=SID_HEAD)
        result = run(cfg, labels, tr, dv)
        assert evaluate_model(result.model, dv) >= 0.9

    def test_non_finite_loss_reports_position(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="mean", epochs=2, learning_rate=1e300, optimizer="sgd", head=SID_HEAD)
        with pytest.raises(TrainingError, match=r"\[epoch \d+, step \d+\]") as exc, \
                np.errstate(over="ignore", invalid="ignore"):
            run(cfg, labels, tr, dv)
        assert exc.value.epoch >= 1 and exc.value.step >= 1

    def test_empty_training_set(self):
        labels, _, dv = sid_data()
        cfg = TrainConfig(head=SID_HEAD)
        with pytest.raises(TrainingError):
            train(build(cfg, labels), [], cfg, dv)

    def test_sv_needs_trials(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(task="sv", pooling="stats", head={"width_divisor": 64})
        model = DownstreamModel.build("sv", cfg.head_config(6), 3, labels, 0)
        with pytest.raises(TrainingError):
            train(model, tr, cfg, dv)


class TestResume:
    def test_resume_is_bitwise_equivalent(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="corr", epochs=4, dropout=0.25, head=SID_HEAD, seed=7)
        full = run(cfg, labels, tr, dv)

        saved = {}

        def keep(model, state, config):
            saved["bytes"] = to_bytes(Checkpoint(model, config, state))

        run(cfg, labels, tr, dv, stop_after_epoch=2, on_epoch=keep)
        ckpt = from_bytes(saved["bytes"])
        resumed = train(ckpt.model, tr, ckpt.config, dv, resume=ckpt.state)

        assert resumed.log == full.log
        assert to_bytes(Checkpoint(resumed.model, cfg, resumed.state)) == to_bytes(
            Checkpoint(full.model, cfg, full.state))


class TestCheckpoint:
    def _trained(self):
        labels, tr, dv = sid_data()
        cfg = TrainConfig(pooling="corr", epochs=2, head=SID_HEAD)
        result = run(cfg, labels, tr, dv)
        return result, cfg

    def test_canonical_bytes(self, tmp_path):
        result, cfg = self._trained()
        save_checkpoint(tmp_path / "a.ckpt", result.model, cfg, result.state)
        ckpt = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", ckpt.model, ckpt.config, ckpt.state)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert ckpt.state.log == result.log and ckpt.config == cfg

    def test_truncated(self, tmp_path):
        result, cfg = self._trained()
        raw = to_bytes(Checkpoint(result.model, cfg, result.state))
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_flipped_byte(self):
        result, cfg = self._trained()
        raw = bytearray(to_bytes(Checkpoint(result.model, cfg)))
        raw[len(raw) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            from_bytes(bytes(raw))

    def test_wrong_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"NOTACKPT" + b"\0" * 64)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_trainable_flags_preserved(self):
        result, cfg = self._trained()
        result.model.weights.logits.set_trainable(False)
        back = from_bytes(to_bytes(Checkpoint(result.model, cfg))).model
        assert not back.weights.trainable and back.head.params["proj.w"].trainable
