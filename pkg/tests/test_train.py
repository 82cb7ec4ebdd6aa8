import numpy as np
import pytest

from app import data, nnet, train
from app.errors import CorruptCheckpoint, FingerprintMismatch, NonFiniteLoss
from app.schemas import ModelConfig, QualityLabel, StemVariant, TrainConfig
from conftest import write_toy_set


def toy_config(**overrides) -> TrainConfig:
    values = dict(epochs=5, batch_size=4, lr_initial=0.05, lr_decay_epoch=5, lr_after=0.01, seed=0, augment=None)
    values.update(overrides)
    return TrainConfig(**values)


def test_schedule_defaults():
    cfg = TrainConfig()
    assert [train.learning_rate(e, cfg) for e in range(1, 16)] == [0.01] * 10 + [0.001] * 5


def test_schedule_without_warm_phase():
    cfg = TrainConfig(lr_decay_epoch=0)
    assert train.learning_rate(1, cfg) == 0.001


def test_decay_epoch_beyond_epochs_is_invalid():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, lr_decay_epoch=10)


def test_variant_shorthand():
    cfg = TrainConfig.model_validate({"variant": "dark_only", "epochs": 12})
    assert cfg.variant is StemVariant.DARK_ONLY
    assert cfg.network.stem.learned_channels == 63


def test_zero_epochs_returns_initialisation(toy_set):
    manifest, root = toy_set
    checkpoint, log = train.train(toy_config(epochs=0, lr_decay_epoch=0, seed=7), manifest, root)
    assert log == []
    model = nnet.GuidedNet(ModelConfig(), seed=7)
    for t, p in zip(checkpoint.tensors, model.params):
        assert t.name == p.name
        assert np.array_equal(t.value, p.value)


def test_loss_decreases(toy_set):
    manifest, root = toy_set
    _, log = train.train(toy_config(), manifest, root)
    assert len(log) == 5
    assert log[-1].mean_loss < log[0].mean_loss
    assert [e.lr for e in log] == [0.05] * 5


def test_separable_set_is_learned(toy_set):
    manifest, root = toy_set
    checkpoint, _ = train.train(toy_config(epochs=40, lr_decay_epoch=30), manifest, root)
    report = train.evaluate_model(checkpoint, manifest, root)
    assert report.accuracy >= 0.9


def test_training_is_deterministic(toy_set, tmp_path):
    manifest, root = toy_set
    cfg = toy_config(epochs=2, lr_decay_epoch=2, augment={"hflip_prob": 0.5})
    a, log_a = train.train(cfg, manifest, root)
    b, log_b = train.train(cfg, manifest, root)
    assert log_a == log_b
    train.save_checkpoint(a, tmp_path / "a.gnet")
    train.save_checkpoint(b, tmp_path / "b.gnet")
    assert (tmp_path / "a.gnet").read_bytes() == (tmp_path / "b.gnet").read_bytes()


def test_prefetch_does_not_change_training(toy_set):
    manifest, root = toy_set
    cfg = toy_config(epochs=1, lr_decay_epoch=1, augment={})
    a, _ = train.train(cfg, manifest, root, workers=0)
    b, _ = train.train(cfg, manifest, root, workers=2)
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.tensors, b.tensors))


def test_singleton_tail_batch_is_merged(tmp_path):
    root = tmp_path / "odd"
    manifest = write_toy_set(root, per_class=5)
    log = train.train(toy_config(epochs=1, lr_decay_epoch=1, batch_size=3), manifest, root)[1]
    assert len(log) == 1


def test_validation_scores_logged(toy_set):
    manifest, root = toy_set
    _, log = train.train(toy_config(epochs=2, lr_decay_epoch=2), manifest, root, manifest)
    assert all(0.0 <= e.val_macro_f <= 1.0 for e in log)


def test_divergence_is_fatal(toy_set, monkeypatch):
    manifest, root = toy_set
    calls = []

    def diverging(logits, labels):
        loss, dlogits = nnet.softmax_cross_entropy(logits, labels)
        calls.append(loss)
        return (float("nan") if len(calls) == 3 else loss), dlogits

    monkeypatch.setattr(train, "softmax_cross_entropy", diverging)
    with pytest.raises(NonFiniteLoss) as e:
        train.train(toy_config(), manifest, root)
    assert (e.value.epoch, e.value.batch) == (1, 3)


def test_checkpoint_roundtrip_is_byte_exact(toy_set, tmp_path):
    manifest, root = toy_set
    checkpoint, _ = train.train(toy_config(epochs=1, lr_decay_epoch=1), manifest, root)
    train.save_checkpoint(checkpoint, tmp_path / "a.gnet")
    loaded = train.load_checkpoint(tmp_path / "a.gnet", ModelConfig())
    assert loaded.epochs == 1 and loaded.seed == 0
    train.save_checkpoint(loaded, tmp_path / "b.gnet")
    assert (tmp_path / "a.gnet").read_bytes() == (tmp_path / "b.gnet").read_bytes()
    assert (tmp_path / "a.gnet").read_bytes()[:4] == b"GNET"


def test_checkpoint_records_frozen_tensors(tmp_path):
    model = nnet.GuidedNet(seed=0)
    checkpoint = train.Checkpoint.from_model(model, epochs=0, seed=0)
    frozen = {t.name for t in checkpoint.tensors if t.frozen}
    assert "stem.gaussian" in frozen and "blocks.0.bn.running_mean" in frozen
    assert "stem.conv.weight" not in frozen


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "a.gnet"
    train.save_checkpoint(train.Checkpoint.from_model(nnet.GuidedNet(seed=0), 0, 0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    with pytest.raises(CorruptCheckpoint):
        train.load_checkpoint(path)
    path.write_bytes(b"XNET" + raw[4:])
    with pytest.raises(CorruptCheckpoint):
        train.load_checkpoint(path)


def test_other_variant_is_rejected(tmp_path):
    path = tmp_path / "a.gnet"
    train.save_checkpoint(train.Checkpoint.from_model(nnet.GuidedNet(seed=0), 0, 0), path)
    with pytest.raises(FingerprintMismatch):
        train.load_checkpoint(path, ModelConfig().with_variant(StemVariant.BASELINE))
    checkpoint = train.load_checkpoint(path)
    with pytest.raises(FingerprintMismatch):
        train.restore_model(checkpoint, ModelConfig().with_variant(StemVariant.DARK_ONLY))


def test_resolve_default_variants():
    for variant in StemVariant:
        config = ModelConfig().with_variant(variant)
        checkpoint = train.Checkpoint.from_model(nnet.GuidedNet(config, seed=0), 0, 0)
        assert train.resolve_model_config(checkpoint) == config
    custom = ModelConfig(class_count=4)
    with pytest.raises(FingerprintMismatch):
        train.resolve_model_config(train.Checkpoint.from_model(nnet.GuidedNet(custom, seed=0), 0, 0))


def test_tampered_kernel_is_corrupt():
    model = nnet.GuidedNet(seed=0)
    model.stem.gaussian.value[3, 3] += 0.01
    checkpoint = train.Checkpoint.from_model(model, 0, 0)
    with pytest.raises(CorruptCheckpoint):
        train.restore_model(checkpoint, ModelConfig())


def test_evaluation_is_deterministic(toy_set):
    manifest, root = toy_set
    checkpoint, _ = train.train(toy_config(epochs=1, lr_decay_epoch=1), manifest, root)
    assert train.evaluate_model(checkpoint, manifest, root) == train.evaluate_model(checkpoint, manifest, root)


def test_one_sample_per_class(tmp_path):
    root = tmp_path / "three"
    manifest = write_toy_set(root, per_class=1, labels=tuple(QualityLabel))
    checkpoint = train.Checkpoint.from_model(nnet.GuidedNet(seed=0), 0, 0)
    report = train.evaluate_model(checkpoint, manifest, root)
    assert sum(map(sum, report.confusion)) == 3


def test_training_log_csv(tmp_path, toy_set):
    manifest, root = toy_set
    _, log = train.train(toy_config(epochs=2, lr_decay_epoch=2), manifest, root)
    train.write_training_log(log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,mean_loss,val_macro_f"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    assert all(line.endswith(",") for line in lines[1:])


def test_empty_manifest_rejected(tmp_path):
    with pytest.raises(ValueError):
        train.train(toy_config(), data.Manifest(), tmp_path)


def test_batch_of_one_is_invalid():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


def test_single_record_manifest_rejected(toy_set):
    manifest, root = toy_set
    with pytest.raises(ValueError, match="1 record"):
        train.train(toy_config(), data.Manifest(manifest.records[:1]), root)


def test_init_from_checkpoint(toy_set, tmp_path):
    manifest, root = toy_set
    trained, _ = train.train(toy_config(epochs=1, lr_decay_epoch=1), manifest, root)
    train.save_checkpoint(trained, tmp_path / "init.gnet")

    start, _ = train.train(toy_config(epochs=0, lr_decay_epoch=0, seed=9, init_from=tmp_path / "init.gnet"),
                           manifest, root)
    assert all(np.array_equal(a.value, b.value) for a, b in zip(start.tensors, trained.tensors))

    tuned, log = train.train(toy_config(epochs=2, lr_decay_epoch=0, lr_after=0.001,
                                        init_from=tmp_path / "init.gnet"), manifest, root)
    assert [e.lr for e in log] == [0.001, 0.001]
    assert not np.array_equal(tuned.tensor("head.weight"), trained.tensor("head.weight"))


def test_init_from_other_variant_is_rejected(toy_set, tmp_path):
    manifest, root = toy_set
    train.save_checkpoint(train.Checkpoint.from_model(nnet.GuidedNet(seed=0), 0, 0), tmp_path / "init.gnet")
    cfg = toy_config(init_from=tmp_path / "init.gnet", network=ModelConfig().with_variant(StemVariant.BASELINE))
    with pytest.raises(FingerprintMismatch):
        train.train(cfg, manifest, root)
