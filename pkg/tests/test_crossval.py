import csv
import json

import pytest

from app import crossval
from app.schemas import TrainConfig


def quick_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 1, "lr_decay_epoch": 1, "batch_size": 4, "lr_initial": 0.05,
                          "augment": None, **overrides})


def test_every_record_is_scored_once_per_repeat(toy_set):
    manifest, root = toy_set
    result = crossval.cross_validate(quick_config(), manifest, root, k=2, seeds=[0, 1])
    assert [(f.repeat, f.fold) for f in result.folds] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    for f in result.folds:
        assert (f.train_count, f.validation_count) == (8, 8)
        assert sum(map(sum, f.report.confusion)) == 8
    assert len(result.repeats) == 2 and len(result.summary.runs) == 4
    assert result.summary.f == pytest.approx(sum(result.summary.runs) / 4)


def test_repeats_are_seeded(toy_set):
    manifest, root = toy_set
    a = crossval.cross_validate(quick_config(), manifest, root, k=2, seeds=[3])
    b = crossval.cross_validate(quick_config(), manifest, root, k=2, seeds=[3])
    assert a == b


def test_no_seeds(toy_set):
    manifest, root = toy_set
    with pytest.raises(ValueError):
        crossval.cross_validate(quick_config(), manifest, root, k=2, seeds=[])


def test_written_tables(toy_set, tmp_path):
    manifest, root = toy_set
    result = crossval.cross_validate(quick_config(), manifest, root, k=2, seeds=[0])
    crossval.write_crossval(result, tmp_path / "cv")
    with (tmp_path / "cv" / "crossval.csv").open(encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == crossval.TABLE_COLUMNS
    assert [r[0] for r in rows[1:]] == ["0", "0", "mean", "std"]
    payload = json.loads((tmp_path / "cv" / "crossval.json").read_text(encoding="utf-8"))
    assert set(payload) == {"k", "folds", "repeats", "summary"}
    assert "all" in crossval.format_crossval(result)


def test_fine_tune_schedule_is_constant():
    cfg = TrainConfig(**crossval.FINE_TUNE_SCHEDULE)
    assert {cfg.lr_initial, cfg.lr_after} == {0.001} and cfg.lr_decay_epoch == 0
