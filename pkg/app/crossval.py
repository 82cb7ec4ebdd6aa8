"""Repeated stratified k-fold cross-validation.

Every repeat re-splits the manifest with its own seed, trains one model per
held-out fold and scores that fold. Fold reports are pooled into one
summary, and each repeat also gets its own.
"""
import csv
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from . import data, train
from .evaluate import summarize_runs
from .schemas import MetricsReport, RunSummary, TrainConfig

logger = logging.getLogger(__name__)

# constant learning rate for fine-tuning an already trained checkpoint
FINE_TUNE_SCHEDULE = {"lr_initial": 0.001, "lr_decay_epoch": 0, "lr_after": 0.001}
TABLE_COLUMNS = ["repeat", "fold", "seed", "accuracy", "precision", "recall", "f"]


class FoldResult(BaseModel):
    repeat: int
    fold: int
    seed: int
    train_count: int
    validation_count: int
    report: MetricsReport


class CrossValResult(BaseModel):
    k: int
    folds: list[FoldResult]
    repeats: list[RunSummary]
    summary: RunSummary


def cross_validate(cfg: TrainConfig, manifest: data.Manifest, root, k: int = 5, seeds: Sequence[int] = (0,),
                   workers: int | None = None) -> CrossValResult:
    """Train and score k models per seed; the seed drives both the split and the training run."""
    if not seeds:
        raise ValueError("at least one seed is required")
    folds: list[FoldResult] = []
    repeats: list[RunSummary] = []
    for repeat, seed in enumerate(seeds):
        run_cfg = cfg.model_copy(update={"seed": seed})
        reports = []
        for i, fold in enumerate(data.kfold_split(manifest, k, seed)):
            checkpoint, _ = train.train(run_cfg, fold.train, root, workers=workers)
            report = train.evaluate_model(checkpoint, fold.validation, root, cfg.network, cfg.eval_batch_size, workers)
            logger.info("repeat %d fold %d/%d: accuracy %.4f macro-F %.4f", repeat, i + 1, k,
                        report.accuracy, report.macro.f)
            reports.append(report)
            folds.append(FoldResult(repeat=repeat, fold=i, seed=seed, train_count=len(fold.train),
                                    validation_count=len(fold.validation), report=report))
        repeats.append(summarize_runs(reports))
    return CrossValResult(k=k, folds=folds, repeats=repeats, summary=summarize_runs([f.report for f in folds]))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def write_crossval(result: CrossValResult, out_dir) -> None:
    """crossval.csv (one row per fold, then mean and std rows) and crossval.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    with (out_dir / "crossval.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for fr in result.folds:
            r = fr.report
            row = [r.accuracy, r.macro.precision, r.macro.recall, r.macro.f]
            rows.append(row)
            writer.writerow([fr.repeat, fr.fold, fr.seed, *map(_fmt, row)])
        values = np.array(rows)
        std = values.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(values.shape[1])
        writer.writerow(["mean", "", "", *map(_fmt, values.mean(axis=0))])
        writer.writerow(["std", "", "", *map(_fmt, std)])
    (out_dir / "crossval.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")


def format_crossval(result: CrossValResult) -> str:
    lines = [f"{'repeat':<8} {'folds':>5} {'accuracy':>9} {'macro-F':>9} {'F-std':>9}"]
    for i, s in enumerate(result.repeats):
        lines.append(f"{i:<8} {len(s.runs):>5} {s.accuracy:>9.4f} {s.f:>9.4f} {s.f_std:>9.4f}")
    s = result.summary
    lines.append(f"{'all':<8} {len(s.runs):>5} {s.accuracy:>9.4f} {s.f:>9.4f} {s.f_std:>9.4f}")
    return "\n".join(lines) + "\n"
