"""Confusion matrices, macro-averaged scores and Grad-CAM heatmaps."""
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn import metrics as sk_metrics

from .errors import EmptyMatrix, LabelOutOfRange, LengthMismatch, UntrainedModel
from .imgproc import resize_bilinear
from .nnet import GuidedNet
from .schemas import ClassScores, MacroScores, MetricsReport, QualityLabel, RunSummary

logger = logging.getLogger(__name__)

CLASS_COUNT = len(QualityLabel)


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = samples with true label i predicted as j."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def _check_labels(values: np.ndarray, what: str, class_count: int) -> None:
    bad = (values < 0) | (values >= class_count)
    if np.any(bad):
        raise LabelOutOfRange(f"{what} label {values[bad][0]} outside [0, {class_count})")


def confusion_matrix(truths: Sequence[int], preds: Sequence[int], class_count: int = CLASS_COUNT) -> ConfusionMatrix:
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    if truths.size != preds.size:
        raise LengthMismatch(f"{truths.size} true labels but {preds.size} predictions")
    _check_labels(truths, "true", class_count)
    _check_labels(preds, "predicted", class_count)
    if truths.size == 0:
        return ConfusionMatrix(np.zeros((class_count, class_count), dtype=np.int64))
    counts = sk_metrics.confusion_matrix(truths, preds, labels=list(range(class_count)))
    return ConfusionMatrix(counts.astype(np.int64))


def _label_pairs(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Expand a count matrix back into (true, predicted) label vectors."""
    n = counts.shape[0]
    flat = counts.astype(np.int64).ravel()
    return np.repeat(np.repeat(np.arange(n), n), flat), np.repeat(np.tile(np.arange(n), n), flat)


def metrics_from_cm(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class and macro precision, recall and F; empty denominators score 0."""
    if cm.total <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    truths, preds = _label_pairs(cm.counts)
    labels = list(range(cm.counts.shape[0]))
    precision, recall, f, _ = sk_metrics.precision_recall_fscore_support(
        truths, preds, labels=labels, average=None, zero_division=0
    )
    return MetricsReport(
        accuracy=float(sk_metrics.accuracy_score(truths, preds)),
        per_class=ClassScores(precision=precision.tolist(), recall=recall.tolist(), f=f.tolist()),
        macro=MacroScores(precision=float(precision.mean()), recall=float(recall.mean()), f=float(f.mean())),
        confusion=cm.to_list(),
    )


def summarize_runs(reports: Sequence[MetricsReport]) -> RunSummary:
    """Mean scores over independent seeds; f_std is the sample standard deviation of macro-F."""
    if not reports:
        raise ValueError("no runs to summarize")
    fs = np.array([r.macro.f for r in reports])
    return RunSummary(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=float(np.mean([r.macro.precision for r in reports])),
        recall=float(np.mean([r.macro.recall for r in reports])),
        f=float(fs.mean()),
        f_std=float(fs.std(ddof=1)) if fs.size > 1 else 0.0,
        runs=fs.tolist(),
    )


def format_report(report: MetricsReport) -> str:
    lines = [f"accuracy  {report.accuracy:.4f}", "", f"{'class':<8} {'precision':>9} {'recall':>9} {'f':>9}"]
    scores = report.per_class
    for label in QualityLabel:
        i = int(label)
        lines.append(f"{label.slug:<8} {scores.precision[i]:>9.4f} {scores.recall[i]:>9.4f} {scores.f[i]:>9.4f}")
    m = report.macro
    lines.append(f"{'macro':<8} {m.precision:>9.4f} {m.recall:>9.4f} {m.f:>9.4f}")
    lines += ["", "confusion (rows = true, columns = predicted)"]
    lines += ["  " + " ".join(f"{n:>6d}" for n in row) for row in report.confusion]
    if report.runs:
        fs = np.array(report.runs)
        std = fs.std(ddof=1) if fs.size > 1 else 0.0
        lines += ["", f"runs {len(fs)}  macro-F mean {fs.mean():.4f}  F-std {std:.4f}"]
    return "\n".join(lines) + "\n"


def write_report_json(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def gradcam_from_activations(activations: np.ndarray, grads: np.ndarray,
                             out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum of C x h x w activations, upsampled and max-normalised."""
    if activations.shape != grads.shape or activations.ndim != 3:
        raise ValueError(f"activations {activations.shape} and gradients {grads.shape} must both be C x h x w")
    alpha = grads.astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, activations.astype(np.float64), axes=1), 0.0)
    if out_shape is not None and tuple(out_shape) != raw.shape:
        raw = np.maximum(resize_bilinear(raw, *out_shape), 0.0)
    peak = raw.max()
    if peak > 0:
        return raw / peak
    return np.zeros_like(raw)


def gradcam(model: GuidedNet, image: np.ndarray, target_class: int) -> np.ndarray:
    """Heatmap for target_class over an H x W x 3 image, same spatial shape as the image."""
    if not 0 <= target_class < model.config.class_count:
        raise LabelOutOfRange(f"class {target_class} outside [0, {model.config.class_count})")
    for p in model.params:
        if not np.all(np.isfinite(p.value)):
            raise UntrainedModel(f"parameter {p.name} holds non-finite values")

    x = np.moveaxis(image, -1, 0)[None]
    logits = model.forward(x, train=False)
    seed = np.zeros_like(logits)
    seed[0, target_class] = 1.0
    grads = model.feature_grad(seed)
    model.params.zero_grad()
    heatmap = gradcam_from_activations(model.features[0], grads[0], image.shape[:2])
    logger.debug("grad-cam for class %d: logit %.4f", target_class, float(logits[0, target_class]))
    return heatmap
