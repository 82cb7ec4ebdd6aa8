"""Central finite-difference checks of the analytic gradients."""
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .nnet import GuidedNet, softmax_cross_entropy
from .schemas import ModelConfig

logger = logging.getLogger(__name__)

STEP = 1e-4
# denominators never drop below this, so near-zero gradients are compared absolutely
SCALE_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: float = SCALE_FLOOR) -> float:
    analytic, numeric = float(analytic), float(numeric)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, index, step: float = STEP) -> float:
    """d f / d array[index] by central differences; array is perturbed in place and restored."""
    original = array[index].copy()
    array[index] = original + step
    plus = f()
    array[index] = original - step
    minus = f()
    array[index] = original
    return (plus - minus) / (2.0 * step)


def max_relative_error(analytic: np.ndarray, f: Callable[[], float], array: np.ndarray,
                       step: float = STEP) -> float:
    """Worst entry of an exhaustive check of every element of array."""
    worst = 0.0
    for index in np.ndindex(array.shape):
        worst = max(worst, relative_error(analytic[index], numeric_gradient(f, array, index, step)))
    return worst


@dataclass
class TensorCheck:
    name: str
    checked: int
    kinks: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[TensorCheck] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{'tensor':<28} {'checked':>7} {'kinks':>5} {'max rel err':>12}"]
        for e in self.entries:
            flag = "" if e.max_rel_error <= self.tolerance else "  FAIL"
            out.append(f"{e.name:<28} {e.checked:>7} {e.kinks:>5} {e.max_rel_error:>12.3e}{flag}")
        return out


def gradient_check(config: ModelConfig | None = None, seed: int = 0, tolerance: float = 1e-5,
                   batch: int = 2, size: int = 16, max_entries: int = 24,
                   step: float = STEP) -> GradCheckReport:
    """Compare every learnable tensor's analytic gradient with central differences.

    The model runs in float64 with train-mode batch norm on a random batch.
    Up to max_entries seeded elements are checked per tensor. Elements whose
    perturbed runs change any ReLU mask sit on a kink and are skipped, which
    the report counts.
    """
    model = GuidedNet(config, dtype=np.float64, seed=seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.random((batch, 3, size, size))
    labels = rng.integers(0, model.config.class_count, size=batch)

    def run() -> tuple[float, list[np.ndarray]]:
        loss, _ = softmax_cross_entropy(model.forward(x, train=True), labels)
        return loss, [m.copy() for m in model.relu_masks()]

    model.params.zero_grad()
    logits = model.forward(x, train=True)
    _, dlogits = softmax_cross_entropy(logits, labels)
    base_masks = [m.copy() for m in model.relu_masks()]
    model.backward(dlogits)

    report = GradCheckReport(tolerance=tolerance)
    for p in model.params.learnable():
        analytic = p.grad.copy()
        count = min(p.value.size, max_entries)
        picks = np.sort(rng.choice(p.value.size, size=count, replace=False))
        worst, kinks = 0.0, 0
        for flat in picks:
            index = np.unravel_index(flat, p.value.shape)
            original = p.value[index]
            p.value[index] = original + step
            plus, plus_masks = run()
            p.value[index] = original - step
            minus, minus_masks = run()
            p.value[index] = original
            crossed = any(
                not (np.array_equal(a, b) and np.array_equal(a, c))
                for a, b, c in zip(base_masks, plus_masks, minus_masks)
            )
            if crossed:
                kinks += 1
                continue
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(analytic[index], numeric))
        report.entries.append(TensorCheck(p.name, count - kinks, kinks, worst))
        logger.debug("%s: %d checked, %d kinks, max rel err %.3e", p.name, count - kinks, kinks, worst)
    return report
