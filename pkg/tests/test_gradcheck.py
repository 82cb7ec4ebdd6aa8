import numpy as np
import pytest

from app import gradcheck, nnet
from app.schemas import ModelConfig, StemVariant


def test_relative_error_floor():
    assert gradcheck.relative_error(1.0, 1.0) == 0.0
    assert gradcheck.relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert gradcheck.relative_error(1e-9, 0.0) == pytest.approx(1e-6)


def test_numeric_gradient_restores_value():
    x = np.array([1.5, -2.0])
    g = gradcheck.numeric_gradient(lambda: float((x ** 2).sum()), x, (0,))
    assert g == pytest.approx(3.0, abs=1e-8)
    assert x[0] == 1.5


@pytest.mark.parametrize("variant", list(StemVariant))
def test_every_tensor_passes(variant):
    report = gradcheck.gradient_check(ModelConfig().with_variant(variant), seed=0)
    assert report.passed, "\n".join(report.lines())
    names = [e.name for e in report.entries]
    assert names[0] == "stem.conv.weight"
    assert "stem.gaussian" not in names
    assert all(e.checked > 0 for e in report.entries)


def test_sign_flip_is_detected(monkeypatch):
    original = nnet.Linear.backward

    def flipped(self, dout):
        before = self.weight.grad.copy()
        dx = original(self, dout)
        self.weight.grad[...] = before - (self.weight.grad - before)
        return dx

    monkeypatch.setattr(nnet.Linear, "backward", flipped)
    report = gradcheck.gradient_check(seed=1)
    head = next(e for e in report.entries if e.name == "head.weight")
    assert head.max_rel_error > 0.1
    assert not report.passed
