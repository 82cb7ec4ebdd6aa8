import math

import numpy as np
import pytest

from app import nnet, priors
from app.errors import DegenerateBatch, LabelOutOfRange, OddSpatialDim, ShapeMismatch
from app.gradcheck import max_relative_error
from app.schemas import ConvBlockSpec, GuidedStemConfig, ModelConfig, StemVariant

TOL = 1e-5


def test_conv_identity(rng):
    conv = nnet.Conv2d("c", 1, 1, 1, dtype=np.float64)
    conv.weight.value[...] = 1.0
    x = rng.random((2, 1, 5, 6))
    assert np.array_equal(conv.forward(x), x)


def test_conv_box_sum():
    conv = nnet.Conv2d("c", 1, 1, 3, stride=1, padding=1, dtype=np.float64)
    conv.weight.value[...] = 1.0
    out = conv.forward(np.ones((1, 1, 4, 4)))[0, 0]
    assert np.all(out[1:3, 1:3] == 9.0)
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4.0
    assert out[0, 1] == 6.0


def test_conv_rejects_wrong_channels(rng):
    conv = nnet.Conv2d("c", 3, 4, 3)
    with pytest.raises(ShapeMismatch):
        conv.forward(rng.random((1, 2, 8, 8)))


def test_conv_gradients(rng):
    conv = nnet.Conv2d("c", 2, 3, 3, stride=2, padding=1, dtype=np.float64)
    conv.weight.value[...] = rng.normal(size=conv.weight.value.shape)
    x = rng.random((2, 2, 7, 6))
    upstream = rng.normal(size=conv.forward(x).shape)

    def f():
        return float((conv.forward(x) * upstream).sum())

    conv.forward(x)
    dx = conv.backward(upstream)
    assert max_relative_error(conv.weight.grad, f, conv.weight.value) <= TOL
    assert max_relative_error(dx, f, x) <= TOL


def test_zero_input_gives_zero_weight_gradient(rng):
    conv = nnet.Conv2d("c", 2, 3, 3, padding=1, dtype=np.float64)
    conv.forward(np.zeros((2, 2, 5, 5)))
    conv.backward(rng.normal(size=(2, 3, 5, 5)))
    assert np.all(conv.weight.grad == 0)


def test_batchnorm_normalises(rng):
    bn = nnet.BatchNorm2d("bn", 3, dtype=np.float64)
    out = bn.forward(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)), train=True)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) <= 1e-3)


def test_batchnorm_affine(rng):
    bn = nnet.BatchNorm2d("bn", 2, dtype=np.float64)
    bn.gamma.value[...] = 2.0
    bn.beta.value[...] = 3.0
    x = rng.normal(size=(3, 2, 4, 4))
    assert np.allclose(bn.forward(x, train=False), 2 * x + 3, atol=1e-4)


def test_batchnorm_running_stats(rng):
    bn = nnet.BatchNorm2d("bn", 1, dtype=np.float64)
    x = rng.normal(5.0, 2.0, size=(4, 1, 3, 3))
    bn.forward(x, train=True)
    assert bn.running_mean.value[0] == pytest.approx(0.1 * x.mean())
    assert bn.running_var.value[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_needs_two_samples(rng):
    bn = nnet.BatchNorm2d("bn", 2)
    with pytest.raises(DegenerateBatch):
        bn.forward(rng.random((1, 2, 4, 4)), train=True)
    bn.forward(rng.random((1, 2, 4, 4)), train=False)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(rng, train):
    bn = nnet.BatchNorm2d("bn", 3, dtype=np.float64)
    bn.gamma.value[...] = rng.uniform(0.5, 1.5, size=3)
    bn.beta.value[...] = rng.normal(size=3)
    bn.running_mean.value[...] = rng.normal(size=3)
    bn.running_var.value[...] = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(3, 3, 4, 4))
    upstream = rng.normal(size=x.shape)

    def f():
        return float((bn.forward(x, train) * upstream).sum())

    bn.forward(x, train)
    dx = bn.backward(upstream)
    assert max_relative_error(bn.gamma.grad, f, bn.gamma.value) <= TOL
    assert max_relative_error(bn.beta.grad, f, bn.beta.value) <= TOL
    assert max_relative_error(dx, f, x) <= TOL


def test_relu_values_and_gradient(rng):
    relu = nnet.ReLU()
    assert np.array_equal(relu.forward(np.array([-1.0, 2.0])), [0.0, 2.0])
    x = rng.uniform(0.05, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    upstream = rng.normal(size=x.shape)

    def f():
        return float((relu.forward(x) * upstream).sum())

    relu.forward(x)
    assert max_relative_error(relu.backward(upstream), f, x) <= TOL


def test_global_avg_pool(rng):
    pool = nnet.GlobalAvgPool()
    assert np.all(pool.forward(np.full((2, 3, 4, 5), 0.25)) == 0.25)
    x = rng.random((2, 3, 4, 5))
    upstream = rng.normal(size=(2, 3))

    def f():
        return float((pool.forward(x) * upstream).sum())

    pool.forward(x)
    assert max_relative_error(pool.backward(upstream), f, x) <= TOL


def test_linear_gradients(rng):
    linear = nnet.Linear("fc", 5, 3, dtype=np.float64)
    linear.weight.value[...] = rng.normal(size=(3, 5))
    linear.bias.value[...] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    upstream = rng.normal(size=(4, 3))

    def f():
        return float((linear.forward(x) * upstream).sum())

    linear.forward(x)
    dx = linear.backward(upstream)
    assert max_relative_error(linear.weight.grad, f, linear.weight.value) <= TOL
    assert max_relative_error(linear.bias.grad, f, linear.bias.value) <= TOL
    assert max_relative_error(dx, f, x) <= TOL
    with pytest.raises(ShapeMismatch):
        linear.forward(np.zeros((4, 6)))


def test_cross_entropy_values():
    loss, _ = nnet.softmax_cross_entropy(np.zeros((4, 3)), [0, 1, 2, 0])
    assert loss == pytest.approx(math.log(3))
    loss, _ = nnet.softmax_cross_entropy(np.array([[1.0, 0.0, 0.0]]), [0])
    assert loss == pytest.approx(0.5514, abs=1e-4)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, grad = nnet.softmax_cross_entropy(logits, labels)
    assert loss >= 0
    assert np.all(np.abs(grad.sum(axis=1)) <= 1e-6)
    assert max_relative_error(grad, lambda: nnet.softmax_cross_entropy(logits, labels)[0], logits) <= TOL


def test_cross_entropy_label_range():
    with pytest.raises(LabelOutOfRange):
        nnet.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(LabelOutOfRange):
        nnet.softmax_cross_entropy(np.zeros((1, 3)), [-1])


def test_kaiming_bound():
    assert nnet.kaiming_bound(9408) == pytest.approx(math.sqrt(6 / 9408), abs=1e-12)
    assert nnet.kaiming_bound(9408) == pytest.approx(0.025254, abs=1e-6)


def test_kaiming_samples(rng):
    values = nnet.kaiming_uniform_init((100_000, 1), rng)
    bound = math.sqrt(6.0)
    assert np.all(np.abs(values) <= bound)
    assert abs(values.mean()) <= 3 * bound / math.sqrt(3 * 100_000)
    again = nnet.kaiming_uniform_init((100_000, 1), np.random.default_rng(1234))
    assert np.array_equal(values, again)


def test_sgd_step():
    p = nnet.Parameter("w", np.array([1.0]))
    p.grad[...] = 0.5
    frozen = nnet.Parameter("k", np.array([2.0]), frozen=True)
    params = nnet.ModelParams([p, frozen])
    nnet.sgd_step(params, 0.01)
    assert p.value[0] == pytest.approx(0.995)
    assert p.grad[0] == 0
    nnet.sgd_step(params, 0.01)
    assert p.value[0] == pytest.approx(0.995)
    assert frozen.value[0] == 2.0 and frozen.grad is None


def test_stem_parameter_counts():
    baseline = nnet.GuidedNet(ModelConfig().with_variant(StemVariant.BASELINE))
    guided = nnet.GuidedNet(ModelConfig())
    assert nnet.param_count(nnet.ModelParams(baseline.stem.params())) == 9408
    assert nnet.param_count(nnet.ModelParams(guided.stem.params())) == 9114
    assert nnet.param_count(nnet.ModelParams(guided.head.params())) == 99
    assert nnet.param_count(guided.params) <= nnet.param_count(baseline.params)


def test_stem_geometry_and_prior_channels(rng):
    image = rng.random((224, 224, 3)).astype(np.float32)
    stem = nnet.GuidedStem(GuidedStemConfig())
    stem.conv.weight.value[...] = nnet.kaiming_uniform_init(stem.conv.weight.value.shape, rng)
    out = stem.forward(np.moveaxis(image, -1, 0)[None])
    assert out.shape == (1, 64, 112, 112)

    bright, dark = priors.prior_maps(image)
    assert np.array_equal(out[0, 0], bright)
    assert np.array_equal(out[0, 1], dark)
    assert np.all(out[0, 0] >= out[0, 1])


@pytest.mark.parametrize("variant,priors_used", [
    (StemVariant.BASELINE, 0), (StemVariant.DARK_ONLY, 1), (StemVariant.BRIGHT_ONLY, 1), (StemVariant.DARK_BRIGHT, 2),
])
def test_stem_variants(rng, variant, priors_used):
    cfg = GuidedStemConfig(variant=variant)
    stem = nnet.GuidedStem(cfg)
    assert cfg.learned_channels == 64 - priors_used
    assert stem.forward(rng.random((2, 3, 16, 16))).shape == (2, 64, 8, 8)


def test_stem_rejects_odd_input(rng):
    with pytest.raises(OddSpatialDim):
        nnet.GuidedStem(GuidedStemConfig()).forward(rng.random((1, 3, 15, 16)))


def test_stem_learned_path_gradient(rng):
    stem = nnet.GuidedStem(GuidedStemConfig(total_channels=6), dtype=np.float64)
    stem.conv.weight.value[...] = rng.normal(size=stem.conv.weight.value.shape)
    x = rng.random((2, 3, 8, 8))
    upstream = rng.normal(size=(2, 6, 4, 4))

    def f():
        return float((stem.forward(x) * upstream).sum())

    stem.forward(x)
    stem.backward(upstream)
    assert max_relative_error(stem.conv.weight.grad, f, stem.conv.weight.value) <= TOL
    assert stem.gaussian.grad is None


def test_frozen_kernel_survives_training_steps(rng):
    model = nnet.GuidedNet(ModelConfig(blocks=[ConvBlockSpec(out_channels=8)]), seed=3)
    kernel = model.stem.gaussian.value.copy()
    x = rng.random((2, 3, 16, 16))
    for _ in range(100):
        _, dlogits = nnet.softmax_cross_entropy(model.forward(x, train=True), [0, 2])
        model.backward(dlogits)
        nnet.sgd_step(model.params, 0.01)
    assert np.array_equal(model.stem.gaussian.value, kernel)
    expected = priors.make_gaussian_kernel(7, 1.5).weights.astype(np.float32)
    assert np.array_equal(model.stem.gaussian.value, expected)


def test_seeded_models_are_identical(rng):
    a, b = nnet.GuidedNet(seed=5), nnet.GuidedNet(seed=5)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.value, pb.value)
    x = rng.random((2, 3, 16, 16))
    for model in (a, b):
        _, dlogits = nnet.softmax_cross_entropy(model.forward(x, train=True), [1, 0])
        model.backward(dlogits)
        nnet.sgd_step(model.params, 0.05)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.value, pb.value)


def test_parameter_layout():
    names = nnet.GuidedNet().params.names()
    assert names[:2] == ["stem.gaussian", "stem.conv.weight"]
    assert names[-2:] == ["head.weight", "head.bias"]
    assert "blocks.1.bn.running_var" in names


def test_predict_shape(rng):
    model = nnet.GuidedNet(seed=0)
    preds = model.predict(rng.random((3, 3, 32, 32)))
    assert preds.shape == (3,)
    assert np.all((preds >= 0) & (preds < 3))
