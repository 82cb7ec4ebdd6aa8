"""A small CNN with hand-written forward and backward passes.

Tensors are plain numpy arrays in N x C x H x W layout. Models run in
float32; float64 is used for gradient checking. Every layer caches what
its backward pass needs during the most recent forward call.
"""
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import priors
from .errors import DegenerateBatch, LabelOutOfRange, OddSpatialDim, ShapeMismatch
from .schemas import ConvBlockSpec, GuidedStemConfig, ModelConfig

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self):
        if not self.frozen and self.grad is None:
            self.grad = np.zeros_like(self.value)


class ModelParams:
    """Ordered, name-addressable collection of a model's tensors."""

    def __init__(self, params: list[Parameter]):
        self._params = {}
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name}")
            self._params[p.name] = p

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def learnable(self) -> list[Parameter]:
        return [p for p in self if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.learnable():
            p.grad.fill(0)


def kaiming_bound(fan_in: int) -> float:
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return math.sqrt(6.0 / fan_in)


def kaiming_uniform_init(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in); fan_in is the product of all but the first dimension."""
    bound = kaiming_bound(math.prod(shape[1:]))
    return rng.uniform(-bound, bound, size=shape)


def sgd_step(params: ModelParams, lr: float) -> None:
    for p in params.learnable():
        p.value -= lr * p.grad
        p.grad.fill(0)


def param_count(params: ModelParams) -> int:
    return sum(p.value.size for p in params.learnable())


class Conv2d:
    """Cross-correlation with zero padding and no bias."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(f"{name}.weight",
                                np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype))
        self._windows = None
        self._input_shape = None

    def params(self) -> list[Parameter]:
        return [self.weight]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.weight.name}: expected N x {self.in_channels} x H x W, got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = priors.output_size(x.shape[2], k, s, p)
        wo = priors.output_size(x.shape[3], k, s, p)
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{self.weight.name}: input {x.shape[2:]} smaller than kernel {k}")
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        self._windows = windows
        self._input_shape = x.shape
        out = np.tensordot(windows, self.weight.value, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, dout: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        self.weight.grad += np.tensordot(dout, self._windows, axes=([0, 2, 3], [0, 2, 3]))
        if not input_grad:
            return None
        n, c, h, w = self._input_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = dout.shape[2:]
        cols = np.tensordot(dout, self.weight.value, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        dpadded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dpadded[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dpadded[:, :, p:p + h, p:p + w]


class BatchNorm2d:
    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(f"{name}.running_mean", np.zeros(channels, dtype=dtype), frozen=True)
        self.running_var = Parameter(f"{name}.running_var", np.ones(channels, dtype=dtype), frozen=True)
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.gamma.value.size:
            raise ShapeMismatch(f"{self.gamma.name}: expected {self.gamma.value.size} channels, got {x.shape}")
        if train:
            if x.shape[0] < 2:
                raise DegenerateBatch(f"{self.gamma.name}: train-mode batch norm needs batch >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            rm, rv = self.running_mean.value, self.running_var.value
            rm[...] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean
            rv[...] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var * count / max(count - 1, 1)
        else:
            mean, var = self.running_mean.value, self.running_var.value
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, train = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.value[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not train:
            return dxhat * scale
        count = dout.shape[0] * dout.shape[2] * dout.shape[3]
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return scale / count * (count * dxhat - sum_d - xhat * sum_dx)


class ReLU:
    def __init__(self):
        self.mask = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self.mask, dout, 0).astype(dout.dtype, copy=False)


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeMismatch(f"global average pool expects N x C x H x W, got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        return np.broadcast_to((dout / (h * w))[:, :, None, None], self._shape).copy()


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int, dtype=np.float32):
        self.weight = Parameter(f"{name}.weight", np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=dtype))
        self._x = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise ShapeMismatch(f"{self.weight.name}: expected N x {self.weight.value.shape[1]}, got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} do not match labels {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes - 1}], got {labels.tolist()}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


class GuidedStem:
    """First layer: bright prior, dark prior and learned channels, concatenated in that order."""

    def __init__(self, cfg: GuidedStemConfig, dtype=np.float32):
        self.cfg = cfg
        kernel = priors.make_gaussian_kernel(cfg.prior.kernel_size, cfg.prior.sigma)
        self.gaussian = Parameter("stem.gaussian", kernel.weights.astype(dtype), frozen=True)
        self.conv = Conv2d("stem.conv", 3, cfg.learned_channels, cfg.kernel_size,
                           cfg.stride, cfg.padding, dtype=dtype)

    def params(self) -> list[Parameter]:
        return [self.gaussian, self.conv.weight]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"guided stem expects N x 3 x H x W, got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise OddSpatialDim(f"guided stem needs even height and width, got {x.shape[2:]}")
        parts = []
        variant = self.cfg.variant
        if variant.prior_channels:
            bright, dark = priors.prior_maps_batch(x, self.gaussian.value, self.cfg.prior)
            if variant.uses_bright:
                parts.append(bright)
            if variant.uses_dark:
                parts.append(dark)
        parts.append(self.conv.forward(x))
        return np.concatenate(parts, axis=1)

    def backward(self, dout: np.ndarray) -> None:
        # the prior channels end at the data, nothing upstream to update
        self.conv.backward(dout[:, self.cfg.variant.prior_channels:], input_grad=False)


class ConvBlock:
    def __init__(self, name: str, in_channels: int, spec: ConvBlockSpec, dtype=np.float32):
        self.conv = Conv2d(f"{name}.conv", in_channels, spec.out_channels, spec.kernel_size,
                           spec.stride, spec.padding, dtype=dtype)
        self.bn = BatchNorm2d(f"{name}.bn", spec.out_channels, dtype=dtype)
        self.relu = ReLU()

    def params(self) -> list[Parameter]:
        return self.conv.params() + self.bn.params()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        return self.relu.forward(self.bn.forward(self.conv.forward(x), train))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.bn.backward(self.relu.backward(dout)))


class GuidedNet:
    """Guided stem, conv-BN-ReLU blocks, global average pooling and a linear head."""

    def __init__(self, config: ModelConfig | None = None, dtype=np.float32, seed: int | None = 0):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.stem = GuidedStem(self.config.stem, dtype=dtype)
        channels = self.config.stem.total_channels
        self.blocks = []
        for i, spec in enumerate(self.config.blocks):
            self.blocks.append(ConvBlock(f"blocks.{i}", channels, spec, dtype=dtype))
            channels = spec.out_channels
        self.pool = GlobalAvgPool()
        self.head = Linear("head", channels, self.config.class_count, dtype=dtype)
        self.features = None

        layers = [self.stem, *self.blocks, self.head]
        self.params = ModelParams([p for layer in layers for p in layer.params()])
        if seed is not None:
            self.initialize(np.random.default_rng(seed))

    def initialize(self, rng: np.random.Generator) -> None:
        weights = [self.stem.conv.weight] + [b.conv.weight for b in self.blocks] + [self.head.weight]
        for p in weights:
            p.value[...] = kaiming_uniform_init(p.value.shape, rng)
        for block in self.blocks:
            block.bn.gamma.value.fill(1)
            block.bn.beta.value.fill(0)
            block.bn.running_mean.value.fill(0)
            block.bn.running_var.value.fill(1)
        self.head.bias.value.fill(0)
        self.params.zero_grad()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = self.stem.forward(x.astype(self.dtype, copy=False))
        for block in self.blocks:
            h = block.forward(h, train)
        self.features = h
        return self.head.forward(self.pool.forward(h))

    def feature_grad(self, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of the logits' weighted sum with respect to the last block's activations."""
        return self.pool.backward(self.head.backward(dlogits))

    def backward(self, dlogits: np.ndarray) -> None:
        dh = self.feature_grad(dlogits)
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        self.stem.backward(dh)

    def relu_masks(self) -> list[np.ndarray]:
        return [block.relu.mask for block in self.blocks]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False).argmax(axis=1)
