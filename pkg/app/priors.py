"""Dark and bright channel priors.

Two families live here. The exact priors take hard extrema over a square
patch (edge-replicated at the border) and over the colour channels. The
network approximation smooths each channel with a fixed Gaussian kernel
(zero padding, strided) and then takes the channel-wise extremum; the
guided stem uses that path. The two intentionally disagree near borders.
"""
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidKernelSpec, ShapeMismatch
from .schemas import PriorConfig

Mode = Literal["min", "max"]

_REDUCERS = {"min": np.minimum, "max": np.maximum}


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray


def make_gaussian_kernel(size: int, sigma: float) -> GaussianKernel:
    if size < 1 or size % 2 == 0:
        raise InvalidKernelSpec(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise InvalidKernelSpec(f"sigma must be positive, got {sigma}")
    offsets = np.arange(size, dtype=np.float64) - size // 2
    d2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    weights = np.exp(-d2 / (2.0 * sigma * sigma))
    weights /= weights.sum()
    weights.setflags(write=False)
    return GaussianKernel(size=size, sigma=float(sigma), weights=weights)


def _reducer(mode: Mode):
    try:
        return _REDUCERS[mode]
    except KeyError:
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}") from None


def _running_extremum(values: np.ndarray, radius: int, op) -> np.ndarray:
    """van Herk / Gil-Werman running extremum along the last axis, edge-replicated."""
    n = values.shape[-1]
    width = 2 * radius + 1
    padded = np.pad(values, [(0, 0)] * (values.ndim - 1) + [(radius, radius)], mode="edge")
    blocks = -(-padded.shape[-1] // width)
    tail = blocks * width - padded.shape[-1]
    padded = np.pad(padded, [(0, 0)] * (values.ndim - 1) + [(0, tail)], mode="edge")
    grouped = padded.reshape(values.shape[:-1] + (blocks, width))

    prefix = op.accumulate(grouped, axis=-1).reshape(padded.shape)
    suffix = op.accumulate(grouped[..., ::-1], axis=-1)[..., ::-1].reshape(padded.shape)
    # window [i, i + width) = suffix from i within its block, prefix up to i + width - 1
    return op(suffix[..., :n], prefix[..., width - 1:width - 1 + n])


def sliding_extremum(values: np.ndarray, radius: int, mode: Mode = "min") -> np.ndarray:
    """Windowed min/max over a (2r+1)^2 square with edge replication, O(1) comparisons per pixel."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    op = _reducer(mode)
    if radius == 0:
        return values.copy()
    rows = _running_extremum(values, radius, op)
    return np.swapaxes(_running_extremum(np.swapaxes(rows, -1, -2), radius, op), -1, -2)


def naive_extremum(values: np.ndarray, radius: int, mode: Mode = "min") -> np.ndarray:
    """Reference windowed extremum: one reduction per window offset, O(r^2) per pixel."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    op = _reducer(mode)
    h, w = values.shape[-2:]
    padded = np.pad(values, [(0, 0)] * (values.ndim - 2) + [(radius, radius)] * 2, mode="edge")
    out = values.copy()
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out = op(out, padded[..., dy:dy + h, dx:dx + w])
    return out


def dark_channel(image: np.ndarray, radius: int = 7) -> np.ndarray:
    return sliding_extremum(image.min(axis=-1), radius, "min")


def bright_channel(image: np.ndarray, radius: int = 7) -> np.ndarray:
    return sliding_extremum(image.max(axis=-1), radius, "max")


def output_size(n: int, size: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - size) // stride + 1


def depthwise_gaussian_batch(batch: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Convolve every channel of an N x C x H x W batch with one fixed kernel.

    Products are accumulated offset by offset in a fixed order, so each output
    value does not depend on the batch it was computed in.
    """
    size = kernel.shape[0]
    h, w = batch.shape[-2:]
    ho, wo = output_size(h, size, stride, padding), output_size(w, size, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"{h}x{w} input too small for kernel {size}")
    padded = np.pad(batch, [(0, 0)] * (batch.ndim - 2) + [(padding, padding)] * 2)
    weights = kernel.astype(batch.dtype, copy=False)
    out = np.zeros(batch.shape[:-2] + (ho, wo), dtype=batch.dtype)
    for i in range(size):
        for j in range(size):
            out += weights[i, j] * padded[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return out


def depthwise_gaussian(image: np.ndarray, kernel: GaussianKernel, stride: int = 2, padding: int = 3) -> np.ndarray:
    """H x W x 3 image -> Ho x Wo x 3 map, each colour channel smoothed and subsampled."""
    planar = np.moveaxis(image, -1, 0)
    return np.moveaxis(depthwise_gaussian_batch(planar, kernel.weights, stride, padding), 0, -1)


def channel_extremum_pool(channels: np.ndarray, mode: Mode = "min", axis: int = -1) -> np.ndarray:
    if channels.shape[axis] != 3:
        raise ShapeMismatch(f"expected 3 channels on axis {axis}, got {channels.shape[axis]}")
    return _reducer(mode).reduce(channels, axis=axis)


def prior_maps_batch(batch: np.ndarray, kernel: np.ndarray, cfg: PriorConfig) -> tuple[np.ndarray, np.ndarray]:
    """N x 3 x H x W -> (bright, dark), each N x 1 x H' x W'."""
    smoothed = depthwise_gaussian_batch(batch, kernel, cfg.stride, cfg.padding)
    bright = channel_extremum_pool(smoothed, "max", axis=1)[:, None]
    dark = channel_extremum_pool(smoothed, "min", axis=1)[:, None]
    return bright, dark


def prior_maps(
    image: np.ndarray, cfg: PriorConfig | None = None, kernel: GaussianKernel | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-smoothed bright and dark prior maps at half resolution for the default config."""
    cfg = cfg or PriorConfig()
    kernel = kernel or make_gaussian_kernel(cfg.kernel_size, cfg.sigma)
    batch = np.moveaxis(image, -1, 0)[None]
    bright, dark = prior_maps_batch(batch, kernel.weights, cfg)
    return bright[0, 0], dark[0, 0]
