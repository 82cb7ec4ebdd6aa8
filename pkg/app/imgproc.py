"""Fundus preprocessing: field-of-view detection, crop/pad/resize and augmentation.

Images are float arrays of shape H x W x 3 with values in [0, 1]. Pixel
(y, x) has its centre at integer coordinates; circles use the same frame.
"""
import logging
import math

import numpy as np
from scipy import ndimage

from .errors import EmptyCrop, NoFovFound
from .schemas import AugmentFlags, FovCircle, PreprocessConfig

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MIN_SIDE = 8


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < MIN_SIDE or image.shape[1] < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {image.shape[:2]}")


def luminance(image: np.ndarray) -> np.ndarray:
    return image @ LUMA_WEIGHTS


def _per_channel(fn, array: np.ndarray) -> np.ndarray:
    if array.ndim == 2:
        return fn(array)
    return np.stack([fn(array[..., c]) for c in range(array.shape[-1])], axis=-1)


def _half_pixel_coords(n_in: int, n_out: int) -> np.ndarray:
    return np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)


def resize_bilinear(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and clamped edges, on 2-D or H x W x C arrays."""
    if array.shape[:2] == (height, width):
        return array.copy()
    grid = np.array(np.meshgrid(
        _half_pixel_coords(array.shape[0], height), _half_pixel_coords(array.shape[1], width), indexing="ij"
    ))
    return _per_channel(lambda plane: ndimage.map_coordinates(plane, grid, order=1, mode="nearest"), array)


def fov_mask(shape: tuple[int, int], circle: FovCircle, inset: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (xx - circle.cx) ** 2 + (yy - circle.cy) ** 2 <= (circle.r - inset) ** 2


def peak_vote_count(cy: np.ndarray, cx: np.ndarray, ri: np.ndarray, inside: np.ndarray,
                    peak: tuple[int, int, int]) -> int:
    """Edge pixels with at least one vote in the 3x3x3 cell block around peak; each pixel counts once."""
    py, px, pr = peak
    near = inside & (np.abs(cy - py) <= 1) & (np.abs(cx - px) <= 1) & (np.abs(ri - pr) <= 1)
    return int(np.count_nonzero(near.any(axis=1)))


def detect_fov(image: np.ndarray, cfg: PreprocessConfig | None = None) -> FovCircle:
    """Find the circular field of view with a gradient-directed Hough transform.

    Edge pixels (Sobel magnitude of luminance above its percentile threshold)
    vote for centres along their gradient, toward the brighter side, at every
    candidate radius. The peak of the 3x3x3 box-summed accumulator wins and is
    refined to sub-pixel precision by a local centroid. The circle is rejected
    with NoFovFound when fewer distinct edge pixels than min_vote_fraction of
    its circumference vote into the peak block.
    """
    cfg = cfg or PreprocessConfig()
    _check_image(image)
    h, w = image.shape[:2]

    lum = luminance(image)
    scale = min(1.0, cfg.hough_max_size / max(h, w))
    if scale < 1.0:
        lum = resize_bilinear(lum, max(MIN_SIDE, round(h * scale)), max(MIN_SIDE, round(w * scale)))
    mh, mw = lum.shape
    sy, sx = mh / h, mw / w

    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    if not np.any(mag > 0):
        raise NoFovFound("image has no edges")
    threshold = np.percentile(mag, cfg.edge_percentile)
    ys, xs = np.nonzero((mag >= threshold) & (mag > 0))
    ux = gx[ys, xs] / mag[ys, xs]
    uy = gy[ys, xs] / mag[ys, xs]

    side = min(mh, mw)
    radii = np.arange(max(1, math.floor(cfg.radius_min_frac * side)), math.ceil(cfg.radius_max_frac * side) + 1)
    cx = np.rint(xs[:, None] + radii[None, :] * ux[:, None]).astype(np.intp)
    cy = np.rint(ys[:, None] + radii[None, :] * uy[:, None]).astype(np.intp)
    ri = np.broadcast_to(np.arange(radii.size), cx.shape)
    inside = (cx >= 0) & (cx < mw) & (cy >= 0) & (cy < mh)

    acc = np.zeros((mh, mw, radii.size))
    np.add.at(acc, (cy[inside], cx[inside], ri[inside]), 1.0)
    score = ndimage.uniform_filter(acc, size=3, mode="constant") * 27.0

    window = np.zeros((mh, mw), dtype=bool)
    my, mx = cfg.center_margin_frac * mh, cfg.center_margin_frac * mw
    window[math.ceil(my):math.floor(mh - my), math.ceil(mx):math.floor(mw - mx)] = True
    score[~window] = -1.0

    py, px, pr = np.unravel_index(np.argmax(score), score.shape)
    peak = peak_vote_count(cy, cx, ri, inside, (py, px, pr))
    expected = 2.0 * math.pi * radii[pr]
    if peak < cfg.min_vote_fraction * expected:
        raise NoFovFound(f"peak vote {peak} below {cfg.min_vote_fraction:.0%} of {expected:.0f}")

    ylo, yhi = max(py - 1, 0), min(py + 2, mh)
    xlo, xhi = max(px - 1, 0), min(px + 2, mw)
    rlo, rhi = max(pr - 1, 0), min(pr + 2, radii.size)
    local = acc[ylo:yhi, xlo:xhi, rlo:rhi]
    total = local.sum()
    gy_idx, gx_idx, gr_idx = np.meshgrid(
        np.arange(ylo, yhi), np.arange(xlo, xhi), radii[rlo:rhi], indexing="ij"
    )
    fy = (local * gy_idx).sum() / total
    fx = (local * gx_idx).sum() / total
    fr = (local * gr_idx).sum() / total

    circle = FovCircle(
        cx=(fx + 0.5) / sx - 0.5,
        cy=(fy + 0.5) / sy - 0.5,
        r=fr / ((sx + sy) / 2.0),
    )
    logger.debug("fov circle %s (peak %.0f / %.0f)", circle, peak, expected)
    return circle


def crop_pad_resize(image: np.ndarray, circle: FovCircle, cfg: PreprocessConfig | None = None) -> np.ndarray:
    cfg = cfg or PreprocessConfig()
    h, w = image.shape[:2]
    x0 = max(math.ceil(circle.cx - circle.r), 0)
    x1 = min(math.floor(circle.cx + circle.r) + 1, w)
    y0 = max(math.ceil(circle.cy - circle.r), 0)
    y1 = min(math.floor(circle.cy + circle.r) + 1, h)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"circle {circle} does not overlap the {h}x{w} image")

    crop = image[y0:y1, x0:x1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    top, left = (side - ch) // 2, (side - cw) // 2
    square = np.zeros((side, side, image.shape[2]), dtype=np.float64)
    square[top:top + ch, left:left + cw] = crop

    out = resize_bilinear(square, cfg.target_size, cfg.target_size)
    return np.clip(out, 0.0, 1.0)


def preprocess(image: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    cfg = cfg or PreprocessConfig()
    h, w = image.shape[:2]
    if cfg.fov_enabled:
        circle = detect_fov(image, cfg)
    else:
        circle = FovCircle(cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, r=max(h, w) / 2.0)
    return crop_pad_resize(image, circle, cfg)


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre, zero fill outside."""
    h, w = image.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # output (row, col) -> input (row, col)
    matrix = np.array([[c, s], [-s, c]])
    offset = centre - matrix @ centre
    return _per_channel(
        lambda plane: ndimage.affine_transform(plane, matrix, offset, order=1, mode="grid-constant", cval=0.0),
        image,
    )


def augment(image: np.ndarray, rng: np.random.Generator, flags: AugmentFlags | None = None) -> np.ndarray:
    flags = flags or AugmentFlags()
    # draw all three variates unconditionally so the stream does not depend on the flags
    u_h, u_v = rng.random(2)
    angle = rng.uniform(0.0, 360.0)

    out = image
    if u_h < flags.hflip_prob:
        out = out[:, ::-1]
    if u_v < flags.vflip_prob:
        out = out[::-1]
    if flags.rotate:
        angle = flags.angle if flags.angle is not None else angle
        if angle % 360.0 != 0.0:
            out = rotate(out, angle)
    return np.ascontiguousarray(out)
