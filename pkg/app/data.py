"""Synthetic fundus images, dataset manifests, k-fold splits and batching."""
import logging
import math
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio, imgproc, priors
from .config import settings
from .errors import ImageLoadError, MissingFile, ParseError, ShapeMismatch, TooFewSamples
from .schemas import AugmentFlags, FovCircle, QualityLabel, SyntheticParams

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"

# relative attenuation of (r, g, b) under a vessel and gain over the optic disc
VESSEL_TINT = np.array([0.85, 1.0, 1.0])
DISC_TINT = np.array([1.0, 0.9, 0.6])


def _vessel_map(rng: np.random.Generator, shape: tuple[int, int], origin: tuple[float, float],
                radius: float, params: SyntheticParams) -> np.ndarray:
    stamp = np.zeros(shape)
    h, w = shape
    for k in range(params.vessel_count):
        heading = 2.0 * math.pi * k / params.vessel_count + rng.uniform(-0.3, 0.3)
        bend = rng.uniform(-1.5, 1.5) / radius
        length = rng.uniform(0.8, 1.3) * radius
        s = np.arange(0.0, length, 0.5)
        theta = heading + bend * s
        xs = origin[0] + np.cumsum(0.5 * np.cos(theta))
        ys = origin[1] + np.cumsum(0.5 * np.sin(theta))
        ix, iy = np.rint(xs).astype(np.intp), np.rint(ys).astype(np.intp)
        keep = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        stamp[iy[keep], ix[keep]] = 1.0
    sigma = params.vessel_width
    # a blurred one-pixel line peaks at 1 / (sqrt(2 pi) sigma)
    return np.clip(ndimage.gaussian_filter(stamp, sigma) * math.sqrt(2.0 * math.pi) * sigma, 0.0, 1.0)


def render_fundus(label: QualityLabel, rng: np.random.Generator,
                  params: SyntheticParams | None = None) -> tuple[np.ndarray, FovCircle]:
    """Render a synthetic fundus photograph and return it with its true field-of-view circle."""
    params = params or SyntheticParams()
    label = QualityLabel(label)
    size = params.image_size
    centre = (size - 1) / 2.0
    jitter = params.fov_jitter_frac * size
    circle = FovCircle(
        cx=centre + rng.uniform(-jitter, jitter),
        cy=centre + rng.uniform(-jitter, jitter),
        r=params.fov_radius_frac * size * rng.uniform(0.95, 1.05),
    )
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = (xx - circle.cx) / circle.r, (yy - circle.cy) / circle.r
    rho2 = u * u + v * v

    image = np.asarray(params.base_color)[None, None, :] * (1.0 - 0.15 * rho2)[..., None]

    disc_x = circle.cx + rng.choice([-1.0, 1.0]) * 0.35 * circle.r
    disc_y = circle.cy + rng.uniform(-0.1, 0.1) * circle.r
    disc_r = params.disc_radius_frac * size
    disc = np.exp(-((xx - disc_x) ** 2 + (yy - disc_y) ** 2) / (2.0 * disc_r * disc_r))
    image = image + params.disc_brightness * disc[..., None] * DISC_TINT

    vessels = _vessel_map(rng, (size, size), (disc_x, disc_y), circle.r, params)
    image = image * (1.0 - params.vessel_depth * vessels[..., None] * VESSEL_TINT)

    deg = params.degradations[label]
    amplitude = rng.uniform(*deg.illumination)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    if rng.random() < 0.5:
        field = amplitude * (u * math.cos(phi) + v * math.sin(phi))
    else:
        field = amplitude * rng.choice([-1.0, 1.0]) * (2.0 * rho2 - 1.0)
    image = image + field[..., None]

    sigma = rng.uniform(*deg.blur_sigma)
    if sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0))

    if rng.random() < deg.occlusion_prob:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(0.0, 0.6) * circle.r
        ox, oy = circle.cx + dist * math.cos(angle), circle.cy + dist * math.sin(angle)
        spread = rng.uniform(0.15, 0.3) * circle.r
        shade = np.exp(-((xx - ox) ** 2 + (yy - oy) ** 2) / (2.0 * spread * spread))
        image = image * (1.0 - 0.8 * shade[..., None])

    image = image + rng.normal(0.0, deg.noise_sigma, size=image.shape)
    mask = imgproc.fov_mask((size, size), circle)
    return np.clip(image, 0.0, 1.0) * mask[..., None], circle


def synth_fundus(label: QualityLabel, rng: np.random.Generator, params: SyntheticParams | None = None) -> np.ndarray:
    return render_fundus(label, rng, params)[0]


def dark_channel_unevenness(image: np.ndarray, circle: FovCircle, radius: int = 7) -> float:
    """Spatial standard deviation of the dark channel over pixels whose whole patch lies in the FoV."""
    dark = priors.dark_channel(image, radius)
    mask = imgproc.fov_mask(dark.shape, circle, inset=radius * math.sqrt(2.0) + 1.0)
    return float(dark[mask].std())


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: QualityLabel


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...] = ()

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.path in seen:
                raise ValueError(f"duplicate manifest path {record.path}")
            seen.add(record.path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def counts(self) -> dict[QualityLabel, int]:
        out = {label: 0 for label in QualityLabel}
        for record in self.records:
            out[record.label] += 1
        return out


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{r.path},{r.label.slug}\n" for r in manifest)
    path.write_text(text, encoding="utf-8")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    records, seen = [], set()
    slugs = {label.slug: label for label in QualityLabel}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "," not in line:
            raise ParseError(path, line_no, "expected 'path,label'")
        rel, slug = line.rsplit(",", 1)
        if not rel:
            raise ParseError(path, line_no, "empty path")
        if slug not in slugs:
            raise ParseError(path, line_no, f"unknown label '{slug}'")
        if rel in seen:
            raise ParseError(path, line_no, f"duplicate path '{rel}'")
        seen.add(rel)
        records.append(ManifestRecord(rel, slugs[slug]))
    return Manifest(tuple(records))


def generate_dataset(out_dir, counts: dict[QualityLabel, int], seed: int,
                     params: SyntheticParams | None = None) -> Manifest:
    """Render counts[label] images per label under out_dir and write its manifest."""
    params = params or SyntheticParams()
    out_dir = Path(out_dir)
    records = []
    for label in QualityLabel:
        for i in range(counts.get(label, 0)):
            image = synth_fundus(label, np.random.default_rng([seed, int(label), i]), params)
            rel = f"{label.slug}/{label.slug}_{i:05d}.png"
            imageio.write_png(out_dir / rel, image)
            records.append(ManifestRecord(rel, label))
    manifest = Manifest(tuple(records))
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info("wrote %d synthetic images to %s (%s)", len(manifest), out_dir,
                ", ".join(f"{label.slug}={n}" for label, n in manifest.counts().items()))
    return manifest


@dataclass(frozen=True)
class Fold:
    train: Manifest
    validation: Manifest


def kfold_split(manifest: Manifest, k: int, seed: int) -> list[Fold]:
    """Stratified k folds: each class is shuffled and dealt round-robin across the folds.

    Dealing continues where the previous class stopped, so total fold sizes
    also differ by at most one. Records keep their manifest order inside a fold.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    records = manifest.records
    fold_of = [0] * len(records)
    offset = 0
    for label in QualityLabel:
        members = [i for i, r in enumerate(records) if r.label == label]
        if not members:
            continue
        if len(members) < k:
            raise TooFewSamples(label.slug, len(members), k)
        for j, pick in enumerate(rng.permutation(len(members))):
            fold_of[members[pick]] = (offset + j) % k
        offset = (offset + len(members)) % k

    folds = []
    for f in range(k):
        val = tuple(r for r, fo in zip(records, fold_of) if fo == f)
        train = tuple(r for r, fo in zip(records, fold_of) if fo != f)
        folds.append(Fold(train=Manifest(train), validation=Manifest(val)))
    return folds


def _load_record(root: Path, record: ManifestRecord) -> np.ndarray:
    path = root / record.path
    try:
        return imageio.read_image(path)
    except MissingFile as e:
        raise ImageLoadError(path, "file not found") from e


def batch_iter(manifest: Manifest, root, batch_size: int, seed: int, epoch: int = 0,
               augment: AugmentFlags | None = None,
               workers: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (N x 3 x H x W float32 images, N int64 labels) over a seeded permutation of the manifest.

    The last batch may be partial. Each record's augmentation stream is seeded
    by (seed, epoch, position), so prefetching threads do not change results.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    root = Path(root)
    records = manifest.records
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    workers = settings.prefetch_workers if workers is None else workers

    def load(position: int) -> np.ndarray:
        image = _load_record(root, records[order[position]])
        if augment is not None:
            image = imgproc.augment(image, np.random.default_rng([seed, epoch, position]), augment)
        return image

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for start in range(0, len(records), batch_size):
            positions = range(start, min(start + batch_size, len(records)))
            images = list(executor.map(load, positions) if executor else map(load, positions))
            shapes = {img.shape for img in images}
            if len(shapes) > 1:
                raise ShapeMismatch(f"images in one batch differ in shape: {sorted(shapes)}")
            batch = np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float32)
            labels = np.array([int(records[order[p]].label) for p in positions], dtype=np.int64)
            yield batch, labels
    finally:
        if executor:
            executor.shutdown()
