import os

import numpy as np
import pytest

from app import data, imageio
from app.schemas import QualityLabel

RUN_SLOW = os.environ.get("RIQA_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow acceptance run; set RIQA_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_toy_set(root, per_class: int = 8, size: int = 16, seed: int = 0,
                  labels=(QualityLabel.GOOD, QualityLabel.REJECT)) -> data.Manifest:
    """Near-constant images whose brightness alone separates the labels."""
    gen = np.random.default_rng(seed)
    levels = {QualityLabel.GOOD: 0.8, QualityLabel.USABLE: 0.5, QualityLabel.REJECT: 0.2}
    records = []
    for label in labels:
        for i in range(per_class):
            level = levels[label] + gen.uniform(-0.05, 0.05)
            image = np.clip(level + gen.uniform(-0.02, 0.02, size=(size, size, 3)), 0, 1)
            rel = f"{label.slug}/{i:03d}.png"
            imageio.write_png(root / rel, image)
            records.append(data.ManifestRecord(rel, label))
    manifest = data.Manifest(tuple(records))
    data.save_manifest(manifest, root / data.MANIFEST_NAME)
    return manifest


@pytest.fixture
def toy_set(tmp_path):
    root = tmp_path / "toy"
    return write_toy_set(root), root


def disk_image(size=128, cx=64.0, cy=60.0, r=50.0, color=(0.8, 0.4, 0.2)):
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return inside[..., None] * np.asarray(color)[None, None, :]
