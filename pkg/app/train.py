"""SGD training loop, evaluation driver and checkpoint persistence."""
import json
import logging
import struct
import zlib
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, priors
from .errors import CorruptCheckpoint, FingerprintMismatch, MissingFile, NonFiniteLoss
from .evaluate import confusion_matrix, metrics_from_cm
from .nnet import GuidedNet, ModelParams, sgd_step, softmax_cross_entropy
from .schemas import EpochLog, MetricsReport, ModelConfig, StemVariant, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"GNET"
FORMAT_VERSION = 1
LOG_HEADER = "epoch,mean_loss,val_macro_f"


def config_fingerprint(config: ModelConfig) -> int:
    """crc32 of the config's canonical JSON text."""
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class TensorRecord:
    name: str
    value: np.ndarray
    frozen: bool


@dataclass(frozen=True)
class Checkpoint:
    fingerprint: int
    tensors: tuple[TensorRecord, ...]
    epochs: int
    seed: int

    @classmethod
    def from_model(cls, model: GuidedNet, epochs: int, seed: int) -> "Checkpoint":
        tensors = tuple(
            TensorRecord(p.name, p.value.astype("<f4"), p.frozen) for p in model.params
        )
        return cls(config_fingerprint(model.config), tensors, epochs, seed)

    def tensor(self, name: str) -> np.ndarray:
        for t in self.tensors:
            if t.name == name:
                return t.value
        raise KeyError(name)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<III", FORMAT_VERSION, checkpoint.fingerprint, len(checkpoint.tensors))]
    for t in checkpoint.tensors:
        name = t.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<BB", int(t.frozen), t.value.ndim))
        chunks.append(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
        chunks.append(np.ascontiguousarray(t.value, dtype="<f4").tobytes())
    chunks.append(struct.pack("<IQ", checkpoint.epochs, checkpoint.seed))
    path.write_bytes(b"".join(chunks))
    logger.info("saved checkpoint %s (%d tensors, fingerprint %08x)", path, len(checkpoint.tensors),
                checkpoint.fingerprint)


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CorruptCheckpoint(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with expected given, its fingerprint must match that config's."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic bytes")
    version, fingerprint, count = reader.unpack("<III")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported format version {version}")

    tensors = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpoint(f"{path}: tensor name is not UTF-8") from e
        frozen, rank = reader.unpack("<BB")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        value = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).copy()
        tensors.append(TensorRecord(name, value, bool(frozen)))
    epochs, seed = reader.unpack("<IQ")
    if reader.offset != len(reader.payload):
        raise CorruptCheckpoint(f"{path}: {len(reader.payload) - reader.offset} trailing bytes")

    checkpoint = Checkpoint(fingerprint, tuple(tensors), epochs, seed)
    if expected is not None and config_fingerprint(expected) != fingerprint:
        raise FingerprintMismatch(
            f"{path}: fingerprint {fingerprint:08x} does not match config ({config_fingerprint(expected):08x})"
        )
    return checkpoint


def default_model_configs() -> list[ModelConfig]:
    return [ModelConfig().with_variant(v) for v in StemVariant]


def resolve_model_config(checkpoint: Checkpoint, candidates: Iterable[ModelConfig] | None = None) -> ModelConfig:
    """Pick the candidate config (the four default variants unless given) matching the checkpoint."""
    for config in candidates if candidates is not None else default_model_configs():
        if config_fingerprint(config) == checkpoint.fingerprint:
            return config
    raise FingerprintMismatch(
        f"no known model config has fingerprint {checkpoint.fingerprint:08x}; pass the training config"
    )


def restore_model(checkpoint: Checkpoint, config: ModelConfig) -> GuidedNet:
    if config_fingerprint(config) != checkpoint.fingerprint:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {checkpoint.fingerprint:08x} does not match "
            f"{config.stem.variant.value} config ({config_fingerprint(config):08x})"
        )
    model = GuidedNet(config, dtype=np.float32, seed=None)
    names = [t.name for t in checkpoint.tensors]
    if names != model.params.names():
        raise CorruptCheckpoint(f"tensor names {names} do not match the model layout")
    for t in checkpoint.tensors:
        p = model.params[t.name]
        if t.value.shape != p.value.shape or t.frozen != p.frozen:
            raise CorruptCheckpoint(f"tensor {t.name}: shape {t.value.shape} does not match {p.value.shape}")
        p.value[...] = t.value

    prior = config.stem.prior
    expected = priors.make_gaussian_kernel(prior.kernel_size, prior.sigma).weights.astype(np.float32)
    if not np.array_equal(model.stem.gaussian.value, expected):
        raise CorruptCheckpoint("stored Gaussian kernel differs from its recorded spec")
    return model


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule over 1-based epochs."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return cfg.lr_initial if epoch <= cfg.lr_decay_epoch else cfg.lr_after


def _merge_singleton_tail(batches: Iterator[tuple[np.ndarray, np.ndarray]],
                          batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    # train-mode batch norm cannot normalise a single sample
    held = None
    for x, y in batches:
        if held is not None and batch_size > 1 and len(y) == 1:
            held = (np.concatenate([held[0], x]), np.concatenate([held[1], y]))
            continue
        if held is not None:
            yield held
        held = (x, y)
    if held is not None:
        yield held


def predict_manifest(model: GuidedNet, manifest: data.Manifest, root, batch_size: int = 32,
                     workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(true labels, predictions) for every record, in a fixed order."""
    truths, preds = [], []
    for x, y in data.batch_iter(manifest, root, batch_size, seed=0, workers=workers):
        truths.append(y)
        preds.append(model.predict(x))
    if not truths:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(truths), np.concatenate(preds)


def evaluate_manifest(model: GuidedNet, manifest: data.Manifest, root, batch_size: int = 32,
                      workers: int | None = None) -> MetricsReport:
    truths, preds = predict_manifest(model, manifest, root, batch_size, workers)
    return metrics_from_cm(confusion_matrix(truths, preds, model.config.class_count))


def evaluate_model(checkpoint: Checkpoint, manifest: data.Manifest, root, config: ModelConfig | None = None,
                   batch_size: int = 32, workers: int | None = None) -> MetricsReport:
    model = restore_model(checkpoint, config or resolve_model_config(checkpoint))
    return evaluate_manifest(model, manifest, root, batch_size, workers)


def train(cfg: TrainConfig, train_manifest: data.Manifest, root, val_manifest: data.Manifest | None = None,
          val_root=None, workers: int | None = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train with plain SGD and return the last epoch's weights.

    Weights start from a seeded Kaiming initialisation, or from the checkpoint
    at cfg.init_from when set (its fingerprint must match cfg.network).
    """
    if len(train_manifest) < 2:
        raise ValueError(f"training manifest has {len(train_manifest)} record(s); batch norm needs at least 2")
    if cfg.init_from is not None:
        model = restore_model(load_checkpoint(cfg.init_from, cfg.network), cfg.network)
        logger.info("initialised from checkpoint %s", cfg.init_from)
    else:
        model = GuidedNet(cfg.network, dtype=np.float32, seed=cfg.seed)
    params: ModelParams = model.params
    logger.info("training %s stem, %d learnable weights, %d samples, %d epochs",
                cfg.variant.value, sum(p.value.size for p in params.learnable()), len(train_manifest), cfg.epochs)

    log = []
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(epoch, cfg)
        batches = data.batch_iter(train_manifest, root, cfg.batch_size, cfg.seed, epoch,
                                  augment=cfg.augment, workers=workers)
        loss_sum, seen = 0.0, 0
        for b, (x, y) in enumerate(_merge_singleton_tail(batches, cfg.batch_size), start=1):
            loss, dlogits = softmax_cross_entropy(model.forward(x, train=True), y)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            model.backward(dlogits)
            sgd_step(params, lr)
            loss_sum += loss * len(y)
            seen += len(y)
            logger.debug("epoch %d batch %d loss %.4f", epoch, b, loss)

        val_f = None
        if val_manifest is not None and len(val_manifest):
            report = evaluate_manifest(model, val_manifest, val_root if val_root is not None else root,
                                       cfg.eval_batch_size, workers)
            val_f = report.macro.f
        entry = EpochLog(epoch=epoch, lr=lr, mean_loss=loss_sum / seen, val_macro_f=val_f)
        log.append(entry)
        logger.info("epoch %d/%d lr %g loss %.4f val macro-F %s", epoch, cfg.epochs, lr, entry.mean_loss,
                    "-" if val_f is None else f"{val_f:.4f}")

    return Checkpoint.from_model(model, cfg.epochs, cfg.seed), log


def write_training_log(log: list[EpochLog], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [LOG_HEADER]
    for e in log:
        val = "" if e.val_macro_f is None else f"{e.val_macro_f:.6f}"
        rows.append(f"{e.epoch},{e.mean_loss:.6f},{val}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
