from enum import Enum, IntEnum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class QualityLabel(IntEnum):
    GOOD = 0
    USABLE = 1
    REJECT = 2

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "QualityLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown quality label '{text}'") from None


class FovCircle(BaseModel):
    model_config = ConfigDict(frozen=True)

    cx: float
    cy: float
    r: float = Field(gt=0)


class PreprocessConfig(BaseModel):
    target_size: int = Field(224, ge=32)
    fov_enabled: bool = True
    edge_percentile: float = Field(95.0, gt=0, lt=100)
    radius_min_frac: float = Field(0.35, gt=0, le=0.75)
    radius_max_frac: float = Field(0.60, gt=0, le=0.75)
    # centres are searched in the middle (1 - 2 * margin) of each axis
    center_margin_frac: float = Field(0.2, ge=0, lt=0.5)
    hough_max_size: int = Field(256, ge=32)
    min_vote_fraction: float = Field(0.25, gt=0, le=1)

    @field_validator("target_size")
    @classmethod
    def _even_size(cls, v: int) -> int:
        if v % 2:
            raise ValueError("target_size must be even")
        return v

    @model_validator(mode="after")
    def _radius_range(self):
        if self.radius_min_frac > self.radius_max_frac:
            raise ValueError("radius_min_frac must not exceed radius_max_frac")
        return self


class PriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    patch_radius: int = Field(7, ge=0)
    kernel_size: int = Field(7, ge=1)
    sigma: float = Field(1.5, gt=0)
    stride: int = Field(2, ge=1)
    padding: int = Field(3, ge=0)

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v


class StemVariant(str, Enum):
    BASELINE = "baseline"
    DARK_ONLY = "dark_only"
    BRIGHT_ONLY = "bright_only"
    DARK_BRIGHT = "dark_bright"

    @property
    def uses_bright(self) -> bool:
        return self in (StemVariant.BRIGHT_ONLY, StemVariant.DARK_BRIGHT)

    @property
    def uses_dark(self) -> bool:
        return self in (StemVariant.DARK_ONLY, StemVariant.DARK_BRIGHT)

    @property
    def prior_channels(self) -> int:
        return int(self.uses_bright) + int(self.uses_dark)


class GuidedStemConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: StemVariant = StemVariant.DARK_BRIGHT
    total_channels: int = Field(64, ge=1)
    kernel_size: int = Field(7, ge=1)
    stride: int = Field(2, ge=1)
    padding: int = Field(3, ge=0)
    prior: PriorConfig = PriorConfig()

    @property
    def learned_channels(self) -> int:
        return self.total_channels - self.variant.prior_channels

    @model_validator(mode="after")
    def _geometry(self):
        if self.learned_channels <= 0:
            raise ValueError("stem needs at least one learned channel")
        # both paths must land on the same output grid
        same_grid = (
            self.stride == self.prior.stride
            and 2 * self.padding - self.kernel_size == 2 * self.prior.padding - self.prior.kernel_size
        )
        if not same_grid:
            raise ValueError("learned convolution and prior path must share output geometry")
        return self


class ConvBlockSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_channels: int = Field(ge=1)
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(2, ge=1)
    padding: int = Field(1, ge=0)


def _default_blocks() -> list[ConvBlockSpec]:
    return [ConvBlockSpec(out_channels=32), ConvBlockSpec(out_channels=32)]


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    stem: GuidedStemConfig = GuidedStemConfig()
    blocks: list[ConvBlockSpec] = Field(default_factory=_default_blocks, min_length=1)
    class_count: int = Field(3, ge=2)

    def with_variant(self, variant: StemVariant | str) -> "ModelConfig":
        stem = self.stem.model_copy(update={"variant": StemVariant(variant)})
        return self.model_copy(update={"stem": stem})


class AugmentFlags(BaseModel):
    model_config = ConfigDict(frozen=True)

    hflip_prob: float = Field(0.5, ge=0, le=1)
    vflip_prob: float = Field(0.5, ge=0, le=1)
    rotate: bool = True
    # fixed angle in degrees; None draws uniformly from [0, 360)
    angle: float | None = None


class TrainConfig(BaseModel):
    epochs: int = Field(15, ge=0)
    # train-mode batch norm needs at least two samples per batch
    batch_size: int = Field(8, ge=2)
    lr_initial: float = Field(0.01, gt=0)
    lr_decay_epoch: int = Field(10, ge=0)
    lr_after: float = Field(0.001, gt=0)
    seed: int = Field(0, ge=0)
    network: ModelConfig = ModelConfig()
    augment: AugmentFlags | None = AugmentFlags()
    eval_batch_size: int = Field(32, ge=1)
    # start from this checkpoint instead of a fresh initialisation; its fingerprint must match network
    init_from: Path | None = None

    @property
    def variant(self) -> StemVariant:
        return self.network.stem.variant

    @model_validator(mode="before")
    @classmethod
    def _variant_shorthand(cls, data):
        if isinstance(data, dict) and "variant" in data:
            data = dict(data)
            variant = data.pop("variant")
            network = data.get("network", {})
            if isinstance(network, ModelConfig):
                network = network.model_dump()
            network = dict(network)
            network["stem"] = {**dict(network.get("stem", {})), "variant": variant}
            data["network"] = network
        return data

    @model_validator(mode="after")
    def _schedule(self):
        if self.lr_decay_epoch > self.epochs:
            raise ValueError("lr_decay_epoch must not exceed epochs")
        return self


class LabelDegradation(BaseModel):
    model_config = ConfigDict(frozen=True)

    illumination: tuple[float, float]
    blur_sigma: tuple[float, float]
    noise_sigma: float = Field(ge=0)
    occlusion_prob: float = Field(0.0, ge=0, le=1)

    @field_validator("illumination", "blur_sigma")
    @classmethod
    def _ordered(cls, v: tuple[float, float]) -> tuple[float, float]:
        lo, hi = v
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid range {v}")
        return v


def _default_degradations() -> dict[QualityLabel, LabelDegradation]:
    return {
        QualityLabel.GOOD: LabelDegradation(illumination=(0.0, 0.05), blur_sigma=(0.0, 0.4), noise_sigma=0.005),
        QualityLabel.USABLE: LabelDegradation(illumination=(0.15, 0.35), blur_sigma=(0.4, 1.2), noise_sigma=0.01),
        QualityLabel.REJECT: LabelDegradation(
            illumination=(0.45, 0.8), blur_sigma=(1.2, 2.5), noise_sigma=0.02, occlusion_prob=0.5
        ),
    }


class SyntheticParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(128, ge=32)
    fov_radius_frac: float = Field(0.42, gt=0.2, lt=0.5)
    fov_jitter_frac: float = Field(0.03, ge=0, lt=0.1)
    base_color: tuple[float, float, float] = (0.78, 0.36, 0.16)
    vessel_count: int = Field(8, ge=0)
    vessel_width: float = Field(1.0, gt=0)
    vessel_depth: float = Field(0.45, ge=0, le=1)
    disc_radius_frac: float = Field(0.07, gt=0)
    disc_brightness: float = Field(0.3, ge=0, le=1)
    degradations: dict[QualityLabel, LabelDegradation] = Field(default_factory=_default_degradations)

    @model_validator(mode="after")
    def _bands(self):
        if set(self.degradations) != set(QualityLabel):
            raise ValueError("degradations must cover every quality label")
        bands = [self.degradations[label].illumination for label in QualityLabel]
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if lo <= hi:
                raise ValueError("illumination bands must be increasing and non-overlapping")
        return self


class ClassScores(BaseModel):
    precision: list[float]
    recall: list[float]
    f: list[float]


class MacroScores(BaseModel):
    precision: float
    recall: float
    f: float


class MetricsReport(BaseModel):
    accuracy: float
    per_class: ClassScores
    macro: MacroScores
    confusion: list[list[int]]
    runs: list[float] | None = None


class RunSummary(BaseModel):
    accuracy: float
    precision: float
    recall: float
    f: float
    f_std: float
    runs: list[float]


class EpochLog(BaseModel):
    epoch: int
    lr: float
    mean_loss: float
    val_macro_f: float | None = None
