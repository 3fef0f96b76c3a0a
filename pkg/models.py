from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class LossKind(str, Enum):
    """Training objectives, valued by their CLI/config names"""

    chi2 = "chi2"
    tv = "tv"
    cosine = "cosine"
    bhattacharyya = "bhattacharyya"
    kl = "kl"
    euclidean = "euclidean"
    huber = "huber"

    @property
    def is_distribution_distance(self) -> bool:
        return self not in (LossKind.euclidean, LossKind.huber)

    @property
    def is_symmetric(self) -> bool:
        return self not in (LossKind.chi2, LossKind.kl)


class LossSpec(BaseModel):
    """Selector and parameters for one loss function"""

    model_config = ConfigDict(frozen=True)

    kind: LossKind
    epsilon: float = Field(
        default=1e-12, gt=0, le=1e-6, description="Probability floor for chi2 and KL, coefficient floor for Bhattacharyya"
    )
    huber_delta: float = Field(default=1.0, gt=0, description="Huber threshold")


GT_PRESETS: Dict[str, Tuple[int, float]] = {
    "salicon": (153, 19.0),
    "osie": (168, 24.0),
    # 64x64 synthetic images
    "toy": (19, 3.0),
}


class GtParams(BaseModel):
    """Gaussian kernel used to turn fixations into a ground-truth map"""

    model_config = ConfigDict(frozen=True)

    kernel_width: int = Field(..., gt=0, description="Kernel width in pixels (odd)")
    sigma: float = Field(..., gt=0, description="Standard deviation in pixels")

    @field_validator("kernel_width")
    @classmethod
    def _round_up_to_odd(cls, value: int) -> int:
        # An even width has no center tap; 168 becomes 169.
        return value if value % 2 == 1 else value + 1

    @classmethod
    def preset(cls, name: str) -> "GtParams":
        if name not in GT_PRESETS:
            raise ValueError(
                f"Unknown GT preset '{name}'. Known presets: {', '.join(GT_PRESETS)}"
            )
        width, sigma = GT_PRESETS[name]
        return cls(kernel_width=width, sigma=sigma)


class CenterBiasParams(BaseModel):
    """Blur and center-bias post-processing of a predicted distribution"""

    model_config = ConfigDict(frozen=True)

    blur_sigma: float = Field(default=0.0, ge=0, description="Blur sigma in pixels")
    bias_weight: float = Field(default=0.0, ge=0, le=1, description="Center weight")
    bias_sigma: float = Field(
        default=0.25, gt=0, description="Center Gaussian sigma, fraction of diagonal"
    )


class SynthConfig(BaseModel):
    """Synthetic fixation dataset parameters"""

    model_config = ConfigDict(frozen=True)

    n_images: int = Field(default=100, gt=0)
    height: int = Field(default=64, gt=0)
    width: int = Field(default=64, gt=0)
    blobs_min: int = Field(default=1, gt=0)
    blobs_max: int = Field(default=3, gt=0)
    fixations_per_image: int = Field(default=60, gt=0)
    center_bias_weight: float = Field(default=0.2, ge=0, le=1)
    noise_sigma: float = Field(default=0.05, ge=0)
    channels: int = Field(default=1, description="1 (grayscale) or 3 (RGB)")
    seed: int = 0
    gt: GtParams = Field(default_factory=lambda: GtParams.preset("toy"))

    @field_validator("channels")
    @classmethod
    def _check_channels(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        return value

    @model_validator(mode="after")
    def _check_blob_range(self) -> "SynthConfig":
        if self.blobs_min > self.blobs_max:
            raise ValueError("blobs_min must not exceed blobs_max")
        return self


class LayerKind(str, Enum):
    conv = "conv"
    relu = "relu"
    maxpool = "maxpool"


class LayerSpec(BaseModel):
    """One layer of the fully-convolutional network"""

    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    in_channels: int = Field(default=0, ge=0)
    out_channels: int = Field(default=0, ge=0)
    kernel_size: int = Field(default=1, gt=0)
    lr_multiplier: float = Field(default=1.0, ge=0)
    init_sigma: Optional[float] = Field(
        default=None, gt=0, description="Gaussian init sigma; None means sqrt(2/fan_in)"
    )

    @model_validator(mode="after")
    def _check_conv(self) -> "LayerSpec":
        if self.kind == LayerKind.conv:
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv layers need positive in/out channels")
            if self.kernel_size % 2 == 0:
                raise ValueError("conv kernel_size must be odd")
        return self


class TrainConfig(BaseModel):
    """SGD training protocol"""

    model_config = ConfigDict(frozen=True)

    base_lr: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0005, ge=0)
    batch_size: int = Field(default=10, gt=0)
    epochs: int = Field(default=10, ge=0)
    loss: LossSpec = Field(default_factory=lambda: LossSpec(kind=LossKind.bhattacharyya))
    seed: int = 0
    frozen_prefix: int = Field(
        default=0, ge=0, description="Leading layers excluded from updates"
    )
    snapshot_every: int = Field(
        default=0, ge=0, description="Iterations between probe snapshots (0 = off)"
    )
    eval_splits: int = Field(
        default=10, gt=0, description="Random splits for validation AUC-Borji/sAUC"
    )


class MetricReport(BaseModel):
    """Evaluation of one predicted map against one image's fixations"""

    image: Optional[str] = None
    auc_judd: Optional[float] = None
    auc_borji: Optional[float] = None
    sauc: Optional[float] = None
    cc: Optional[float] = None
    nss: Optional[float] = None
    sim: Optional[float] = None
    emd: Optional[float] = None
    # Echoed parameters
    n_splits: Optional[int] = None
    n_neg: Optional[int] = None
    seed: Optional[int] = None
    emd_grid: Optional[int] = None


METRIC_NAMES: Tuple[str, ...] = ("auc_judd", "auc_borji", "sauc", "cc", "nss", "sim", "emd")

# Metrics used to pick the best validation epoch; higher is better for all.
SELECTION_METRICS: Tuple[str, ...] = ("auc_judd", "sauc", "cc", "nss")


class LossBenchRow(BaseModel):
    """Aggregate validation metrics of one loss comparison run"""

    loss: LossKind
    seed: int
    split: int = 0
    selection: str = Field(..., description="'final', 'best' or 'epoch' (curve point)")
    epoch: int
    train_loss: Optional[float] = None
    auc_judd: Optional[float] = None
    auc_borji: Optional[float] = None
    sauc: Optional[float] = None
    cc: Optional[float] = None
    nss: Optional[float] = None
    sim: Optional[float] = None
    emd: Optional[float] = None


class SampleEntry(BaseModel):
    """File paths of one sample, relative to the manifest"""

    image: str
    fixations: str
    gt: str


class DatasetManifest(BaseModel):
    """Index of a synthetic dataset written to disk"""

    version: int = 1
    height: int
    width: int
    channels: int
    gt: GtParams
    synth: Optional[SynthConfig] = None
    samples: List[SampleEntry] = Field(default_factory=list)


class GradcheckReport(BaseModel):
    """Result of an analytic-vs-numeric gradient certification"""

    target: str = Field(..., description="'loss' or 'net'")
    loss: LossKind
    trials: int
    h: float
    seed: int
    max_rel_error: float
    tolerance: float
    passed: bool
