import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ConditionMode = Literal["image_only", "category_name", "content_image", "both"]
BoxSource = Literal["ground_truth", "detector", "random_crop"]
ShapeKind = Literal["circle", "square", "triangle", "ring", "cross"]


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are errors"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True, ser_json_inf_nan="constants")


class CategorySpec(StrictModel):
    id: int = Field(ge=0)
    name: str
    shape: ShapeKind
    color: tuple[float, float, float]


DEFAULT_PALETTE = [
    CategorySpec(id=0, name="circle", shape="circle", color=(0.95, 0.85, 0.10)),
    CategorySpec(id=1, name="square", shape="square", color=(0.85, 0.20, 0.80)),
    CategorySpec(id=2, name="triangle", shape="triangle", color=(0.10, 0.80, 0.85)),
    CategorySpec(id=3, name="ring", shape="ring", color=(0.95, 0.55, 0.10)),
    CategorySpec(id=4, name="cross", shape="cross", color=(0.97, 0.97, 0.97)),
    CategorySpec(id=5, name="red triangle", shape="triangle", color=(0.90, 0.10, 0.10)),
    CategorySpec(id=6, name="blue square", shape="square", color=(0.15, 0.25, 0.95)),
    CategorySpec(id=7, name="green circle", shape="circle", color=(0.10, 0.75, 0.20)),
]


class SceneGenConfig(StrictModel):
    image_size: int = Field(default=64, ge=16)
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=8, ge=1)
    max_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    min_box_area: int = Field(default=16, ge=1)
    min_object_size: int = Field(default=9, ge=2)
    max_object_size: int = Field(default=16, ge=2)
    grid_size: int = Field(default=8, ge=1)
    center_separation: int = Field(default=2, ge=0)
    retries_per_object: int = Field(default=100, ge=1)
    texture_amplitude: float = Field(default=0.08, ge=0.0, le=0.5)
    categories: list[CategorySpec] = Field(default_factory=lambda: [c.model_copy() for c in DEFAULT_PALETTE])

    @model_validator(mode="after")
    def _check(self) -> "SceneGenConfig":
        if self.min_objects > self.max_objects:
            raise ValueError(f"min_objects {self.min_objects} exceeds max_objects {self.max_objects}")
        if self.min_object_size > self.max_object_size or self.max_object_size > self.image_size:
            raise ValueError("object size range must satisfy min <= max <= image_size")
        ids = sorted(c.id for c in self.categories)
        if ids != list(range(len(self.categories))):
            raise ValueError(f"category ids must be dense 0..K-1, got {ids}")
        if not any(len(c.name.split()) == 2 for c in self.categories):
            raise ValueError("at least one category name must have exactly two words")
        for c in self.categories:
            if not 1 <= len(c.name.split()) <= 2:
                raise ValueError(f"category name '{c.name}' must have one or two words")
        return self


class DataConfig(SceneGenConfig):
    train_size: int = Field(default=512, ge=1)
    eval_size: int = Field(default=64, ge=1)
    seed: int = 42
    workers: int = Field(default=1, ge=1)


class ScheduleConfig(StrictModel):
    timesteps: int = Field(default=1000, ge=1)
    kind: Literal["linear", "scaled_linear", "cosine"] = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    variance: Literal["posterior", "beta"] = "posterior"
    sigma_one: Literal["beta", "zero"] = "beta"


class DenoiserConfig(StrictModel):
    image_size: int = 64
    channels: int = 3
    block_channels: list[int] = Field(default_factory=lambda: [32, 64, 128])
    layers_per_block: int = Field(default=1, ge=1)
    attention_heads: int = Field(default=8, ge=1)
    norm_groups: int = Field(default=8, ge=1)
    condition_dim: int = Field(default=128, ge=1)
    latent_downsample: Literal[1, 2] = 1
    max_parameters: int = 5_000_000

    @model_validator(mode="after")
    def _check(self) -> "DenoiserConfig":
        if len(self.block_channels) < 2:
            raise ValueError("denoiser needs at least two resolutions")
        for width in self.block_channels:
            if width % self.norm_groups or width % self.attention_heads:
                raise ValueError(f"block width {width} must divide by norm_groups and attention_heads")
        return self


class EncoderConfig(StrictModel):
    emb: int = 128
    channels: list[int] = Field(default_factory=lambda: [32, 64, 128, 128])
    pool_heads: int = 4
    crop_size: int = 32
    pad: int = Field(default=4, ge=0)
    content_length: int = Field(default=9, ge=1)
    include_patch_tokens: bool = False
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    accuracy_bar: float = 0.9
    val_fraction: float = 0.1
    seed: int = 42

    @field_validator("channels")
    @classmethod
    def _four_blocks(cls, value: list[int]) -> list[int]:
        if len(value) != 4:
            raise ValueError("the patch encoder has exactly four blocks")
        return value


class DetectorConfig(StrictModel):
    feature_dim: int = 64
    channels: list[int] = Field(default_factory=lambda: [32, 64, 64])
    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 1e-3
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    accuracy_bar: float = 0.9
    accuracy_reduction: Literal["min", "mean"] = "min"
    blank_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    val_fraction: float = 0.1
    seed: int = 42


class CountingLossConfig(StrictModel):
    tau: float = Field(default=0.1, gt=0.0, lt=1.0)
    gamma: float = Field(default=1000, ge=0)
    lambda_weight: float = Field(default=0.5, ge=0)
    missing_candidate_policy: Literal["zero_pad", "truncate"] = "zero_pad"


class LoraConfig(StrictModel):
    rank: int = Field(default=8, ge=1)
    alpha: float = Field(default=8.0, gt=0)
    targets: list[Literal["attention", "feedforward", "projection"]] = Field(default_factory=lambda: ["attention"])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class BasePretrainConfig(StrictModel):
    learning_rate: float = 2e-4
    batch_size: int = 32
    max_steps: int = Field(default=20000, ge=1)
    validate_every: int = Field(default=250, ge=1)
    patience: int = Field(default=6, ge=1)
    min_delta: float = 1e-4
    val_fraction: float = 0.1
    condition_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    random_flip: bool = True
    gradient_clip_norm: float = 1.0
    log_every: int = 100
    seed: int = 42


class TrainConfig(StrictModel):
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=32, ge=1)
    micro_batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=5, ge=1)
    max_steps: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    gradient_clip_norm: float = Field(default=1.0, gt=0)
    warmup_steps: int = Field(default=0, ge=0)
    lr_schedule: Literal["constant"] = "constant"
    seed: int = 42
    counting: CountingLossConfig = Field(default_factory=CountingLossConfig)
    condition_mode: ConditionMode = "content_image"
    condition_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    box_source: BoxSource = "ground_truth"
    counting_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    include_noise: bool = True
    random_flip: bool = True
    loss_reduction: Literal["sum", "mean"] = "sum"
    log_every: int = 50
    device: str = "cpu"
    num_workers: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.batch_size % self.micro_batch_size:
            raise ValueError("batch_size must be a multiple of micro_batch_size")
        return self

    @property
    def accumulation_steps(self) -> int:
        return self.batch_size // self.micro_batch_size


class EvalConfig(StrictModel):
    thresholds: list[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    steps: int = Field(default=50, ge=1)
    guidance_scale: float = Field(default=7.5, ge=0)
    sampler: Literal["euler", "ddpm"] = "euler"
    box_source: BoxSource = "ground_truth"
    fid_shrinkage: float = Field(default=0.1, ge=0.0, le=1.0)
    batch_size: int = 16
    samples_per_scene: int = Field(default=1, ge=1)
    recurrent_depth: int = Field(default=2, ge=1)
    recurrent_fanout: int = Field(default=2, ge=1)
    seed: int = 42

    @field_validator("thresholds")
    @classmethod
    def _in_unit_interval(cls, value: list[float]) -> list[float]:
        if not value or any(not 0.0 < t <= 1.0 for t in value):
            raise ValueError("thresholds must be a non-empty list in (0, 1]")
        return value


class SweepConfig(StrictModel):
    grids: list[str] = Field(default_factory=lambda: ["tau", "gamma", "lambda"])
    max_steps: int | None = 500
    gamma_reference_steps: int = Field(default=20000, gt=0)
    workers: int = Field(default=1, ge=1)


class ExperimentConfig(StrictModel):
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    base: BasePretrainConfig = Field(default_factory=BasePretrainConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.denoiser.image_size != self.data.image_size:
            raise ValueError("denoiser.image_size must equal data.image_size")
        if self.denoiser.condition_dim != self.encoder.emb:
            raise ValueError("denoiser.condition_dim must equal encoder.emb")
        if self.data.image_size % self.data.grid_size:
            raise ValueError("data.grid_size must divide data.image_size")
        return self

    def config_hash(self) -> str:
        return config_hash(self)


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON dump"""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
