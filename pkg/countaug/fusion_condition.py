import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .config import CategorySpec, EncoderConfig
from .errors import ShapeMismatchError, UnderfitError
from .logging_config import IndentLogger
from .networks import PatchEncoder
from .scene_forge import Scene
from .utils import load_archive, module_hash, save_archive, to_tensor, write_json

logger = IndentLogger(logging.getLogger("fusion"))

Box = tuple[int, int, int, int]


@dataclass
class CropSet:
    crops: list[np.ndarray]
    source_boxes: list[Box | None]
    validity_mask: list[bool]
    regions: list[Box | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.crops)

    @property
    def n_valid(self) -> int:
        return sum(self.validity_mask)


@dataclass
class ConditionBatch:
    """tokens: (batch, 1 + M, emb); slot 0 is the global image token"""

    tokens: torch.Tensor
    validity: torch.Tensor

    @property
    def content_length(self) -> int:
        return self.validity.shape[1]

    def to(self, device: torch.device | str) -> "ConditionBatch":
        return ConditionBatch(self.tokens.to(device), self.validity.to(device))


def crop_region(bbox: Box, pad: int, height: int, width: int) -> Box:
    """The box grown by pad on every side, clamped to the image"""
    x_min, y_min, x_max, y_max = bbox
    return max(0, x_min - pad), max(0, y_min - pad), min(width, x_max + pad), min(height, y_max + pad)


def resize_crop(pixels: np.ndarray, size: int) -> np.ndarray:
    tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    resized = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    return resized[0].permute(1, 2, 0).numpy()


def crop_instances(image: np.ndarray, boxes: list[Box], pad: int, crop_size: int = 32) -> CropSet:
    if not boxes:
        raise ValueError("crop_instances needs at least one box")
    height, width = image.shape[:2]
    crops, regions = [], []
    for bbox in boxes:
        x_min, y_min, x_max, y_max = bbox
        if not (0 <= x_min < x_max <= width and 0 <= y_min < y_max <= height):
            raise ValueError(f"Box {bbox} does not lie within a {width}x{height} image")
        x0, y0, x1, y1 = crop_region(bbox, pad, height, width)
        regions.append((x0, y0, x1, y1))
        crops.append(resize_crop(image[y0:y1, x0:x1], crop_size))
    return CropSet(crops=crops, source_boxes=list(boxes), validity_mask=[True] * len(boxes), regions=regions)


def select_slots(count: int, M: int, rng: np.random.Generator) -> list[int]:
    """Indices kept when packing `count` items into M slots; random without replacement only when count > M"""
    if count > M:
        return np.sort(rng.choice(count, size=M, replace=False)).tolist()
    return list(range(count))


def pack_crops(crops: CropSet, M: int, rng: np.random.Generator, crop_size: int = 32) -> CropSet:
    """Exactly M slots: random subset without replacement when too many, zero slots when too few"""
    if M < 1:
        raise ValueError(f"Content length must be >= 1, got {M}")
    count = len(crops)
    if count > M:
        keep = select_slots(count, M, rng)
        return CropSet(
            crops=[crops.crops[i] for i in keep],
            source_boxes=[crops.source_boxes[i] for i in keep],
            validity_mask=[crops.validity_mask[i] for i in keep],
            regions=[crops.regions[i] for i in keep] if crops.regions else [],
        )

    shape = crops.crops[0].shape if crops.crops else (crop_size, crop_size, 3)
    missing = M - count
    return CropSet(
        crops=list(crops.crops) + [np.zeros(shape, dtype=np.float32) for _ in range(missing)],
        source_boxes=list(crops.source_boxes) + [None] * missing,
        validity_mask=list(crops.validity_mask) + [False] * missing,
        regions=(list(crops.regions) + [None] * missing) if crops.regions else [],
    )


def encode_condition(
    images: np.ndarray | list[np.ndarray] | torch.Tensor,
    packed: CropSet | list[CropSet],
    encoder: PatchEncoder,
    include_patch_tokens: bool = False,
) -> ConditionBatch:
    """Global summary token, optional patch tokens, then one summary token per real crop; padded slots stay zero"""
    packed = [packed] if isinstance(packed, CropSet) else packed
    images = images if isinstance(images, torch.Tensor) else to_tensor(images)
    if images.shape[0] != len(packed):
        raise ShapeMismatchError(f"{images.shape[0]} images but {len(packed)} crop sets")
    lengths = {len(p) for p in packed}
    if len(lengths) != 1:
        raise ShapeMismatchError(f"Crop sets must be packed to one length, got {sorted(lengths)}")
    M = lengths.pop()
    crop_size = encoder.config.crop_size

    device = next(encoder.parameters()).device
    output = encoder(images.to(device))
    validity = torch.tensor([p.validity_mask for p in packed], dtype=torch.bool, device=device)
    slots = torch.zeros(len(packed), M, output.summary.shape[-1], device=device, dtype=output.summary.dtype)

    real = [crop for p in packed for crop, ok in zip(p.crops, p.validity_mask, strict=True) if ok]
    if real:
        for crop in real:
            if crop.shape != (crop_size, crop_size, 3):
                raise ShapeMismatchError(f"Crops must be {crop_size}x{crop_size}x3 for this encoder, got {crop.shape}")
        slots[validity] = encoder.summary(to_tensor(real).to(device))

    parts = [output.summary.unsqueeze(1)]
    if include_patch_tokens:
        parts.append(output.patch_tokens)
    parts.append(slots)
    return ConditionBatch(tokens=torch.cat(parts, dim=1), validity=validity)


def _scene_labels(scenes: list[Scene], num_categories: int) -> torch.Tensor:
    labels = torch.zeros(len(scenes), num_categories)
    for i, scene in enumerate(scenes):
        for a in scene.annotations:
            labels[i, a.category_id] = 1.0
    return labels


def _crop_bank(scenes: list[Scene], pad: int, crop_size: int, num_categories: int) -> tuple[torch.Tensor, torch.Tensor]:
    crops, labels = [], []
    for scene in scenes:
        cropped = crop_instances(scene.image, scene.boxes, pad, crop_size)
        crops.extend(cropped.crops)
        for a in scene.annotations:
            label = np.zeros(num_categories, dtype=np.float32)
            label[a.category_id] = 1.0
            labels.append(label)
    return to_tensor(crops), torch.from_numpy(np.stack(labels))


def per_category_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    predicted = (torch.sigmoid(logits) > 0.5).to(labels.dtype)
    return (predicted == labels).to(torch.float64).mean(dim=0)


def pretrain_encoder(
    train_scenes: list[Scene],
    val_scenes: list[Scene],
    categories: list[CategorySpec],
    config: EncoderConfig,
    device: str = "cpu",
) -> tuple[PatchEncoder, dict[str, Any]]:
    """Multi-label classification on full images plus single-label crops, then freeze"""
    num_categories = len(categories)
    generator = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    encoder = PatchEncoder(config, num_categories).to(device)
    optimizer = torch.optim.AdamW(encoder.parameters(), lr=config.learning_rate)

    images = to_tensor([s.image for s in train_scenes])
    image_labels = _scene_labels(train_scenes, num_categories)
    crops, crop_labels = _crop_bank(train_scenes, config.pad, config.crop_size, num_categories)
    half = max(config.batch_size // 2, 1)

    history = []
    with logger.indent_block(f"Pretraining encoder for {config.steps} steps", phase=True, timed=True):
        encoder.train()
        for step in range(1, config.steps + 1):
            pick_images = torch.randint(0, len(images), (half,), generator=generator)
            pick_crops = torch.randint(0, len(crops), (half,), generator=generator)
            loss = F.binary_cross_entropy_with_logits(
                encoder.classify(images[pick_images].to(device)), image_labels[pick_images].to(device)
            ) + F.binary_cross_entropy_with_logits(
                encoder.classify(crops[pick_crops].to(device)), crop_labels[pick_crops].to(device)
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % 250 == 0 or step == config.steps:
                history.append({"step": step, "loss": float(loss)})
                logger.info(f"step {step} loss {float(loss):.4f}")

    encoder.eval()
    encoder.requires_grad_(False)
    with torch.no_grad():
        val_images = to_tensor([s.image for s in val_scenes]).to(device)
        accuracy = per_category_accuracy(encoder.classify(val_images).cpu(), _scene_labels(val_scenes, num_categories))
    mean_accuracy = float(accuracy.mean())
    metrics = {
        "mean_per_category_accuracy": mean_accuracy,
        "per_category_accuracy": {c.name: float(a) for c, a in zip(categories, accuracy, strict=True)},
        "history": history,
    }
    logger.info(f"Encoder validation accuracy {mean_accuracy:.3f} (bar {config.accuracy_bar})")
    if mean_accuracy < config.accuracy_bar:
        raise UnderfitError(
            f"encoder underfit: mean per-category accuracy {mean_accuracy:.3f} below {config.accuracy_bar} "
            f"after {config.steps} steps"
        )
    return encoder, metrics


def save_encoder(path: str | Path, encoder: PatchEncoder, num_categories: int, metadata: dict[str, Any]) -> Path:
    payload = {
        "architecture": encoder.config.model_dump(mode="json"),
        "num_categories": num_categories,
        "parameter_hash": module_hash(encoder),
        **metadata,
    }
    path = save_archive(path, "encoder", dict(encoder.state_dict()), payload)
    write_json(Path(path).with_suffix(".json"), payload)
    return path


def load_encoder(path: str | Path) -> tuple[PatchEncoder, dict[str, Any]]:
    """Load a frozen encoder in eval mode"""
    archive = load_archive(path, kind="encoder")
    metadata = archive["metadata"]
    encoder = PatchEncoder(EncoderConfig.model_validate(metadata["architecture"]), metadata["num_categories"])
    encoder.load_state_dict(archive["parameters"])
    encoder.eval()
    encoder.requires_grad_(False)
    return encoder, metadata
