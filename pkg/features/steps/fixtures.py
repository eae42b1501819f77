"""Small configs and builders shared by the step modules"""

import copy
import functools
from typing import Any

import numpy as np
import torch

from countaug.config import DEFAULT_PALETTE, ExperimentConfig, SceneGenConfig
from countaug.networks import GridDetector, PatchEncoder
from countaug.reward_counter import build_vocabulary, pretrain_detector
from countaug.scene_forge import (
    Annotation,
    Scene,
    generate_scenes,
    holdout_split,
    quantize,
    quantized_color,
    shape_mask,
    textured_background,
)
from countaug.utils import apply_overrides

TINY = {
    "data": {
        "image_size": 16,
        "grid_size": 4,
        "min_objects": 1,
        "max_objects": 3,
        "min_object_size": 4,
        "max_object_size": 6,
        "min_box_area": 16,
        "center_separation": 1,
        "retries_per_object": 200,
        "train_size": 12,
        "eval_size": 4,
    },
    "schedule": {"timesteps": 50},
    "denoiser": {"image_size": 16, "block_channels": [32, 64], "attention_heads": 4, "condition_dim": 32},
    "encoder": {
        "emb": 32,
        "channels": [8, 16, 32, 32],
        "crop_size": 16,
        "pad": 2,
        "steps": 2,
        "batch_size": 4,
        "accuracy_bar": 0.0,
    },
    "detector": {"feature_dim": 16, "channels": [8, 16], "steps": 2, "batch_size": 4, "accuracy_bar": 0.0},
    "base": {"batch_size": 4, "max_steps": 3, "validate_every": 1, "patience": 5, "log_every": 1},
    "train": {"batch_size": 4, "micro_batch_size": 2, "max_steps": 3, "log_every": 1},
    "eval": {"steps": 3, "batch_size": 4, "thresholds": [0.3, 0.5, 0.7]},
    "sweep": {"max_steps": 2},
}


def tiny_config(overrides: list[str] | None = None) -> ExperimentConfig:
    data = apply_overrides(copy.deepcopy(TINY), overrides or [])
    return ExperimentConfig.model_validate(data)


def tiny_encoder(config: ExperimentConfig, seed: int = 0) -> PatchEncoder:
    torch.manual_seed(seed)
    encoder = PatchEncoder(config.encoder, len(config.data.categories))
    encoder.eval()
    encoder.requires_grad_(False)
    return encoder


def tiny_detector(config: ExperimentConfig, seed: int = 0) -> GridDetector:
    torch.manual_seed(seed)
    detector = GridDetector(build_vocabulary(config.data.categories), config.detector, config.data.image_size,
                            config.data.grid_size)
    detector.eval()
    detector.requires_grad_(False)
    return detector


@functools.cache
def pretrained_detector() -> tuple[ExperimentConfig, GridDetector]:
    """Detector pretrained at the default settings, shared by every slow scenario of a run"""
    config = ExperimentConfig()
    scenes = generate_scenes(config.data, config.data.train_size, config.data.seed, "train")
    train, val = holdout_split(scenes, config.detector.val_fraction)
    detector, _ = pretrain_detector(train, val, config.data, config.detector)
    return config, detector


def painted_scene(config: SceneGenConfig, objects: list[tuple[str, tuple[int, int, int, int]]], seed: int = 0) -> Scene:
    """Scene with the named categories drawn at fixed boxes over a textured background"""
    rng = np.random.default_rng(seed)
    size = config.image_size
    canvas = quantize(textured_background(config, rng))
    by_name = {c.name: c for c in config.categories}
    annotations = []
    for name, bbox in objects:
        category = by_name[name]
        canvas[shape_mask(category.shape, bbox, size, size)] = quantized_color(category)
        annotations.append(Annotation(category.id, bbox))
    return Scene(canvas.astype(np.float32) / 255.0, annotations, -1)


def flat_image(size: int, value: float | tuple[float, float, float]) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.float32), (size, size, 3)).copy()


def random_image(size: int, rng: np.random.Generator) -> np.ndarray:
    return np.round(rng.uniform(0.0, 1.0, size=(size, size, 3)) * 255.0).astype(np.float32) / 255.0


def category_names(ids: list[int]) -> list[str]:
    by_id = {c.id: c.name for c in DEFAULT_PALETTE}
    return [by_id[i] for i in ids]


def scene_with(annotations: list[tuple[int, tuple[int, int, int, int]]], size: int = 16, scene_id: int = 0) -> Scene:
    rng = np.random.default_rng(scene_id)
    return Scene(random_image(size, rng), [Annotation(c, b) for c, b in annotations], scene_id)


def capture(context, fn, *args, **kwargs) -> Any:
    """Run fn, keeping a raised error on the context instead of failing the step"""
    context.error = None
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        context.error = e
        return None


def parse_list(text: str, cast=int) -> list:
    text = text.strip()
    if text in ("", "none", "[]"):
        return []
    return [cast(v.strip()) for v in text.split(",")]
