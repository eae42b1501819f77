import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image

from .config import BoxSource, CategorySpec, ConditionMode, ExperimentConfig
from .diffusion_core import NoiseSchedule, PixelCodec, sample
from .fusion_condition import ConditionBatch
from .logging_config import IndentLogger
from .lora_adapter import load_adapter
from .networks import ConditionalDenoiser, GridDetector
from .scene_forge import Scene, quantize
from .trainer import ConditionEncoders, build_condition_for_mode, build_conditions, load_base, load_encoders
from .utils import ArtifactResolver, read_json, to_images, write_json

logger = IndentLogger(logging.getLogger("diffusion"))


@dataclass
class Augmentation:
    """One generated image with the provenance needed to regenerate it"""

    image: np.ndarray
    scene_id: int
    sample: int
    seed: int
    box_source: str
    condition_mode: str

    def provenance(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "sample": self.sample,
            "seed": self.seed,
            "box_source": self.box_source,
            "condition_mode": self.condition_mode,
        }

    @property
    def file_name(self) -> str:
        return f"scene_{self.scene_id:05d}_{self.sample}.png"


class ModelBundle:
    """Frozen denoiser (with its adapter when one is given), encoder, detector and category conditioner"""

    def __init__(self, model: ConditionalDenoiser, schedule: NoiseSchedule, encoders: ConditionEncoders,
                 config: ExperimentConfig) -> None:
        self.model = model
        self.schedule = schedule
        self.encoders = encoders
        self.config = config
        self.codec = PixelCodec(model.config.latent_downsample)

    @classmethod
    def load(
        cls,
        config: ExperimentConfig,
        categories: list[CategorySpec],
        base_path: str | Path,
        encoder_path: str | Path,
        detector_path: str | Path | None = None,
        adapter_path: str | Path | None = None,
    ) -> "ModelBundle":
        model, schedule, conditioner, _ = load_base(base_path)
        if adapter_path is not None:
            load_adapter(adapter_path, model)
            model.requires_grad_(False)
        model.eval()
        model.to(torch.device(config.train.device))
        encoders = load_encoders(categories, encoder_path, detector_path, conditioner, config)
        logger.debug(f"Loaded bundle: base {base_path}, adapter {adapter_path}, detector {detector_path}")
        return cls(model, schedule, encoders, config)

    @classmethod
    def from_resolver(
        cls,
        config: ExperimentConfig,
        categories: list[CategorySpec],
        resolver: ArtifactResolver,
        explicit: dict[str, str | Path | None] | None = None,
        with_adapter: bool = True,
    ) -> "ModelBundle":
        """Explicit paths win; missing ones come from the latest finished run of each kind"""
        explicit = explicit or {}
        return cls.load(
            config,
            categories,
            base_path=resolver.output("base", "base", explicit.get("base")),
            encoder_path=resolver.output("encoder", "encoder", explicit.get("encoder")),
            detector_path=resolver.output("detector", "detector", explicit.get("detector")),
            adapter_path=resolver.output("adapter", "adapter", explicit.get("adapter")) if with_adapter else None,
        )

    @property
    def detector(self) -> GridDetector | None:
        return self.encoders.detector

    @property
    def categories(self) -> list[CategorySpec]:
        return self.encoders.categories

    @property
    def detector_threshold(self) -> float:
        return self.encoders.detector_threshold

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        size = self.model.config.image_size // self.model.config.latent_downsample
        return self.model.config.channels, size, size

    def condition_for(self, scene: Scene, box_source: BoxSource | None = None, rng: np.random.Generator | None = None,
                      mode: ConditionMode | None = None) -> ConditionBatch:
        return build_condition_for_mode(
            scene,
            mode or self.config.train.condition_mode,
            box_source or self.config.eval.box_source,
            self.encoders,
            rng if rng is not None else np.random.default_rng(self.config.eval.seed),
        )

    def _sample(self, condition: torch.Tensor, seed: int) -> list[np.ndarray]:
        evaluation = self.config.eval
        images = sample(
            self.model,
            condition,
            evaluation.steps,
            evaluation.guidance_scale,
            self.schedule,
            torch.Generator().manual_seed(seed),
            shape=(condition.shape[0], *self.latent_shape),
            sampler=evaluation.sampler,
            codec=self.codec,
        )
        return to_images(images)

    def augment(self, scene: Scene, box_source: BoxSource | None = None, seed: int = 0,
                mode: ConditionMode | None = None) -> np.ndarray:
        """One augmentation of the scene, as an HWC image in [0, 1]"""
        condition = self.condition_for(scene, box_source, np.random.default_rng(seed), mode)
        return self._sample(condition.tokens, seed)[0]

    def augment_scenes(self, scenes: list[Scene], seed: int, box_source: BoxSource | None = None,
                       samples_per_scene: int = 1) -> list[Augmentation]:
        """Batched augmentation; sample k of scene i is the k-th entry for it, in scene order"""
        box_source = box_source or self.config.eval.box_source
        mode = self.config.train.condition_mode
        batch_size = self.config.eval.batch_size
        results = []
        with logger.indent_block(f"Augmenting {len(scenes)} scenes x {samples_per_scene}", phase=True, timed=True):
            for k in range(samples_per_scene):
                for start in range(0, len(scenes), batch_size):
                    chunk = scenes[start : start + batch_size]
                    batch_seed = int(np.random.SeedSequence(seed, spawn_key=(k, start)).generate_state(1)[0])
                    condition = build_conditions(chunk, mode, box_source, self.encoders,
                                                 np.random.default_rng(batch_seed))
                    for scene, image in zip(chunk, self._sample(condition.tokens, batch_seed), strict=True):
                        results.append(Augmentation(image, scene.scene_id, k, batch_seed, box_source, mode))
        results.sort(key=lambda a: (a.scene_id, a.sample))
        return results


def write_augmentations(augmentations: list[Augmentation], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for a in augmentations:
        Image.fromarray(quantize(a.image)).save(images_dir / a.file_name)
    provenance = [{"file": f"images/{a.file_name}", **a.provenance()} for a in augmentations]
    return write_json(out_dir / "provenance.json", {"augmentations": provenance})


def read_augmentations(out_dir: str | Path) -> list[tuple[dict[str, Any], np.ndarray]]:
    out_dir = Path(out_dir)
    entries = read_json(out_dir / "provenance.json")["augmentations"]
    loaded = []
    for entry in entries:
        with Image.open(out_dir / entry["file"]) as img:
            loaded.append((entry, np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0))
    return loaded
