import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from .config import BoxSource, CategorySpec, ConditionMode, ExperimentConfig
from .diffusion_core import (
    LatentState,
    NoiseSchedule,
    PixelCodec,
    build_denoiser,
    forward_diffuse,
    load_denoiser,
    one_step_denoise,
    sample_timesteps,
    save_denoiser,
    schedule_from_config,
)
from .errors import ConfigError, DivergenceError, FrozenParameterError, ShapeMismatchError
from .events.run import RunLedger
from .fusion_condition import ConditionBatch, crop_instances, load_encoder, select_slots
from .logging_config import IndentLogger
from .lora_adapter import adapter_parameters, base_parameter_hash, lora_layers, save_adapter, wrap_from_config
from .networks import CategoryConditioner, ConditionalDenoiser, GridDetector, PatchEncoder
from .reward_counter import batch_counting_loss, counting_active, detect_boxes, load_detector
from .scene_forge import Annotation, PromptSpec, Scene, SceneDataset, holdout_split, prompt_for_scene
from .utils import code_hash, module_hash, seed_everything, to_tensor

logger = IndentLogger(logging.getLogger("trainer"))

LOSS_COLUMNS = ["step", "mse", "counting", "total", "lr", "grad_norm", "grad_norm_clipped"]
ENCODE_CHUNK = 64


def mse_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps_true.shape != eps_pred.shape:
        raise ShapeMismatchError(f"mse_loss: shapes {tuple(eps_true.shape)} and {tuple(eps_pred.shape)} differ")
    return F.mse_loss(eps_pred, eps_true)


def per_sample_mse(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps_true.shape != eps_pred.shape:
        raise ShapeMismatchError(f"mse_loss: shapes {tuple(eps_true.shape)} and {tuple(eps_pred.shape)} differ")
    return (eps_pred - eps_true).pow(2).flatten(1).mean(dim=1)


def total_loss(mse: torch.Tensor | float, counting: torch.Tensor | float, lambda_weight: float):
    return mse + lambda_weight * counting


def dropout_mask(batch: int, probability: float, generator: torch.Generator) -> torch.Tensor:
    """Rows that receive the null condition"""
    return torch.rand(batch, generator=generator) < probability


# Conditions


@dataclass
class ConditionEncoders:
    """Frozen networks a condition is built from"""

    encoder: PatchEncoder
    categories: list[CategorySpec]
    detector: GridDetector | None = None
    conditioner: CategoryConditioner | None = None
    detector_threshold: float = 0.5
    object_size: tuple[int, int] = (9, 16)

    @property
    def content_length(self) -> int:
        return self.encoder.config.content_length

    @property
    def device(self) -> torch.device:
        return next(self.encoder.parameters()).device


@dataclass
class SceneTokens:
    """Encoder output for one scene and one set of boxes"""

    global_token: torch.Tensor
    patch_tokens: torch.Tensor | None
    crop_tokens: torch.Tensor
    category_ids: list[int]
    boxes: list[tuple[int, int, int, int]]


def random_boxes(count: int, image_size: int, size_range: tuple[int, int],
                 rng: np.random.Generator) -> list[Annotation]:
    boxes = []
    for _ in range(count):
        side = int(rng.integers(size_range[0], size_range[1] + 1))
        x, y = (int(v) for v in rng.integers(0, image_size - side + 1, size=2))
        boxes.append(Annotation(-1, (x, y, x + side, y + side)))
    return boxes


def check_combination(mode: ConditionMode, box_source: BoxSource) -> None:
    if mode not in ("image_only", "category_name", "content_image", "both"):
        raise ConfigError(f"Unknown condition mode '{mode}'")
    if box_source not in ("ground_truth", "detector", "random_crop"):
        raise ConfigError(f"Unknown box source '{box_source}'")
    if mode in ("category_name", "both") and box_source == "random_crop":
        raise ConfigError(f"Condition mode '{mode}' needs category labels, which box source 'random_crop' lacks")


def select_boxes(scene: Scene, box_source: BoxSource, encoders: ConditionEncoders,
                 rng: np.random.Generator) -> list[Annotation]:
    match box_source:
        case "ground_truth":
            return list(scene.annotations)
        case "detector":
            if encoders.detector is None:
                raise ConfigError("Box source 'detector' needs a pretrained detector")
            return detect_boxes(scene.image, encoders.categories, encoders.detector, encoders.detector_threshold,
                                scene.width)
        case "random_crop":
            return random_boxes(max(len(scene.annotations), 1), scene.width, encoders.object_size, rng)
    raise ConfigError(f"Unknown box source '{box_source}'")


@torch.no_grad()
def encode_scene_tokens(scenes: list[Scene], annotations: list[list[Annotation]],
                        encoders: ConditionEncoders) -> list[SceneTokens]:
    config = encoders.encoder.config
    device = encoders.device
    output = encoders.encoder(to_tensor([s.image for s in scenes]).to(device))

    crops, owners = [], []
    for i, (scene, boxes) in enumerate(zip(scenes, annotations, strict=True)):
        if boxes:
            crops.extend(crop_instances(scene.image, [a.bbox for a in boxes], config.pad, config.crop_size).crops)
            owners.extend([i] * len(boxes))
    if crops:
        crop_tokens = encoders.encoder.summary(to_tensor(crops).to(device))
    else:
        crop_tokens = output.summary.new_zeros(0, output.summary.shape[-1])
    owners = torch.tensor(owners, dtype=torch.long, device=device)

    return [
        SceneTokens(
            global_token=output.summary[i],
            patch_tokens=output.patch_tokens[i] if config.include_patch_tokens else None,
            crop_tokens=crop_tokens[owners == i],
            category_ids=[a.category_id for a in boxes],
            boxes=[a.bbox for a in boxes],
        )
        for i, boxes in enumerate(annotations)
    ]


def _category_tokens(encoders: ConditionEncoders, category_ids: list[int], like: torch.Tensor) -> torch.Tensor:
    if encoders.conditioner is None:
        raise ConfigError("Category-name conditions need the base model's category conditioner")
    if any(i < 0 for i in category_ids):
        raise ConfigError("Category-name conditions need labelled boxes")
    ids = torch.tensor([category_ids], dtype=torch.long, device=encoders.conditioner.embedding.weight.device)
    return encoders.conditioner.instance_tokens(ids)[0].to(like)


def assemble_condition(tokens: SceneTokens, mode: ConditionMode, encoders: ConditionEncoders,
                       rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """(length, emb) tokens and (M,) validity: global token, optional patch tokens, then M slots"""
    M = encoders.content_length
    slots = tokens.global_token.new_zeros(M, tokens.global_token.shape[-1])
    validity = torch.zeros(M, dtype=torch.bool, device=slots.device)
    count = len(tokens.category_ids)

    match mode:
        case "image_only":
            pass
        case "content_image":
            keep = select_slots(count, M, rng)
            if keep:
                slots[: len(keep)] = tokens.crop_tokens[keep]
                validity[: len(keep)] = True
        case "category_name":
            keep = select_slots(count, M, rng)
            if keep:
                slots[: len(keep)] = _category_tokens(encoders, [tokens.category_ids[i] for i in keep], slots)
                validity[: len(keep)] = True
        case "both":
            keep = select_slots(count, M // 2, rng)
            if keep:
                names = _category_tokens(encoders, [tokens.category_ids[i] for i in keep], slots)
                pairs = torch.stack([tokens.crop_tokens[keep], names], dim=1).flatten(0, 1)
                slots[: len(pairs)] = pairs
                validity[: len(pairs)] = True
        case _:
            raise ConfigError(f"Unknown condition mode '{mode}'")

    parts = [tokens.global_token.unsqueeze(0)]
    if tokens.patch_tokens is not None:
        parts.append(tokens.patch_tokens)
    parts.append(slots)
    return torch.cat(parts), validity


def build_condition_for_mode(
    scene: Scene,
    mode: ConditionMode,
    box_source: BoxSource,
    encoders: ConditionEncoders,
    rng: np.random.Generator,
) -> ConditionBatch:
    check_combination(mode, box_source)
    boxes = select_boxes(scene, box_source, encoders, rng)
    tokens = encode_scene_tokens([scene], [boxes], encoders)[0]
    condition, validity = assemble_condition(tokens, mode, encoders, rng)
    return ConditionBatch(tokens=condition.unsqueeze(0), validity=validity.unsqueeze(0))


def build_conditions(
    scenes: list[Scene],
    mode: ConditionMode,
    box_source: BoxSource,
    encoders: ConditionEncoders,
    rng: np.random.Generator,
) -> ConditionBatch:
    check_combination(mode, box_source)
    tokens = []
    for start in range(0, len(scenes), ENCODE_CHUNK):
        chunk = scenes[start : start + ENCODE_CHUNK]
        tokens.extend(encode_scene_tokens(chunk, [select_boxes(s, box_source, encoders, rng) for s in chunk],
                                          encoders))
    assembled = [assemble_condition(t, mode, encoders, rng) for t in tokens]
    stacked = torch.stack([a[0] for a in assembled])
    return ConditionBatch(tokens=stacked, validity=torch.stack([a[1] for a in assembled]))


class ConditionCache:
    """Scene tokens per (scene index, flip); random boxes are drawn fresh on every use"""

    def __init__(self, scenes: list[Scene], encoders: ConditionEncoders, mode: ConditionMode, box_source: BoxSource,
                 rng: np.random.Generator) -> None:
        check_combination(mode, box_source)
        self.scenes = scenes
        self.encoders = encoders
        self.mode = mode
        self.box_source = box_source
        self.rng = rng
        self._tokens: dict[tuple[int, bool], SceneTokens] = {}

    def _scene(self, index: int, flip: bool) -> Scene:
        scene = self.scenes[index]
        return scene.flipped() if flip else scene

    def tokens(self, indices: list[int], flips: list[bool]) -> list[SceneTokens]:
        keys = list(zip(indices, flips, strict=True))
        if self.box_source == "random_crop":
            scenes = [self._scene(i, f) for i, f in keys]
            return encode_scene_tokens(scenes, [select_boxes(s, self.box_source, self.encoders, self.rng)
                                                for s in scenes], self.encoders)
        missing = [k for k in dict.fromkeys(keys) if k not in self._tokens]
        if missing:
            scenes = [self._scene(i, f) for i, f in missing]
            boxes = [select_boxes(s, self.box_source, self.encoders, self.rng) for s in scenes]
            for key, tokens in zip(missing, encode_scene_tokens(scenes, boxes, self.encoders), strict=True):
                self._tokens[key] = tokens
        return [self._tokens[k] for k in keys]

    def batch(self, indices: list[int], flips: list[bool]) -> torch.Tensor:
        assembled = [assemble_condition(t, self.mode, self.encoders, self.rng)[0] for t in self.tokens(indices, flips)]
        return torch.stack(assembled)


# Base model


@dataclass
class BaseResult:
    model: ConditionalDenoiser
    conditioner: CategoryConditioner
    log: pd.DataFrame
    metrics: dict[str, Any]


def instance_ids(scenes: list[Scene], M: int, rng: np.random.Generator | None) -> torch.Tensor:
    """(B, M) category ids of up to M instances per scene, -1 in empty slots; the first M when rng is None"""
    ids = torch.full((len(scenes), M), -1, dtype=torch.long)
    for row, scene in enumerate(scenes):
        present = [a.category_id for a in scene.annotations]
        keep = select_slots(len(present), M, rng) if rng is not None else list(range(min(len(present), M)))
        for slot, i in enumerate(keep):
            ids[row, slot] = present[i]
    return ids


def _flip_images(images: torch.Tensor, flips: torch.Tensor) -> torch.Tensor:
    return torch.where(flips[:, None, None, None], images.flip(dims=[3]), images)


def _check_finite(loss: torch.Tensor, step: int, parts: dict[str, torch.Tensor]) -> None:
    if torch.isfinite(loss).all():
        return
    detail = ", ".join(f"{k}={float(v.detach().sum()):.6g}" for k, v in parts.items())
    raise DivergenceError(f"Loss is not finite at step {step} ({detail}); lower the learning rate or check the data")


@torch.no_grad()
def validation_mse(model: ConditionalDenoiser, conditioner: CategoryConditioner, fixed: dict[str, torch.Tensor],
                   batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    for start in range(0, fixed["x_t"].shape[0], batch_size):
        part = slice(start, start + batch_size)
        predicted = model(fixed["x_t"][part], fixed["t"][part], conditioner(fixed["ids"][part]))
        total += float(per_sample_mse(fixed["eps"][part], predicted).sum())
        count += predicted.shape[0]
    model.train()
    return total / count


def pretrain_base(dataset: SceneDataset, config: ExperimentConfig, ledger: RunLedger | None = None,
                  run_id=None) -> BaseResult:
    """MSE-only training of the denoiser on a bag-of-categories condition, early-stopped on validation MSE"""
    base = config.base
    device = torch.device(config.train.device)
    generator = seed_everything(base.seed)
    rng = np.random.default_rng(base.seed)
    schedule = schedule_from_config(config.schedule)
    codec = PixelCodec(config.denoiser.latent_downsample)
    M = config.encoder.content_length

    train_scenes, val_scenes = holdout_split(dataset.scenes, base.val_fraction)
    model = build_denoiser(config.denoiser).to(device)
    conditioner = CategoryConditioner(len(dataset.categories), config.denoiser.condition_dim).to(device)
    parameters = list(model.parameters()) + list(conditioner.parameters())
    optimizer = torch.optim.AdamW(parameters, lr=base.learning_rate)

    images = to_tensor([s.image for s in train_scenes])
    val_generator = torch.Generator().manual_seed(base.seed + 1)
    with torch.no_grad():
        z0 = codec.encode(to_tensor([s.image for s in val_scenes]))
        t = sample_timesteps(len(val_scenes), schedule.T, val_generator)
        eps = torch.randn(z0.shape, generator=val_generator)
        fixed = {"x_t": forward_diffuse(z0, t, eps, schedule).values.to(device), "t": t.to(device),
                 "eps": eps.to(device), "ids": instance_ids(val_scenes, M, None).to(device)}

    rows, best, best_state, bad_checks, stopped_early = [], math.inf, None, 0, False
    with logger.indent_block(f"Pretraining base denoiser for up to {base.max_steps} steps", phase=True, timed=True):
        model.train()
        for step in range(1, base.max_steps + 1):
            picked = torch.randint(0, len(train_scenes), (base.batch_size,), generator=generator)
            flips = dropout_mask(base.batch_size, 0.5 if base.random_flip else 0.0, generator)
            batch_images = _flip_images(images[picked], flips)
            batch_scenes = [train_scenes[i] for i in picked.tolist()]

            z0 = codec.encode(batch_images).to(device)
            t = sample_timesteps(base.batch_size, schedule.T, generator).to(device)
            eps = torch.randn(z0.shape, generator=generator).to(device)
            x_t = forward_diffuse(z0, t, eps, schedule)
            condition = conditioner(instance_ids(batch_scenes, M, rng).to(device))
            dropped = dropout_mask(base.batch_size, base.condition_dropout, generator).to(device)
            condition = torch.where(dropped[:, None, None], model.null_condition_like(*condition.shape[:2]), condition)

            loss = mse_loss(eps, model(x_t.values, t, condition))
            _check_finite(loss, step, {"mse": loss})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(parameters, base.gradient_clip_norm))
            optimizer.step()

            row = {"step": step, "mse": float(loss), "grad_norm": grad_norm}
            if step % base.validate_every == 0 or step == base.max_steps:
                row["val_mse"] = validation_mse(model, conditioner, fixed, base.batch_size)
                if row["val_mse"] < best - base.min_delta:
                    best, bad_checks = row["val_mse"], 0
                    best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(conditioner.state_dict()), step)
                else:
                    bad_checks += 1
            rows.append(row)
            if ledger is not None and run_id is not None:
                ledger.log_step(run_id, row)
            if step % base.log_every == 0:
                logger.info(f"step {step} mse {row['mse']:.4f} grad_norm {grad_norm:.3f}"
                            + (f" val_mse {row['val_mse']:.4f}" if "val_mse" in row else ""))
            if bad_checks >= base.patience:
                stopped_early = True
                logger.info(f"Validation MSE plateaued at step {step}, best {best:.4f}")
                break

    best_step = step
    if best_state is not None:
        model.load_state_dict(best_state[0])
        conditioner.load_state_dict(best_state[1])
        best_step = best_state[2]
    model.eval()
    conditioner.eval()
    metrics = {"best_val_mse": best, "best_step": best_step, "steps": step, "stopped_early": stopped_early}
    return BaseResult(model=model, conditioner=conditioner, log=pd.DataFrame(rows), metrics=metrics)


def save_base(path: str | Path, result: BaseResult, config: ExperimentConfig, metadata: dict[str, Any]) -> Path:
    extra = {f"conditioner.{k}": v for k, v in result.conditioner.state_dict().items()}
    payload = {"num_categories": result.conditioner.embedding.num_embeddings, **result.metrics, **metadata}
    return save_denoiser(path, result.model, config.schedule, extra, payload)


def load_base(path: str | Path) -> tuple[ConditionalDenoiser, NoiseSchedule, CategoryConditioner, dict[str, Any]]:
    """Frozen base denoiser, its schedule and its category conditioner"""
    model, schedule_config, rest, metadata = load_denoiser(path)
    conditioner = CategoryConditioner(metadata["num_categories"], model.config.condition_dim)
    conditioner.load_state_dict({k.removeprefix("conditioner."): v for k, v in rest.items()})
    for module in (model, conditioner):
        module.eval()
        module.requires_grad_(False)
    return model, schedule_from_config(schedule_config), conditioner, metadata


# LoRA fine-tuning


@dataclass
class FinetuneResult:
    model: ConditionalDenoiser
    log: pd.DataFrame
    steps: int
    base_parameter_hash: str
    frozen_hashes: dict[str, str] = field(default_factory=dict)


def total_steps(n_scenes: int, config: ExperimentConfig) -> int:
    train = config.train
    return train.max_steps if train.max_steps is not None else train.epochs * math.ceil(n_scenes / train.batch_size)


def _batches(loader: DataLoader):
    while True:
        for (indices,) in loader:
            yield indices


def _global_norm(parameters: list[torch.nn.Parameter]) -> float:
    norms = [p.grad.detach().norm(2) for p in parameters if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def _frozen_hashes(model: ConditionalDenoiser, encoders: ConditionEncoders) -> dict[str, str]:
    hashes = {"base": base_parameter_hash(model), "encoder": module_hash(encoders.encoder)}
    if encoders.detector is not None:
        hashes["detector"] = module_hash(encoders.detector)
    return hashes


def finetune(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    scenes: list[Scene],
    encoders: ConditionEncoders,
    config: ExperimentConfig,
    ledger: RunLedger | None = None,
    run_id=None,
) -> FinetuneResult:
    """Adapter-only training on eps-MSE plus the gated counting loss on the one-step denoised image"""
    train = config.train
    counting = train.counting
    device = torch.device(train.device)
    generator = seed_everything(train.seed)
    counting_generator = torch.Generator().manual_seed(train.seed + 1)
    rng = np.random.default_rng(train.seed)
    codec = PixelCodec(model.config.latent_downsample)
    use_counting = counting.lambda_weight > 0
    if use_counting and encoders.detector is None:
        raise ConfigError("A positive counting loss weight needs a pretrained detector")

    if not lora_layers(model):
        wrap_from_config(model, config.lora)
    model.to(device)
    model.train()
    before = _frozen_hashes(model, encoders)
    parameters = adapter_parameters(model)
    optimizer = torch.optim.AdamW(parameters, lr=train.learning_rate, betas=(train.adam_beta1, train.adam_beta2),
                                  weight_decay=train.weight_decay)
    warmup = train.warmup_steps
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: min(1.0, (s + 1) / warmup) if warmup else 1.0)

    images = to_tensor([s.image for s in scenes])
    prompts: dict[int, PromptSpec] = {}
    cache = ConditionCache(scenes, encoders, train.condition_mode, train.box_source, rng)
    loader = DataLoader(TensorDataset(torch.arange(len(scenes))), batch_size=train.micro_batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(train.seed), num_workers=train.num_workers)
    batches = _batches(loader)
    steps = total_steps(len(scenes), config)
    accumulation = train.accumulation_steps

    def prompt(index: int) -> PromptSpec:
        if index not in prompts:
            prompts[index] = prompt_for_scene(scenes[index], encoders.categories)
        return prompts[index]

    def micro_step(step: int, indices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        batch = len(indices)
        flips = dropout_mask(batch, 0.5 if train.random_flip else 0.0, generator)
        z0 = codec.encode(_flip_images(images[indices], flips)).to(device)
        t = sample_timesteps(batch, schedule.T, generator).to(device)
        eps = torch.randn(z0.shape, generator=generator).to(device)
        x_t = forward_diffuse(z0, t, eps, schedule)

        condition = cache.batch(indices.tolist(), flips.tolist()).to(device)
        dropped = dropout_mask(batch, train.condition_dropout, generator).to(device)
        condition = torch.where(dropped[:, None, None], model.null_condition_like(*condition.shape[:2]), condition)
        eps_pred = model(x_t.values, t, condition)
        mse_rows = per_sample_mse(eps, eps_pred)

        counting_rows = torch.zeros(0, dtype=torch.float64, device=device)
        if use_counting and counting_active(step, counting):
            k = max(1, math.ceil(train.counting_fraction * batch))
            subset = torch.randperm(batch, generator=counting_generator)[:k].sort().values.to(device)
            z = torch.randn((k, *eps_pred.shape[1:]), generator=counting_generator).to(device)
            denoised = one_step_denoise(LatentState(x_t.values[subset], t[subset]), eps_pred[subset], schedule, z,
                                        train.include_noise)
            counting_rows = batch_counting_loss(codec.decode(denoised, clamp=False),
                                                [prompt(int(indices[i])) for i in subset.tolist()],
                                                encoders.detector, counting, step)

        if train.loss_reduction == "sum":
            mse_part, counting_part = mse_rows.sum(), counting_rows.sum()
        else:
            mse_part = mse_rows.mean() / accumulation
            counting_part = (counting_rows.mean() if len(counting_rows) else counting_rows.sum()) / accumulation
        mse_part = mse_part.to(torch.float64)
        loss = total_loss(mse_part, counting_part, counting.lambda_weight)
        _check_finite(loss, step, {"mse": mse_part, "counting": counting_part})
        loss.backward()
        logger.debug(f"micro-batch of {batch}: mse {float(mse_part):.5f} counting {float(counting_part):.5f}")
        return mse_part.detach(), counting_part.detach()

    rows = []
    with logger.indent_block(f"Fine-tuning {len(parameters)} adapter tensors for {steps} steps", phase=True,
                             timed=True):
        for step in range(1, steps + 1):
            optimizer.zero_grad(set_to_none=True)
            mse_value = torch.zeros((), dtype=torch.float64, device=device)
            counting_value = torch.zeros((), dtype=torch.float64, device=device)
            for _ in range(accumulation):
                mse_part, counting_part = micro_step(step, next(batches))
                mse_value += mse_part
                counting_value += counting_part

            grad_norm = float(torch.nn.utils.clip_grad_norm_(parameters, train.gradient_clip_norm))
            lr = scheduler.get_last_lr()[0]
            optimizer.step()
            scheduler.step()

            mse_value, counting_value = float(mse_value), float(counting_value)
            row = {
                "step": step,
                "mse": mse_value,
                "counting": counting_value,
                "total": float(total_loss(mse_value, counting_value, counting.lambda_weight)),
                "lr": lr,
                "grad_norm": grad_norm,
                "grad_norm_clipped": _global_norm(parameters),
            }
            rows.append(row)
            if ledger is not None and run_id is not None:
                ledger.log_step(run_id, row)
            if step % train.log_every == 0 or step == steps:
                logger.info(f"step {step} mse {mse_value:.4f} counting {counting_value:.4f} "
                            f"total {row['total']:.4f} grad_norm {grad_norm:.3f}")

    after = _frozen_hashes(model, encoders)
    changed = [name for name in before if before[name] != after[name]]
    if changed:
        raise FrozenParameterError(f"Frozen parameters changed during fine-tuning: {changed}")
    model.eval()
    return FinetuneResult(model=model, log=pd.DataFrame(rows, columns=LOSS_COLUMNS), steps=steps,
                          base_parameter_hash=before["base"], frozen_hashes=before)


@dataclass
class FinetuneArtifacts:
    adapter_path: Path
    loss_csv: Path
    manifest_path: Path
    result: FinetuneResult


def load_encoders(categories: list[CategorySpec], encoder_path: str | Path, detector_path: str | Path | None,
                  conditioner: CategoryConditioner | None, config: ExperimentConfig) -> ConditionEncoders:
    device = torch.device(config.train.device)
    encoder, _ = load_encoder(encoder_path)
    detector = load_detector(detector_path)[0].to(device) if detector_path is not None else None
    return ConditionEncoders(
        encoder=encoder.to(device),
        categories=categories,
        detector=detector,
        conditioner=conditioner.to(device) if conditioner is not None else None,
        detector_threshold=config.detector.threshold,
        object_size=(config.data.min_object_size, config.data.max_object_size),
    )


def finetune_lora(
    base_path: str | Path,
    dataset: SceneDataset,
    config: ExperimentConfig,
    out_dir: str | Path,
    encoder_path: str | Path,
    detector_path: str | Path | None,
    ledger: RunLedger | None = None,
    command: list[str] | None = None,
) -> FinetuneArtifacts:
    """Wrap the frozen base with adapters, fine-tune, and write the adapter, loss CSV and run manifest"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger = ledger or RunLedger()
    model, schedule, conditioner, base_metadata = load_base(base_path)
    encoders = load_encoders(dataset.categories, encoder_path, detector_path, conditioner, config)
    digest = config.config_hash()

    with ledger.track("adapter", config.model_dump(mode="json"), digest, out_dir / "manifest.json", code_hash(),
                      dataset.manifest.content_hash, command) as run:
        result = finetune(model, schedule, dataset.scenes, encoders, config, ledger, run.run_id)
        adapter_path = save_adapter(out_dir / "adapter.pt", result.model, config.lora, {
            "config_hash": digest,
            "base_path": str(base_path),
            "base_config_hash": base_metadata.get("config_hash", ""),
            "train": config.train.model_dump(mode="json"),
            "steps": result.steps,
        })
        ledger.record_checkpoint(run.run_id, "adapter", adapter_path, digest, result.base_parameter_hash)
        loss_csv = out_dir / "loss.csv"
        result.log.to_csv(loss_csv, index=False)
        run.outputs.update({"adapter": adapter_path.name, "loss_log": loss_csv.name,
                            "base": str(Path(base_path).resolve())})
    return FinetuneArtifacts(adapter_path=adapter_path, loss_csv=loss_csv, manifest_path=run.manifest_path,
                             result=result)
