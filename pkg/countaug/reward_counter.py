import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .config import CategorySpec, CountingLossConfig, DetectorConfig, SceneGenConfig
from .errors import UnderfitError
from .logging_config import IndentLogger
from .networks import GridDetector
from .scene_forge import (
    Annotation,
    CategoryCounts,
    PromptSpec,
    Scene,
    build_prompt,
    center_cell,
    count_by_category,
    quantize,
    textured_background,
)
from .utils import load_archive, module_hash, save_archive, to_tensor, write_json

logger = IndentLogger(logging.getLogger("reward"))


@dataclass
class DetectorLogits:
    """Per-token, per-cell detector output for one image; scores = sigmoid(logits)"""

    logits: torch.Tensor

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def candidates(self) -> int:
        return self.logits.shape[-1]


def build_vocabulary(categories: list[CategorySpec]) -> list[str]:
    return sorted({word for c in categories for word in c.name.split()})


def category_prompt(categories: list[CategorySpec]) -> PromptSpec:
    """Prompt naming every category once, in id order"""
    ordered = sorted(categories, key=lambda c: c.id)
    return build_prompt(CategoryCounts([c.name for c in ordered], [1] * len(ordered), [c.id for c in ordered]))


def prompt_phrases(prompt: PromptSpec) -> list[list[str]]:
    return [prompt.words_for(j) for j in range(len(prompt.index_list))]


def _as_batch(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return to_tensor(image)
    return image if image.dim() == 4 else image.unsqueeze(0)


def detect(image: np.ndarray | torch.Tensor, prompt: PromptSpec, detector: GridDetector) -> DetectorLogits:
    """Token x cell confidences for one image; differentiable w.r.t. a tensor image"""
    batch = _as_batch(image).to(next(detector.parameters()).device)
    return DetectorLogits(detector(batch, prompt_phrases(prompt))[0])


def detect_batch(images: torch.Tensor, prompts: list[PromptSpec], detector: GridDetector) -> list[DetectorLogits]:
    """Shares the backbone pass across a batch where each image has its own prompt"""
    features = detector.cell_features(images)
    return [
        DetectorLogits(detector.logits(features[i : i + 1], detector.token_queries(prompt_phrases(p)))[0])
        for i, p in enumerate(prompts)
    ]


def gather_category_scores(scores: torch.Tensor | DetectorLogits, index_entry: int | list[int]) -> torch.Tensor:
    """Row of one token, or the concatenated rows of a multi-token category"""
    rows = scores.scores if isinstance(scores, DetectorLogits) else scores
    indices = [index_entry] if isinstance(index_entry, int) else list(index_entry)
    if not indices:
        raise ValueError("Index entry must name at least one token")
    if any(not 0 <= i < rows.shape[0] for i in indices):
        raise ValueError(f"Token indices {indices} out of range for {rows.shape[0]} score rows")
    return torch.cat([rows[i] for i in indices])


def class_loss(s: torch.Tensor, count: int, tau: float, policy: str = "zero_pad") -> torch.Tensor:
    """Sum of ReLU(tau - score) over the top-k scores"""
    if count <= 0:
        raise ValueError(f"Category count must be positive, got {count}")
    if s.numel() < count:
        if policy == "zero_pad":
            s = torch.cat([s, s.new_zeros(count - s.numel())])
        else:
            count = s.numel()
    top = torch.topk(s, count).values
    return F.relu(tau - top).sum()


def counting_loss_from_scores(scores: torch.Tensor, prompt: PromptSpec, config: CountingLossConfig) -> torch.Tensor:
    """Sum of per-category hinge losses divided by the total object count"""
    if len(prompt.counts) != len(prompt.index_list):
        raise ValueError("Prompt counts and index list have different lengths")
    scores = scores.to(torch.float64)
    losses = [
        class_loss(gather_category_scores(scores, entry), count, config.tau, config.missing_candidate_policy)
        for entry, count in zip(prompt.index_list, prompt.counts, strict=True)
    ]
    return torch.stack(losses).sum() / sum(prompt.counts)


def counting_loss_from_logits(logits: torch.Tensor, prompt: PromptSpec, config: CountingLossConfig) -> torch.Tensor:
    return counting_loss_from_scores(torch.sigmoid(logits.to(torch.float64)), prompt, config)


def counting_active(global_step: int, config: CountingLossConfig) -> bool:
    return global_step > config.gamma


def counting_loss(
    denoised_image: torch.Tensor,
    prompt: PromptSpec,
    detector: GridDetector,
    config: CountingLossConfig,
    global_step: int,
) -> torch.Tensor:
    """Zero up to and including step gamma, then the normalized hinge loss on the detector's scores"""
    if not counting_active(global_step, config):
        return torch.zeros((), dtype=torch.float64, device=denoised_image.device)
    return counting_loss_from_logits(detect(denoised_image, prompt, detector).logits, prompt, config)


def batch_counting_loss(
    images: torch.Tensor,
    prompts: list[PromptSpec],
    detector: GridDetector,
    config: CountingLossConfig,
    global_step: int,
) -> torch.Tensor:
    """Per-image counting losses, shape (B,), float64"""
    if not counting_active(global_step, config):
        return torch.zeros(len(prompts), dtype=torch.float64, device=images.device)
    detections = detect_batch(images, prompts, detector)
    return torch.stack([counting_loss_from_logits(d.logits, p, config) for d, p in zip(detections, prompts,
                                                                                        strict=True)])


def local_peaks(category_logits: torch.Tensor, grid_size: int, threshold: float) -> torch.Tensor:
    """Boolean (G, G) map of 3x3 local maxima at or above the threshold

    A plateau of equal neighbouring cells yields one peak, its first cell in row-major order.
    """
    if threshold >= 1.0:
        return torch.zeros(grid_size, grid_size, dtype=torch.bool)
    grid = category_logits.detach().reshape(grid_size, grid_size).cpu()
    padded = F.pad(grid[None, None], (1, 1, 1, 1), value=float("-inf"))[0, 0]
    peaks = grid >= math.log(threshold / (1.0 - threshold))
    for dr, dc in itertools.product((-1, 0, 1), repeat=2):
        if dr == dc == 0:
            continue
        neighbor = padded[1 + dr : 1 + dr + grid_size, 1 + dc : 1 + dc + grid_size]
        peaks &= grid > neighbor if (dr, dc) < (0, 0) else grid >= neighbor
    return peaks


def category_logit_maps(logits: DetectorLogits, prompt: PromptSpec) -> list[torch.Tensor]:
    """One candidate row per category; multi-token categories take the element-wise max of their rows"""
    return [logits.logits[prompt.token_indices(j)].max(dim=0).values for j in range(len(prompt.index_list))]


@torch.no_grad()
def count_detections(
    image: np.ndarray | torch.Tensor,
    prompt: PromptSpec,
    detector: GridDetector,
    threshold: float,
) -> list[int]:
    """Per prompt category, the number of 3x3 local maxima scoring at least `threshold`"""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"Threshold must lie in (0, 1], got {threshold}")
    maps = category_logit_maps(detect(image, prompt, detector), prompt)
    return [int(local_peaks(m, detector.grid_size, threshold).sum()) for m in maps]


@torch.no_grad()
def count_matrix(
    images: torch.Tensor,
    prompts: list[PromptSpec],
    detector: GridDetector,
    thresholds: list[float],
) -> list[np.ndarray]:
    """For each image, a (categories, thresholds) integer array of detection counts"""
    results = []
    for detection, prompt in zip(detect_batch(images, prompts, detector), prompts, strict=True):
        maps = category_logit_maps(detection, prompt)
        counts = np.zeros((len(maps), len(thresholds)), dtype=np.int64)
        for j, m in enumerate(maps):
            for k, threshold in enumerate(thresholds):
                counts[j, k] = int(local_peaks(m, detector.grid_size, threshold).sum())
        results.append(counts)
    return results


@torch.no_grad()
def detect_boxes(
    image: np.ndarray | torch.Tensor,
    categories: list[CategorySpec],
    detector: GridDetector,
    threshold: float = 0.5,
    image_size: int | None = None,
) -> list[Annotation]:
    """Cell-sized boxes around every peak, for every category"""
    prompt = category_prompt(categories)
    maps = category_logit_maps(detect(image, prompt, detector), prompt)
    g = detector.grid_size
    size = image_size or _as_batch(image).shape[-1]
    cell = size // g
    boxes = []
    for category_id, m in zip(prompt.category_ids, maps, strict=True):
        for r, c in torch.nonzero(local_peaks(m, g, threshold)).tolist():
            boxes.append(Annotation(category_id, (c * cell, r * cell, (c + 1) * cell, (r + 1) * cell)))
    return boxes


def token_targets(scene: Scene, prompt: PromptSpec, grid_size: int) -> torch.Tensor:
    """(tokens, G*G) binary targets: a token's cells hold a box center of its category"""
    rows = torch.zeros(len(prompt.tokens), grid_size * grid_size)
    token_rows = {cid: prompt.token_indices(j) for j, cid in enumerate(prompt.category_ids)}
    for a in scene.annotations:
        r, c = center_cell(a.bbox, scene.width, grid_size)
        for t in token_rows[a.category_id]:
            rows[t, r * grid_size + c] = 1.0
    return rows


def blank_scene(config: SceneGenConfig, rng: np.random.Generator, scene_id: int = -1) -> Scene:
    image = quantize(textured_background(config, rng)).astype(np.float32) / 255.0
    return Scene(image=image, annotations=[], scene_id=scene_id)


def counting_accuracy(
    scenes: list[Scene],
    categories: list[CategorySpec],
    detector: GridDetector,
    threshold: float,
) -> dict[str, float]:
    """Per category, the fraction of scenes whose detected count equals the annotated count"""
    prompt = category_prompt(categories)
    hits = np.zeros(len(prompt.category_ids))
    for scene in scenes:
        detected = count_detections(scene.image, prompt, detector, threshold)
        truth = count_by_category(scene.annotations, categories)
        expected = dict(zip(truth.category_ids, truth.counts, strict=True))
        hits += [d == expected.get(cid, 0) for d, cid in zip(detected, prompt.category_ids, strict=True)]
    return {name: float(h / len(scenes)) for name, h in zip(prompt.class_names, hits, strict=True)}


def pretrain_detector(
    train_scenes: list[Scene],
    val_scenes: list[Scene],
    scene_config: SceneGenConfig,
    config: DetectorConfig,
    device: str = "cpu",
) -> tuple[GridDetector, dict[str, Any]]:
    """Per-cell binary cross-entropy on an all-category prompt, blank backgrounds mixed in; then freeze"""
    categories = scene_config.categories
    prompt = category_prompt(categories)
    phrases = prompt_phrases(prompt)
    g = scene_config.grid_size
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)

    detector = GridDetector(build_vocabulary(categories), config, scene_config.image_size, g).to(device)
    optimizer = torch.optim.AdamW(detector.parameters(), lr=config.learning_rate)
    flipped = [s.flipped() for s in train_scenes]
    targets = [token_targets(s, prompt, g) for s in train_scenes]
    flipped_targets = [token_targets(s, prompt, g) for s in flipped]
    empty = torch.zeros_like(targets[0])

    history = []
    with logger.indent_block(f"Pretraining detector for {config.steps} steps", phase=True, timed=True):
        detector.train()
        for step in range(1, config.steps + 1):
            images, batch_targets = [], []
            for _ in range(config.batch_size):
                if rng.random() < config.blank_fraction:
                    images.append(blank_scene(scene_config, rng).image)
                    batch_targets.append(empty)
                    continue
                i = int(rng.integers(len(train_scenes)))
                use_flip = bool(rng.random() < 0.5)
                images.append((flipped if use_flip else train_scenes)[i].image)
                batch_targets.append((flipped_targets if use_flip else targets)[i])
            logits = detector(to_tensor(images).to(device), phrases)
            loss = F.binary_cross_entropy_with_logits(logits, torch.stack(batch_targets).to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % 250 == 0 or step == config.steps:
                history.append({"step": step, "loss": float(loss)})
                logger.info(f"step {step} loss {float(loss):.4f}")

    detector.eval()
    detector.requires_grad_(False)
    accuracy = counting_accuracy(val_scenes, categories, detector, config.threshold)
    blanks = [blank_scene(scene_config, rng, -(i + 1)) for i in range(16)]
    blank_max = max(float(detect(b.image, prompt, detector).scores.max()) for b in blanks)
    reduce = min if config.accuracy_reduction == "min" else (lambda v: sum(v) / len(v))
    score = reduce(list(accuracy.values()))
    metrics = {"counting_accuracy": accuracy, "reduced_accuracy": score, "blank_max_score": blank_max,
               "history": history}
    logger.info(f"Detector {config.accuracy_reduction} counting accuracy {score:.3f}, blank max score {blank_max:.3f}")
    if score < config.accuracy_bar:
        raise UnderfitError(
            f"detector underfit: {config.accuracy_reduction} per-category counting accuracy {score:.3f} "
            f"below {config.accuracy_bar} after {config.steps} steps"
        )
    return detector, metrics


def save_detector(path: str | Path, detector: GridDetector, config: DetectorConfig, image_size: int,
                  metadata: dict[str, Any]) -> Path:
    payload = {
        "architecture": config.model_dump(mode="json"),
        "vocabulary": detector.vocabulary,
        "image_size": image_size,
        "grid_size": detector.grid_size,
        "parameter_hash": module_hash(detector),
        **metadata,
    }
    path = save_archive(path, "detector", dict(detector.state_dict()), payload)
    write_json(Path(path).with_suffix(".json"), payload)
    return path


def load_detector(path: str | Path) -> tuple[GridDetector, dict[str, Any]]:
    archive = load_archive(path, kind="detector")
    metadata = archive["metadata"]
    detector = GridDetector(
        metadata["vocabulary"],
        DetectorConfig.model_validate(metadata["architecture"]),
        metadata["image_size"],
        metadata["grid_size"],
    )
    detector.load_state_dict(archive["parameters"])
    detector.eval()
    detector.requires_grad_(False)
    return detector, metadata


def loss_debug_dump(
    image: np.ndarray | torch.Tensor,
    prompt: PromptSpec,
    detector: GridDetector,
    config: CountingLossConfig,
) -> dict[str, Any]:
    """Per-category top-k scores and hinge losses, as written by inspect-loss"""
    with torch.no_grad():
        scores = detect(image, prompt, detector).scores.to(torch.float64)
    categories = []
    for j, (entry, count) in enumerate(zip(prompt.index_list, prompt.counts, strict=True)):
        s = gather_category_scores(scores, entry)
        k = min(count, s.numel())
        categories.append({
            "name": prompt.class_names[j],
            "token_indices": prompt.token_indices(j),
            "count": count,
            "top_k_scores": torch.topk(s, k).values.tolist(),
            "loss": float(class_loss(s, count, config.tau, config.missing_candidate_policy)),
        })
    return {
        "prompt": prompt.prompt_text,
        "tau": config.tau,
        "policy": config.missing_candidate_policy,
        "categories": categories,
        "counting_loss": float(counting_loss_from_scores(scores, prompt, config)),
    }
