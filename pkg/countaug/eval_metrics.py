import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
import torch
from PIL import Image
from scipy import linalg

from .config import CategorySpec, EvalConfig
from .errors import ShapeMismatchError
from .logging_config import IndentLogger
from .networks import GridDetector, PatchEncoder
from .reward_counter import count_matrix, detect_boxes
from .scene_forge import Annotation, Scene, count_by_category, prompt_for_scene, quantize
from .utils import to_tensor, write_json

if TYPE_CHECKING:
    from .service import ModelBundle

logger = IndentLogger(logging.getLogger("metrics"))

IQS_VERSION = "capped-recall-v1"
IQS50_THRESHOLD = 0.5
FEATURE_BATCH = 64


def _as_tensor(images: torch.Tensor | list[np.ndarray] | np.ndarray) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return to_tensor(images)


# Instance quantity score


def iqs_from_counts(
    detected: list[np.ndarray],
    truth: list[list[int]],
    thresholds: list[float],
) -> tuple[float, float]:
    """
    detected[i] is a (categories, thresholds) count array for image i, truth[i] its ground-truth counts.
    IQS is 100 x the mean of min(detected, truth) / truth over thresholds, images and present categories;
    IQS50 is the same restricted to the 0.5 threshold.
    """
    if len(detected) != len(truth):
        raise ValueError(f"IQS needs one count array per reference, got {len(detected)} and {len(truth)}")
    column = [k for k, t in enumerate(thresholds) if np.isclose(t, IQS50_THRESHOLD)]
    ratios, ratios50 = [], []
    for counts, gt in zip(detected, truth, strict=True):
        counts = np.asarray(counts)
        gt = np.asarray(gt, dtype=np.float64)
        if counts.shape != (len(gt), len(thresholds)):
            raise ShapeMismatchError(f"Count array {counts.shape} does not match {len(gt)} categories x "
                                     f"{len(thresholds)} thresholds")
        capped = np.minimum(counts, gt[:, None]) / gt[:, None]
        ratios.append(capped.ravel())
        if column:
            ratios50.append(capped[:, column[0]])
    if not ratios or sum(len(r) for r in ratios) == 0:
        raise ValueError("IQS needs at least one annotated object")
    iqs_value = 100.0 * float(np.concatenate(ratios).mean())
    iqs50_value = 100.0 * float(np.concatenate(ratios50).mean()) if ratios50 else float("nan")
    return iqs_value, iqs50_value


def iqs(
    generated: torch.Tensor | list[np.ndarray],
    references: list[Scene],
    detector: GridDetector,
    categories: list[CategorySpec],
    thresholds: list[float] | None = None,
) -> tuple[float, float]:
    """Capped per-category detection recall of generated[i] against the counts annotated on references[i]"""
    thresholds = list(thresholds or [round(0.1 * i, 1) for i in range(1, 10)])
    images = _as_tensor(generated)
    if images.shape[0] != len(references):
        raise ValueError(f"IQS needs one generated image per reference, got {images.shape[0]} and {len(references)}")
    counted = sorted(set(thresholds) | {IQS50_THRESHOLD})
    prompts = [prompt_for_scene(s, categories) for s in references]
    device = next(detector.parameters()).device

    detected = []
    for start in range(0, len(references), FEATURE_BATCH):
        part = slice(start, start + FEATURE_BATCH)
        detected.extend(count_matrix(images[part].to(device), prompts[part], detector, counted))
    truth = [count_by_category(s.annotations, categories).counts for s in references]

    keep = [counted.index(t) for t in thresholds]
    iqs_value, _ = iqs_from_counts([d[:, keep] for d in detected], truth, thresholds)
    _, iqs50_value = iqs_from_counts([d[:, [counted.index(IQS50_THRESHOLD)]] for d in detected], truth,
                                     [IQS50_THRESHOLD])
    return iqs_value, iqs50_value


# Frechet feature distance


@torch.no_grad()
def summary_features(images: torch.Tensor | list[np.ndarray], encoder: PatchEncoder) -> np.ndarray:
    images = _as_tensor(images)
    device = next(encoder.parameters()).device
    chunks = [encoder.summary(images[i : i + FEATURE_BATCH].to(device)).cpu() for i in range(0, len(images),
                                                                                              FEATURE_BATCH)]
    return torch.cat(chunks).to(torch.float64).numpy()


def symmetric_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Square root of a symmetric positive semi-definite matrix; negative eigenvalues are clipped to zero"""
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((A B)^1/2) as Tr((A^1/2 B A^1/2)^1/2)"""
    root_a = symmetric_sqrt(sigma_a)
    inner = root_a @ sigma_b @ root_a
    values = linalg.eigh((inner + inner.T) / 2.0, eigvals_only=True)
    return float(np.sqrt(np.clip(values, 0.0, None)).sum())


def _covariance(features: np.ndarray, shrinkage: float) -> np.ndarray:
    n, d = features.shape
    sigma = np.cov(features, rowvar=False).reshape(d, d)
    if n >= d + 1:
        return sigma
    if shrinkage <= 0.0:
        raise ValueError(f"Frechet distance needs at least {d + 1} images per set for {d} features, got {n}; "
                         f"enable covariance shrinkage")
    target = np.trace(sigma) / d * np.eye(d)
    return (1.0 - shrinkage) * sigma + shrinkage * target


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray, shrinkage: float = 0.0) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2)"""
    if features_a.ndim != 2 or features_b.ndim != 2 or features_a.shape[1] != features_b.shape[1]:
        raise ShapeMismatchError(f"Feature sets {features_a.shape} and {features_b.shape} are not comparable")
    if min(len(features_a), len(features_b)) < 2:
        raise ValueError("Frechet distance needs at least two images per set")
    sigma_a = _covariance(features_a, shrinkage)
    sigma_b = _covariance(features_b, shrinkage)
    offset = features_a.mean(axis=0) - features_b.mean(axis=0)
    cross = (_trace_sqrt_product(sigma_a, sigma_b) + _trace_sqrt_product(sigma_b, sigma_a)) / 2.0
    distance = float(offset @ offset) + float(np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * cross
    return max(distance, 0.0)


def fid_proxy(set_a: torch.Tensor | list[np.ndarray], set_b: torch.Tensor | list[np.ndarray], encoder: PatchEncoder,
              shrinkage: float = 0.0) -> float:
    return frechet_distance(summary_features(set_a, encoder), summary_features(set_b, encoder), shrinkage)


# Diversity


def _unit_normalize(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return features / (features.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def block_distances(original: torch.Tensor, augmented: torch.Tensor, encoder: PatchEncoder) -> torch.Tensor:
    """(pairs, blocks): squared distance of channel-normalized features, summed over channels, mean over space"""
    a = encoder(original).block_features
    b = encoder(augmented).block_features
    distances = [(_unit_normalize(fa) - _unit_normalize(fb)).pow(2).sum(dim=1).mean(dim=(1, 2))
                 for fa, fb in zip(a, b, strict=True)]
    return torch.stack(distances, dim=1)


def _pair_side(pairs: list[tuple[Any, Any]], side: int) -> torch.Tensor:
    items = [p[side] for p in pairs]
    if isinstance(items[0], torch.Tensor):
        return torch.stack(items)
    return to_tensor([np.asarray(i, dtype=np.float32) for i in items])


@torch.no_grad()
def diversity_score(pairs: list[tuple[Any, Any]], encoder: PatchEncoder) -> float:
    """Mean over pairs of the equally weighted per-block feature distance; higher is more diverse"""
    if not pairs:
        raise ValueError("diversity_score needs at least one pair")
    originals, augmented = _pair_side(pairs, 0), _pair_side(pairs, 1)
    if originals.shape != augmented.shape:
        raise ShapeMismatchError(f"Pair shapes differ: {tuple(originals.shape)} and {tuple(augmented.shape)}")
    device = next(encoder.parameters()).device
    scores = [
        block_distances(originals[i : i + FEATURE_BATCH].to(device), augmented[i : i + FEATURE_BATCH].to(device),
                        encoder).to(torch.float64).mean(dim=1).cpu()
        for i in range(0, len(originals), FEATURE_BATCH)
    ]
    return float(torch.cat(scores).mean())


def channel_std(images: torch.Tensor | list[np.ndarray]) -> float:
    """Population std across the batch of per-image channel means, averaged over the three channels"""
    images = _as_tensor(images)
    if images.shape[0] < 2:
        raise ValueError(f"channel_std needs at least two images, got {images.shape[0]}")
    means = images.to(torch.float64).mean(dim=(2, 3))
    return float(means.std(dim=0, unbiased=False).mean())


# Recurrent generation


@dataclass
class GenerationNode:
    path: tuple[int, ...]
    seed: int
    image: np.ndarray
    box_source: str
    boxes: list[Annotation] = field(default_factory=list)
    degenerate: bool = False

    @property
    def level(self) -> int:
        return len(self.path)

    @property
    def name(self) -> str:
        return "node_" + "_".join(str(p) for p in self.path)


@dataclass
class GenerationTree:
    scene_id: int
    depth: int
    fanout: int
    seed: int
    nodes: list[GenerationNode] = field(default_factory=list)

    def level(self, k: int) -> list[GenerationNode]:
        return [n for n in self.nodes if n.level == k]

    def level_std(self, k: int) -> float | None:
        images = [n.image for n in self.level(k)]
        return channel_std(images) if len(images) >= 2 else None

    def to_json(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "depth": self.depth,
            "fanout": self.fanout,
            "seed": self.seed,
            "nodes": [
                {
                    "name": n.name,
                    "path": list(n.path),
                    "parent": "_".join(str(p) for p in n.path[:-1]) or None,
                    "seed": n.seed,
                    "box_source": n.box_source,
                    "boxes": [{"category_id": b.category_id, "bbox": list(b.bbox)} for b in n.boxes],
                    "degenerate": n.degenerate,
                }
                for n in self.nodes
            ],
            "channel_std": {f"level_{k}": self.level_std(k) for k in range(1, self.depth + 1)},
        }


def node_seed(seed: int, path: tuple[int, ...]) -> int:
    """Seed of a tree node from the root seed and its path, independent of expansion order"""
    return int(np.random.SeedSequence(seed, spawn_key=path).generate_state(1)[0])


def recurrent_generate(bundle: "ModelBundle", scene: Scene, depth: int, fanout: int, seed: int) -> GenerationTree:
    """Augment the scene, then augment each augmentation again with condition boxes from the detector"""
    if depth < 1 or fanout < 1:
        raise ValueError(f"Recurrent generation needs depth >= 1 and fanout >= 1, got {depth} and {fanout}")
    if bundle.detector is None:
        raise ValueError("Recurrent generation needs a detector for the boxes of generated images")
    tree = GenerationTree(scene_id=scene.scene_id, depth=depth, fanout=fanout, seed=seed)
    frontier = [((), scene, "ground_truth")]

    for level in range(1, depth + 1):
        with logger.indent_block(f"Level {level}: expanding {len(frontier)} node(s)", timed=True):
            next_frontier = []
            for parent_path, condition_scene, box_source in frontier:
                for c in range(fanout):
                    path = (*parent_path, c)
                    child_seed = node_seed(seed, path)
                    image = bundle.augment(condition_scene, box_source="ground_truth", seed=child_seed)
                    node = GenerationNode(path=path, seed=child_seed, image=image, box_source=box_source)
                    tree.nodes.append(node)
                    if level == depth:
                        continue
                    node.boxes = detect_boxes(node.image, bundle.categories, bundle.detector,
                                              bundle.detector_threshold, node.image.shape[1])
                    if not node.boxes:
                        node.degenerate = True
                        logger.debug(f"{node.name} is degenerate: no detections")
                        continue
                    next_frontier.append((path, Scene(node.image, node.boxes, scene.scene_id), "detector"))
            frontier = next_frontier
    return tree


def write_tree(tree: GenerationTree, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for node in tree.nodes:
        Image.fromarray(quantize(node.image)).save(out_dir / f"{node.name}.png")
    return write_json(out_dir / "tree.json", tree.to_json())


# Report


@dataclass
class MetricReport:
    fid_proxy: float
    ds: float
    iqs: float
    iqs50: float
    channel_std_first: float | None
    channel_std_recurrent: float | None
    n_images: int
    thresholds: list[float]
    iqs_version: str = IQS_VERSION

    def __post_init__(self) -> None:
        for name in ("iqs", "iqs50"):
            value = getattr(self, name)
            if not np.isnan(value) and not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100], got {value}")
        if self.fid_proxy < 0 or self.ds < 0:
            raise ValueError(f"fid_proxy and ds must be non-negative, got {self.fid_proxy} and {self.ds}")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def to_row(self) -> pd.DataFrame:
        row = self.to_json()
        row["thresholds"] = " ".join(f"{t:g}" for t in self.thresholds)
        return pd.DataFrame([row])

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = write_json(out_dir / "metrics.json", self.to_json())
        csv_path = out_dir / "metrics.csv"
        self.to_row().to_csv(csv_path, index=False)
        return json_path, csv_path


def evaluate(
    generated: list[np.ndarray],
    references: list[Scene],
    encoder: PatchEncoder,
    detector: GridDetector,
    categories: list[CategorySpec],
    config: EvalConfig,
    channel_std_recurrent: float | None = None,
) -> MetricReport:
    """All metrics for generated[i] produced from references[i]"""
    if len(generated) != len(references):
        raise ValueError(f"Evaluation needs one generated image per reference, got {len(generated)} and "
                         f"{len(references)}")
    with logger.indent_block(f"Evaluating {len(generated)} images", phase=True, timed=True):
        originals = [s.image for s in references]
        iqs_value, iqs50_value = iqs(generated, references, detector, categories, config.thresholds)
        fid = fid_proxy(generated, originals, encoder, config.fid_shrinkage)
        ds = diversity_score(list(zip(originals, generated, strict=True)), encoder)
        first = channel_std(generated) if len(generated) >= 2 else None
        logger.info(f"FID proxy {fid:.4f}, DS {ds:.4f}, IQS {iqs_value:.2f}, IQS50 {iqs50_value:.2f}")
    return MetricReport(
        fid_proxy=fid,
        ds=ds,
        iqs=iqs_value,
        iqs50=iqs50_value,
        channel_std_first=first,
        channel_std_recurrent=channel_std_recurrent,
        n_images=len(generated),
        thresholds=list(config.thresholds),
    )


def evaluate_bundle(bundle: "ModelBundle", references: list[Scene], config: EvalConfig,
                    channel_std_recurrent: float | None = None) -> MetricReport:
    """Augment every reference scene with the bundle and evaluate the augmentations against their sources"""
    if bundle.detector is None:
        raise ValueError("Evaluation needs a detector")
    augmentations = bundle.augment_scenes(references, config.seed, config.box_source, config.samples_per_scene)
    by_id = {s.scene_id: s for s in references}
    return evaluate(
        [a.image for a in augmentations],
        [by_id[a.scene_id] for a in augmentations],
        bundle.encoders.encoder,
        bundle.detector,
        bundle.categories,
        config,
        channel_std_recurrent,
    )
