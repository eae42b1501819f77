import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
from PIL import Image

from .config import CategorySpec, DataConfig, SceneGenConfig, config_hash
from .errors import (
    ChecksumMismatchError,
    DanglingCategoryError,
    DatasetSchemaError,
    InvalidCategoryName,
    MissingArtifactError,
    SceneGenerationExhausted,
)
from .logging_config import IndentLogger
from .utils import file_sha256, read_json, write_json

logger = IndentLogger(logging.getLogger("scene_forge"))

SPLITS = ("train", "eval")
MIN_VISIBLE_FRACTION = 0.6
RERENDER_MATCH_FRACTION = 0.5

COCO_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "file_name", "width", "height"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "file_name": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "image_id", "category_id", "bbox"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "image_id": {"type": "integer", "minimum": 0},
                    "category_id": {"type": "integer", "minimum": 0},
                    "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    "area": {"type": "number"},
                    "iscrowd": {"type": "integer"},
                },
            },
        },
        "categories": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "name", "shape", "color"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string", "minLength": 1},
                    "shape": {"type": "string"},
                    "color": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class Annotation:
    category_id: int
    bbox: tuple[int, int, int, int]

    @property
    def area(self) -> int:
        x_min, y_min, x_max, y_max = self.bbox
        return (x_max - x_min) * (y_max - y_min)

    @property
    def center(self) -> tuple[float, float]:
        x_min, y_min, x_max, y_max = self.bbox
        return (x_min + x_max) / 2, (y_min + y_max) / 2

    def flipped(self, width: int) -> "Annotation":
        x_min, y_min, x_max, y_max = self.bbox
        return Annotation(self.category_id, (width - x_max, y_min, width - x_min, y_max))


@dataclass
class Scene:
    image: np.ndarray
    annotations: list[Annotation]
    scene_id: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def boxes(self) -> list[tuple[int, int, int, int]]:
        return [a.bbox for a in self.annotations]

    def flipped(self) -> "Scene":
        """Horizontal mirror of the image with its boxes"""
        return Scene(
            image=np.ascontiguousarray(self.image[:, ::-1, :]),
            annotations=[a.flipped(self.width) for a in self.annotations],
            scene_id=self.scene_id,
        )


@dataclass
class CategoryCounts:
    class_names: list[str] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    category_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.class_names) != len(self.counts) or len(self.counts) != len(self.category_ids):
            raise ValueError("class_names, counts and category_ids must have equal lengths")
        if any(c <= 0 for c in self.counts):
            raise ValueError(f"counts must be strictly positive, got {self.counts}")

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


IndexEntry = int | list[int]


@dataclass
class PromptSpec:
    prompt_text: str
    index_list: list[IndexEntry]
    counts: list[int]
    class_names: list[str]
    category_ids: list[int]

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.prompt_text)

    def token_indices(self, j: int) -> list[int]:
        entry = self.index_list[j]
        return [entry] if isinstance(entry, int) else list(entry)

    def words_for(self, j: int) -> list[str]:
        tokens = self.tokens
        return [tokens[i] for i in self.token_indices(j)]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    image_files: list[str]
    annotation_file: str
    categories: list[CategorySpec]
    seed: int
    config_hash: str
    checksums: dict[str, str]

    @property
    def split_dir(self) -> Path:
        return self.root / self.split

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.checksums, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "dataset",
            "status": "finished",
            "split": self.split,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "annotation_file": self.annotation_file,
            "image_files": self.image_files,
            "categories": [c.model_dump(mode="json") for c in self.categories],
            "checksums": self.checksums,
            "outputs": {"annotations": self.annotation_file},
        }

    @classmethod
    def from_json(cls, root: Path, data: dict[str, Any]) -> "DatasetManifest":
        return cls(
            root=root,
            split=data["split"],
            image_files=list(data["image_files"]),
            annotation_file=data["annotation_file"],
            categories=[CategorySpec.model_validate(c) for c in data["categories"]],
            seed=data["seed"],
            config_hash=data["config_hash"],
            checksums=dict(data["checksums"]),
        )


@dataclass
class SceneDataset:
    manifest: DatasetManifest
    categories: list[CategorySpec]
    scenes: list[Scene]

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int) -> Scene:
        return self.scenes[index]


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization where periods separate phrases and are not tokens"""
    return text.replace(".", " ").split()


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantized_color(category: CategorySpec) -> np.ndarray:
    return quantize(np.asarray(category.color, dtype=np.float64))


def shape_mask(shape: str, bbox: tuple[int, int, int, int], height: int, width: int) -> np.ndarray:
    """Boolean mask of a shape inscribed in bbox; depends only on (shape, bbox)"""
    x_min, y_min, x_max, y_max = bbox
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cx, cy = (x_min + x_max) / 2, (y_min + y_max) / 2
    r = min(x_max - x_min, y_max - y_min) / 2
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    inside = (xx >= x_min) & (xx < x_max) & (yy >= y_min) & (yy < y_max)

    match shape:
        case "circle":
            mask = dx**2 + dy**2 <= r**2
        case "square":
            mask = (dx <= r) & (dy <= r)
        case "triangle":
            rise = (yy - y_min) / max(y_max - y_min, 1)
            mask = dx <= rise * r
        case "ring":
            distance = np.sqrt(dx**2 + dy**2)
            mask = (distance <= r) & (distance >= 0.55 * r)
        case "cross":
            arm = max(r / 3, 1.0)
            mask = ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))
        case _:
            raise ValueError(f"Unknown shape kind '{shape}'")
    return mask & inside


def box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    intersection = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - intersection
    return intersection / union if union > 0 else 0.0


def center_cell(bbox: tuple[int, int, int, int], image_size: int, grid_size: int) -> tuple[int, int]:
    """(row, col) of the detector grid cell holding the box center"""
    cell = image_size / grid_size
    cx = (bbox[0] + bbox[2]) / 2
    cy = (bbox[1] + bbox[3]) / 2
    return min(int(cy // cell), grid_size - 1), min(int(cx // cell), grid_size - 1)


def textured_background(config: SceneGenConfig, rng: np.random.Generator) -> np.ndarray:
    size = config.image_size
    base = rng.uniform(0.3, 0.55, size=3)
    block = max(size // 16, 1)
    coarse = np.clip(rng.normal(0.0, config.texture_amplitude, size=(size // block, size // block, 3)),
                     -2 * config.texture_amplitude, 2 * config.texture_amplitude)
    texture = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)
    return np.clip(base + texture, 0.0, 1.0)


def generate_scene(
    config: SceneGenConfig,
    rng: np.random.Generator,
    scene_id: int = 0,
    required_category: int | None = None,
) -> Scene:
    """Render one scene by rejection sampling object placements"""
    size = config.image_size
    by_id = {c.id: c for c in config.categories}
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    category_ids = rng.integers(0, len(config.categories), size=n_objects).tolist()
    if required_category is not None:
        category_ids[0] = required_category

    canvas = quantize(textured_background(config, rng))
    owner = np.full((size, size), -1, dtype=np.int64)
    placed: list[Annotation] = []
    masks: list[np.ndarray] = []

    for category_id in category_ids:
        category = by_id[category_id]
        for _ in range(config.retries_per_object):
            side = int(rng.integers(config.min_object_size, config.max_object_size + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            bbox = (x0, y0, x0 + side, y0 + side)
            if side * side < config.min_box_area:
                continue
            if any(box_iou(bbox, other.bbox) > config.max_iou for other in placed):
                continue
            cell = center_cell(bbox, size, config.grid_size)
            if any(
                max(abs(cell[0] - oc[0]), abs(cell[1] - oc[1])) < config.center_separation
                for oc in (center_cell(o.bbox, size, config.grid_size) for o in placed)
            ):
                continue
            mask = shape_mask(category.shape, bbox, size, size)
            if not mask.any():
                continue
            if any(((owner == i) & ~mask).sum() < MIN_VISIBLE_FRACTION * m.sum() for i, m in enumerate(masks)):
                continue
            canvas[mask] = quantized_color(category)
            owner[mask] = len(placed)
            placed.append(Annotation(category_id, bbox))
            masks.append(mask)
            break
        else:
            raise SceneGenerationExhausted(
                f"scene generation exhausted: could not place object {len(placed) + 1} of {n_objects} "
                f"(category '{category.name}') in scene {scene_id} after {config.retries_per_object} retries"
            )

    return Scene(image=canvas.astype(np.float32) / 255.0, annotations=placed, scene_id=scene_id)


def verify_scene(scene: Scene, categories: list[CategorySpec]) -> bool:
    """Re-render each annotation and check its pixels carry the category color"""
    by_id = {c.id: c for c in categories}
    pixels = quantize(scene.image)
    for annotation in scene.annotations:
        category = by_id.get(annotation.category_id)
        if category is None:
            return False
        mask = shape_mask(category.shape, annotation.bbox, scene.height, scene.width)
        matches = np.all(pixels[mask] == quantized_color(category), axis=-1)
        if matches.mean() < RERENDER_MATCH_FRACTION:
            return False
    return True


def scene_rng(seed: int, split: str, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), scene_id])


def multi_word_category(categories: list[CategorySpec]) -> int:
    return next(c.id for c in categories if len(c.name.split()) > 1)


def _generate_one(args: tuple[SceneGenConfig, int, str, int]) -> Scene:
    config, seed, split, scene_id = args
    required = multi_word_category(config.categories) if scene_id == 0 else None
    return generate_scene(config, scene_rng(seed, split, scene_id), scene_id, required_category=required)


def generate_scenes(
    config: SceneGenConfig, count: int, seed: int, split: str = "train", workers: int = 1
) -> list[Scene]:
    """Generate scenes 0..count-1; scene 0 always holds a multi-word category"""
    jobs = [(config, seed, split, scene_id) for scene_id in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_one, jobs, chunksize=16))
    return [_generate_one(job) for job in jobs]


def count_by_category(annotations: list[Annotation], categories: list[CategorySpec]) -> CategoryCounts:
    by_id = {c.id: c for c in categories}
    tally = Counter()
    for annotation in annotations:
        if annotation.category_id not in by_id:
            raise DanglingCategoryError(f"dangling category: annotation references unknown id {annotation.category_id}")
        tally[annotation.category_id] += 1

    ids = sorted(tally)
    return CategoryCounts(
        class_names=[by_id[i].name for i in ids],
        counts=[tally[i] for i in ids],
        category_ids=ids,
    )


def build_prompt(counts: CategoryCounts, tokenizer=tokenize) -> PromptSpec:
    """Join category names with periods and record each name's token indices"""
    if len(counts) == 0:
        raise ValueError("build_prompt needs at least one category")

    index_list: list[IndexEntry] = []
    position = 0
    for name in counts.class_names:
        if "." in name:
            raise InvalidCategoryName(f"invalid category name '{name}': periods separate phrases")
        words = tokenizer(name)
        if not words:
            raise InvalidCategoryName(f"invalid category name '{name}'")
        indices = list(range(position, position + len(words)))
        index_list.append(indices[0] if len(indices) == 1 else indices)
        position += len(words)

    return PromptSpec(
        prompt_text=". ".join(counts.class_names),
        index_list=index_list,
        counts=list(counts.counts),
        class_names=list(counts.class_names),
        category_ids=list(counts.category_ids),
    )


def prompt_for_scene(scene: Scene, categories: list[CategorySpec]) -> PromptSpec:
    return build_prompt(count_by_category(scene.annotations, categories))


def to_coco(scenes: list[Scene], categories: list[CategorySpec]) -> dict[str, Any]:
    images, annotations = [], []
    for scene in scenes:
        images.append({
            "id": scene.scene_id,
            "file_name": f"images/{scene.scene_id:06}.png",
            "width": scene.width,
            "height": scene.height,
        })
        for a in scene.annotations:
            x_min, y_min, x_max, y_max = a.bbox
            annotations.append({
                "id": len(annotations),
                "image_id": scene.scene_id,
                "category_id": a.category_id,
                "bbox": [x_min, y_min, x_max - x_min, y_max - y_min],
                "area": a.area,
                "iscrowd": 0,
            })
    return {
        "images": images,
        "annotations": annotations,
        "categories": [c.model_dump(mode="json") for c in categories],
    }


def validate_coco(data: dict[str, Any]) -> None:
    try:
        jsonschema.validate(data, COCO_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DatasetSchemaError(f"Annotation file does not match the COCO schema: {e.message}") from e


def write_dataset(
    scenes: list[Scene],
    root: str | Path,
    split: str,
    categories: list[CategorySpec],
    seed: int,
    generation_config_hash: str,
) -> DatasetManifest:
    """Write images, COCO annotations and a checksummed manifest below <root>/<split>"""
    root = Path(root)
    split_dir = root / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)

    coco = to_coco(scenes, categories)
    validate_coco(coco)
    checksums = {}
    for scene, entry in zip(scenes, coco["images"], strict=True):
        path = split_dir / entry["file_name"]
        Image.fromarray(quantize(scene.image)).save(path, format="PNG")
        checksums[entry["file_name"]] = file_sha256(path)

    write_json(split_dir / "annotations.json", coco)
    manifest = DatasetManifest(
        root=root,
        split=split,
        image_files=[entry["file_name"] for entry in coco["images"]],
        annotation_file="annotations.json",
        categories=categories,
        seed=seed,
        config_hash=generation_config_hash,
        checksums=checksums,
    )
    write_json(split_dir / "manifest.json", manifest.to_json())
    logger.debug(f"Wrote {len(scenes)} scenes to {split_dir}")
    return manifest


def load_dataset(root: str | Path, split: str = "train", verify_checksums: bool = True) -> SceneDataset:
    root = Path(root)
    split_dir = root / split
    manifest = DatasetManifest.from_json(root, read_json(split_dir / "manifest.json"))
    coco = read_json(split_dir / manifest.annotation_file)
    validate_coco(coco)

    categories = [CategorySpec.model_validate(c) for c in coco["categories"]]
    known = {c.id for c in categories}
    by_image: dict[int, list[Annotation]] = {entry["id"]: [] for entry in coco["images"]}
    for a in coco["annotations"]:
        if a["category_id"] not in known:
            raise DanglingCategoryError(f"dangling category: annotation {a['id']} references {a['category_id']}")
        if a["image_id"] not in by_image:
            raise DatasetSchemaError(f"Annotation {a['id']} references unknown image {a['image_id']}")
        x, y, w, h = (int(v) for v in a["bbox"])
        by_image[a["image_id"]].append(Annotation(a["category_id"], (x, y, x + w, y + h)))

    scenes = []
    for entry in coco["images"]:
        path = split_dir / entry["file_name"]
        if not path.exists():
            raise MissingArtifactError(f"Image {path} referenced by {split_dir / manifest.annotation_file} is missing")
        if verify_checksums and manifest.checksums.get(entry["file_name"]) != file_sha256(path):
            raise ChecksumMismatchError(f"Checksum of {path} differs from the manifest")
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if pixels.shape != (entry["height"], entry["width"], 3):
            raise DatasetSchemaError(f"Image {path} has shape {pixels.shape}, annotations say "
                                     f"{entry['height']}x{entry['width']}")
        scenes.append(Scene(pixels.astype(np.float32) / 255.0, by_image[entry["id"]], entry["id"]))

    return SceneDataset(manifest=manifest, categories=categories, scenes=scenes)


def holdout_split(scenes: list[Scene], fraction: float) -> tuple[list[Scene], list[Scene]]:
    """The last ceil(fraction * n) scenes, at least one, are held out for validation"""
    if len(scenes) < 2:
        raise ValueError(f"Need at least two scenes to hold out a validation set, got {len(scenes)}")
    n_val = min(max(1, math.ceil(fraction * len(scenes))), len(scenes) - 1)
    return scenes[:-n_val], scenes[-n_val:]


def generate_dataset(config: DataConfig, root: str | Path) -> dict[str, DatasetManifest]:
    """Generate and write the train and eval splits"""
    generation_hash = config_hash(config)
    sizes = {"train": config.train_size, "eval": config.eval_size}
    manifests = {}
    for split in SPLITS:
        with logger.indent_block(f"Generating {split} split ({sizes[split]} scenes, seed {config.seed})", phase=True,
                                 timed=True):
            scenes = generate_scenes(config, sizes[split], config.seed, split, config.workers)
            failed = [s.scene_id for s in scenes if not verify_scene(s, config.categories)]
            if failed:
                raise SceneGenerationExhausted(f"Re-render check failed for scenes {failed[:10]}")
            manifests[split] = write_dataset(scenes, root, split, config.categories, config.seed, generation_hash)
            tally = Counter(a.category_id for s in scenes for a in s.annotations)
            logger.info(f"{sum(tally.values())} objects, per category {dict(sorted(tally.items()))}")
    return manifests

