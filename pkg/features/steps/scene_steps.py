import hashlib
import itertools
import json
import logging
from pathlib import Path
from unittest import TestCase

import numpy as np
from behave import given, then, when
from PIL import Image
from fixtures import capture, category_names, parse_list, scene_with

from countaug.config import DEFAULT_PALETTE, DataConfig, SceneGenConfig
from countaug.scene_forge import (
    Annotation,
    CategoryCounts,
    box_iou,
    build_prompt,
    count_by_category,
    generate_dataset,
    generate_scene,
    generate_scenes,
    holdout_split,
    load_dataset,
    quantize,
    scene_rng,
    validate_coco,
    verify_scene,
    write_dataset,
)
from countaug.utils import file_sha256, read_json, write_json

assertions = TestCase()

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "golden"

logger = logging.getLogger("features")


def names_from(text: str) -> list[str]:
    return [] if text == "none" else text.split(";")


@given("a scene config with between {low:d} and {high:d} objects")
def step_impl(context, low, high):
    context.scene_config = SceneGenConfig(min_objects=low, max_objects=high)


@given("the default scene config")
def step_impl(context):
    context.scene_config = SceneGenConfig()


@given("a scene config with {n:d} objects of size {low:d} to {high:d} and no overlap allowed")
def step_impl(context, n, low, high):
    context.scene_config = SceneGenConfig(
        min_objects=n, max_objects=n, min_object_size=low, max_object_size=high, max_iou=0.0
    )


@when("a scene is generated with seed {seed:d}")
def step_impl(context, seed):
    context.scene = capture(context, generate_scene, context.scene_config, scene_rng(seed, "train", 0))


@when("a scene is generated with seed {seed:d} twice")
def step_impl(context, seed):
    context.scenes = [generate_scene(context.scene_config, scene_rng(seed, "train", 0)) for _ in range(2)]


@then("the scene has {n:d} annotations")
def step_impl(context, n):
    assertions.assertIsNone(context.error)
    assertions.assertEqual(len(context.scene.annotations), n)


@then("every box lies inside the image")
def step_impl(context):
    size = context.scene_config.image_size
    for x_min, y_min, x_max, y_max in context.scene.boxes:
        assertions.assertTrue(0 <= x_min < x_max <= size and 0 <= y_min < y_max <= size)


@then("every pair of boxes has IoU at most {cap:g}")
def step_impl(context, cap):
    for a, b in itertools.combinations(context.scene.boxes, 2):
        assertions.assertLessEqual(box_iou(a, b), cap)


@then("every box passes the re-render check")
def step_impl(context):
    assertions.assertTrue(verify_scene(context.scene, context.scene_config.categories))


@then("both scenes are bit-identical")
def step_impl(context):
    first, second = context.scenes
    np.testing.assert_array_equal(first.image, second.image)
    assertions.assertEqual(first.annotations, second.annotations)


@given('annotations with category ids "{ids}"')
def step_impl(context, ids):
    context.annotations = [Annotation(i, (0, 0, 4, 4)) for i in parse_list(ids)]


@when("the annotations are counted by category")
def step_impl(context):
    context.counts = capture(context, count_by_category, context.annotations, DEFAULT_PALETTE)


@then('the class names are "{names}"')
def step_impl(context, names):
    assertions.assertIsNone(context.error)
    assertions.assertEqual(context.counts.class_names, names_from(names))


@then('the category counts are "{counts}"')
def step_impl(context, counts):
    assertions.assertEqual(context.counts.counts, parse_list(counts))


@given("{n:d} generated default scenes with seed {seed:d}")
def step_impl(context, n, seed):
    context.scene_config = SceneGenConfig()
    context.scenes = generate_scenes(context.scene_config, n, seed)


@then("every scene's category counts sum to its annotation count")
def step_impl(context):
    for scene in context.scenes:
        counts = count_by_category(scene.annotations, context.scene_config.categories)
        assertions.assertEqual(counts.total, len(scene.annotations))
        assertions.assertTrue(all(c > 0 for c in counts.counts))


@given('the category names "{names}" with counts "{counts}"')
def step_impl(context, names, counts):
    class_names = names_from(names)
    context.counts = CategoryCounts(class_names, parse_list(counts), list(range(len(class_names))))


@given("a single category with a blank name")
def step_impl(context):
    context.counts = CategoryCounts([" "], [1], [0])


@when("the prompt is built")
def step_impl(context):
    context.prompt = capture(context, build_prompt, context.counts)


@when("the prompt is built from the counts")
def step_impl(context):
    context.prompt = capture(context, build_prompt, context.counts)


@then('the prompt text is "{text}"')
def step_impl(context, text):
    assertions.assertIsNone(context.error)
    assertions.assertEqual(context.prompt.prompt_text, text)


@then('the prompt index list is "{index}"')
def step_impl(context, index):
    assertions.assertEqual(context.prompt.index_list, json.loads(index))


@then("every category's words are recovered from the prompt tokens")
def step_impl(context):
    for j, name in enumerate(context.prompt.class_names):
        assertions.assertEqual(context.prompt.words_for(j), name.split())
    assertions.assertEqual(context.prompt.counts, context.counts.counts)


@given("a {size:d} pixel scene with a box from {x0:d},{y0:d} to {x1:d},{y1:d}")
def step_impl(context, size, x0, y0, x1, y1):
    context.scene = scene_with([(0, (x0, y0, x1, y1))], size=size)


@when("the scene is mirrored")
def step_impl(context):
    context.mirrored = context.scene.flipped()


@then("the mirrored box is {x0:d},{y0:d} to {x1:d},{y1:d}")
def step_impl(context, x0, y0, x1, y1):
    assertions.assertEqual(context.mirrored.boxes, [(x0, y0, x1, y1)])


@then("mirroring twice gives back the original image")
def step_impl(context):
    np.testing.assert_array_equal(context.mirrored.flipped().image, context.scene.image)
    assertions.assertEqual(context.mirrored.flipped().annotations, context.scene.annotations)


@when("the scenes are written to a dataset")
def step_impl(context):
    context.dataset_root = context.workdir / "data"
    write_dataset(context.scenes, context.dataset_root, "train", context.scene_config.categories, 11, "test")


@when("the scenes are written to a dataset and loaded again")
def step_impl(context):
    context.execute_steps("When the scenes are written to a dataset")
    context.loaded = load_dataset(context.dataset_root, "train")


@when("image {index:d} of the dataset is deleted")
def step_impl(context, index):
    (context.dataset_root / "train" / "images" / f"{index:06}.png").unlink()


@when("image {index:d} of the dataset is overwritten with a blank image")
def step_impl(context, index):
    size = context.scene_config.image_size
    Image.new("RGB", (size, size)).save(context.dataset_root / "train" / "images" / f"{index:06}.png")


@when("the dataset is loaded")
def step_impl(context):
    context.loaded = capture(context, load_dataset, context.dataset_root, "train")


@then("the loaded scenes equal the written scenes")
def step_impl(context):
    assertions.assertEqual(len(context.loaded), len(context.scenes))
    for written, loaded in zip(context.scenes, context.loaded.scenes, strict=True):
        assertions.assertEqual(loaded.scene_id, written.scene_id)
        np.testing.assert_array_equal(loaded.image, written.image)
        assertions.assertEqual(loaded.annotations, written.annotations)


@then("the annotation file follows the COCO schema")
def step_impl(context):
    validate_coco(read_json(context.dataset_root / "train" / "annotations.json"))


@given("a data config with {train:d} train and {eval:d} eval scenes")
def step_impl(context, train, eval):
    context.data_config = DataConfig(train_size=train, eval_size=eval)


@when("the dataset is generated twice")
def step_impl(context):
    context.manifests = [
        generate_dataset(context.data_config, context.workdir / name) for name in ("first", "second")
    ]


@then("both generations have identical checksums")
def step_impl(context):
    first, second = context.manifests
    for split in ("train", "eval"):
        assertions.assertEqual(first[split].checksums, second[split].checksums)
        assertions.assertEqual(first[split].seed, context.data_config.seed)


@then("the first train scene contains a multi-word category")
def step_impl(context):
    dataset = load_dataset(context.workdir / "first", "train")
    names = category_names([a.category_id for a in dataset.scenes[0].annotations])
    assertions.assertTrue(any(len(n.split()) > 1 for n in names))


@when("{percent:d} percent of the scenes are held out")
def step_impl(context, percent):
    context.split = holdout_split(context.scenes, percent / 100)


@then("{train:d} scenes remain for training and {held:d} are held out")
def step_impl(context, train, held):
    assertions.assertEqual([len(part) for part in context.split], [train, held])


@then("both generations write byte-identical manifests and annotation files")
def step_impl(context):
    for split in ("train", "eval"):
        for name in ("manifest.json", "annotations.json"):
            first = (context.workdir / "first" / split / name).read_bytes()
            second = (context.workdir / "second" / split / name).read_bytes()
            assertions.assertEqual(first, second, f"{split}/{name}")


def _dataset_fingerprint(root: Path, split: str) -> dict:
    dataset = load_dataset(root, split)
    return {
        "annotations": file_sha256(root / split / "annotations.json"),
        "pixels": {
            str(scene.scene_id): hashlib.sha256(quantize(scene.image).tobytes()).hexdigest() for scene in dataset.scenes
        },
    }


@then('the first generation matches the golden checksums in "{name}"')
def step_impl(context, name):
    path = GOLDEN_DIR / name
    golden = read_json(path)
    actual = {
        "config_hash": context.manifests[0]["train"].config_hash,
        **{split: _dataset_fingerprint(context.workdir / "first", split) for split in ("train", "eval")},
    }
    if context.config.userdata.getbool("record_golden") or any(golden.get(k) is None for k in actual):
        logger.warning(f"Recording golden checksums to {path}")
        write_json(path, {**golden, **actual})
        return
    for key, value in actual.items():
        assertions.assertEqual(golden[key], value, f"{key} drifted from {path}")
