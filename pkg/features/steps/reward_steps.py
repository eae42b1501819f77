import copy
from unittest import TestCase

import numpy as np
import torch
from behave import given, then, when
from fixtures import capture, painted_scene, parse_list, pretrained_detector, tiny_config, tiny_detector

from countaug.config import CountingLossConfig
from countaug.networks import GridDetector
from countaug.reward_counter import (
    blank_scene,
    build_vocabulary,
    category_logit_maps,
    category_prompt,
    class_loss,
    count_detections,
    counting_loss,
    counting_loss_from_scores,
    detect,
    gather_category_scores,
    local_peaks,
    load_detector,
    loss_debug_dump,
    pretrain_detector,
    save_detector,
)
from countaug.scene_forge import CategoryCounts, build_prompt, center_cell
from countaug.utils import module_hash

assertions = TestCase()


def brute_force_counting_loss(rows: list[list[float]], index_list, counts, tau: float) -> float:
    """Plain-Python top-k hinge loss with zero padding, normalized by the total count"""
    total = 0.0
    for entry, count in zip(index_list, counts, strict=True):
        indices = [entry] if isinstance(entry, int) else entry
        candidates = [v for i in indices for v in rows[i]]
        candidates += [0.0] * max(0, count - len(candidates))
        top = sorted(candidates, reverse=True)[:count]
        total += sum(max(0.0, tau - v) for v in top)
    return total / sum(counts)


def make_prompt(names: str, counts: str):
    class_names = names.split(";")
    return build_prompt(CategoryCounts(class_names, parse_list(counts), list(range(len(class_names)))))


@when("the class loss of scores \"{scores}\" is taken for a count of {k:d} with tau {tau:g}")
def step_impl(context, scores, k, tau):
    s = torch.tensor(parse_list(scores, float), dtype=torch.float64)
    context.loss = capture(context, class_loss, s, k, tau)


@when("the class loss of scores \"{scores}\" is taken for a count of {k:d} with tau {tau:g} "
      "truncating missing candidates")
def step_impl(context, scores, k, tau):
    s = torch.tensor(parse_list(scores, float), dtype=torch.float64)
    context.loss = class_loss(s, k, tau, "truncate")


@then("the class loss is {value:g}")
def step_impl(context, value):
    assertions.assertIsNone(context.error)
    assertions.assertAlmostEqual(float(context.loss), value, places=9)


@given("a score matrix of {tokens:d} tokens over an {g:d} by {g2:d} grid")
def step_impl(context, tokens, g, g2):
    context.score_rows = torch.rand(tokens, g * g2, generator=torch.Generator().manual_seed(0))


@when('the scores of index entry "{entry}" are gathered')
def step_impl(context, entry):
    indices = parse_list(entry)
    value = indices[0] if len(indices) == 1 else indices
    context.gathered = capture(context, gather_category_scores, context.score_rows, value)


@then("the gathered vector has {n:d} entries holding rows {a:d} then {b:d}")
def step_impl(context, n, a, b):
    assertions.assertEqual(context.gathered.numel(), n)
    torch.testing.assert_close(context.gathered, torch.cat([context.score_rows[a], context.score_rows[b]]))


@given('a prompt for "{names}" with counts "{counts}"')
def step_impl(context, names, counts):
    context.prompt = make_prompt(names, counts)


@given('token scores "{first}" and "{second}"')
def step_impl(context, first, second):
    context.score_rows = torch.tensor([parse_list(first, float), parse_list(second, float)], dtype=torch.float64)


@when("the counting loss is computed from the scores with tau {tau:g}")
def step_impl(context, tau):
    context.loss = counting_loss_from_scores(context.score_rows, context.prompt, CountingLossConfig(tau=tau))


@then("the counting loss is {value:g}")
def step_impl(context, value):
    assertions.assertAlmostEqual(float(context.loss), value, places=9)


@then("the counting loss is positive")
def step_impl(context):
    assertions.assertGreater(float(context.loss), 0.0)


@when("{n:d} random counting loss cases are compared with a brute-force evaluation")
def step_impl(context, n):
    rng = np.random.default_rng(7)
    words = ["circle", "square", "red", "triangle", "blue", "ring", "cross", "green"]
    context.deviations = []
    for _ in range(n):
        k = int(rng.integers(1, 5))
        names = []
        for _ in range(k):
            length = int(rng.integers(1, 3))
            names.append(" ".join(rng.choice(words, size=length, replace=True).tolist()))
        counts = rng.integers(1, 12, size=k).tolist()
        prompt = build_prompt(CategoryCounts(names, counts, list(range(k))))
        cells = int(rng.choice([1, 4, 9, 16]))
        rows = rng.uniform(0.0, 0.3, size=(len(prompt.tokens), cells))
        tau = float(rng.uniform(0.01, 0.99))
        ours = float(counting_loss_from_scores(torch.from_numpy(rows), prompt, CountingLossConfig(tau=tau)))
        reference = brute_force_counting_loss(rows.tolist(), prompt.index_list, counts, tau)
        context.deviations.append(abs(ours - reference))


@then("every case agrees within {tolerance:g}")
def step_impl(context, tolerance):
    assertions.assertLessEqual(max(context.deviations), tolerance)


@given("a small frozen grid detector")
def step_impl(context):
    context.config = tiny_config()
    context.detector = tiny_detector(context.config)


@given('a random image tensor for the prompt "{names}" with counts "{counts}"')
def step_impl(context, names, counts):
    context.prompt = make_prompt(names, counts)
    size = context.config.data.image_size
    context.image = torch.rand(1, 3, size, size, generator=torch.Generator().manual_seed(3)).requires_grad_(True)


@when("the counting loss is computed at step {step:d} with gate {gamma:g}")
def step_impl(context, step, gamma):
    config = CountingLossConfig(gamma=gamma)
    context.loss = counting_loss(context.image, context.prompt, context.detector, config, step)


@then("the image tensor receives a gradient from the counting loss")
def step_impl(context):
    context.loss.backward()
    assertions.assertIsNotNone(context.image.grad)
    assertions.assertGreater(float(context.image.grad.abs().sum()), 0.0)


@when('detections are counted at thresholds "{thresholds}"')
def step_impl(context, thresholds):
    context.thresholds = parse_list(thresholds, float)
    context.detections = []
    for threshold in context.thresholds:
        counts = capture(context, count_detections, context.image.detach(), context.prompt, context.detector,
                         threshold)
        if context.error is not None:
            return
        context.detections.append(counts)


@then("the detection counts never increase with the threshold")
def step_impl(context):
    counts = np.asarray(context.detections)
    assertions.assertTrue(np.all(np.diff(counts, axis=0) <= 0))


@then("no detections are counted at threshold {threshold:g}")
def step_impl(context, threshold):
    assertions.assertEqual(context.detections[context.thresholds.index(threshold)], [0] * len(context.prompt.counts))


@when("the counting loss is dumped")
def step_impl(context):
    context.dump = loss_debug_dump(context.image.detach(), context.prompt, context.detector,
                                   context.config.train.counting)


@then("the dump lists {n:d} categories with their top scores")
def step_impl(context, n):
    categories = context.dump["categories"]
    assertions.assertEqual(len(categories), n)
    for entry, count in zip(categories, context.prompt.counts, strict=True):
        assertions.assertEqual(len(entry["top_k_scores"]), count)
        assertions.assertEqual(entry["top_k_scores"], sorted(entry["top_k_scores"], reverse=True))


@then("the dumped total equals the counting loss")
def step_impl(context):
    config = context.config.train.counting.model_copy(update={"gamma": 0})
    expected = counting_loss(context.image.detach(), context.prompt, context.detector, config, 1)
    assertions.assertAlmostEqual(context.dump["counting_loss"], float(expected), places=9)


@when("the grid detector is pretrained")
def step_impl(context):
    context.detector, context.metrics = pretrain_detector(
        context.train_scenes, context.val_scenes, context.config.data, context.config.detector
    )


@when("the grid detector is pretrained with an accuracy bar of {bar:g}")
def step_impl(context, bar):
    config = context.config.detector.model_copy(update={"accuracy_bar": bar})
    capture(context, pretrain_detector, context.train_scenes, context.val_scenes, context.config.data, config)


@then("the detector has no trainable parameters")
def step_impl(context):
    assertions.assertFalse(any(p.requires_grad for p in context.detector.parameters()))


@then("the detector reports a counting accuracy for every category")
def step_impl(context):
    names = [c.name for c in context.config.data.categories]
    assertions.assertEqual(sorted(context.metrics["counting_accuracy"]), sorted(names))
    assertions.assertGreaterEqual(context.metrics["blank_max_score"], 0.0)


@when("the detector is saved and loaded again")
def step_impl(context):
    path = save_detector(context.workdir / "detector.pt", context.detector, context.config.detector,
                         context.config.data.image_size, {})
    context.loaded_detector, _ = load_detector(path)


@then("the loaded detector has the same parameter hash and vocabulary")
def step_impl(context):
    assertions.assertEqual(module_hash(context.loaded_detector), module_hash(context.detector))
    assertions.assertEqual(context.loaded_detector.vocabulary, build_vocabulary(context.config.data.categories))


@when("a grid detector with {blocks:d} blocks is built for {size:d} pixel images on a {g:d} cell grid")
def step_impl(context, blocks, size, g):
    config = tiny_config().detector.model_copy(update={"channels": [8] * blocks})
    capture(context, GridDetector, ["circle"], config, size, g)


@given("the detector is made confident in every cell")
def step_impl(context):
    context.detector = copy.deepcopy(context.detector)
    with torch.no_grad():
        context.detector.bias.fill_(50.0)


@then("the image tensor receives an all-zero gradient")
def step_impl(context):
    context.loss.backward()
    assertions.assertIsNotNone(context.image.grad)
    assertions.assertEqual(float(context.image.grad.abs().sum()), 0.0)


@when("the counting loss gradient is checked by central differences on {n:d} random images")
def step_impl(context, n):
    detector = copy.deepcopy(context.detector).double()
    prompt = make_prompt("circle;red triangle", "2,1")
    config = CountingLossConfig(tau=0.5, gamma=0)
    size = context.config.data.image_size
    generator = torch.Generator().manual_seed(11)
    h = 1e-6
    context.derivatives = []
    for _ in range(n):
        image = torch.rand(1, 3, size, size, generator=generator, dtype=torch.float64).requires_grad_(True)
        direction = torch.randn(image.shape, generator=generator, dtype=torch.float64)
        direction /= direction.norm()
        counting_loss(image, prompt, detector, config, 1).backward()
        analytic = float((image.grad * direction).sum())
        with torch.no_grad():
            plus = counting_loss(image + h * direction, prompt, detector, config, 1)
            minus = counting_loss(image - h * direction, prompt, detector, config, 1)
        context.derivatives.append((analytic, float(plus - minus) / (2 * h)))


@then("the analytic and numerical directional derivatives agree within {tolerance:g} relative")
def step_impl(context, tolerance):
    for analytic, numerical in context.derivatives:
        assertions.assertLessEqual(abs(analytic - numerical), tolerance * max(abs(analytic), 1e-6))


@given("a detector pretrained at the default settings")
def step_impl(context):
    context.config, context.detector = pretrained_detector()


@given("a held-out blank image")
def step_impl(context):
    context.scene = blank_scene(context.config.data, np.random.default_rng(2024))


@given('a held-out image with "{name}" objects at boxes "{boxes}"')
def step_impl(context, name, boxes):
    objects = [(name, tuple(parse_list(box))) for box in boxes.split(";")]
    context.scene = painted_scene(context.config.data, objects, seed=2024)


@then("every category scores below the counting threshold")
def step_impl(context):
    prompt = category_prompt(context.config.data.categories)
    maps = category_logit_maps(detect(context.scene.image, prompt, context.detector), prompt)
    for name, logit_map in zip(prompt.class_names, maps, strict=True):
        assertions.assertLess(float(torch.sigmoid(logit_map).max()), context.config.train.counting.tau, name)


@then('the strongest "{name}" cell holds the center of its box')
def step_impl(context, name):
    prompt = make_prompt(name, "1")
    (logit_map,) = category_logit_maps(detect(context.scene.image, prompt, context.detector), prompt)
    g = context.detector.grid_size
    strongest = divmod(int(logit_map.argmax()), g)
    (annotation,) = context.scene.annotations
    assertions.assertEqual(strongest, center_cell(annotation.bbox, context.scene.width, g))


@then('"{name}" is counted {n:d} times at threshold {threshold:g}')
def step_impl(context, name, n, threshold):
    counts = count_detections(context.scene.image, make_prompt(name, str(n)), context.detector, threshold)
    assertions.assertEqual(counts, [n])


@given('a {g:d} by {g2:d} logit map holding {high:g} at cells "{cells}" and {low:g} elsewhere')
def step_impl(context, g, g2, high, low, cells):
    context.grid_size = g
    context.logit_map = torch.full((g * g2,), low)
    context.logit_map[parse_list(cells)] = high


@when("its local peaks are taken at threshold {threshold:g}")
def step_impl(context, threshold):
    context.peaks = local_peaks(context.logit_map, context.grid_size, threshold)


@then('{n:d} peaks are found at cells "{cells}"')
def step_impl(context, n, cells):
    found = torch.nonzero(context.peaks.flatten()).flatten().tolist()
    assertions.assertEqual(len(found), n)
    assertions.assertEqual(found, parse_list(cells))
