import copy
import math
from unittest import TestCase

import numpy as np
import torch
from behave import given, then, when
from fixtures import capture, tiny_config, tiny_detector, tiny_encoder

from countaug.diffusion_core import build_denoiser, make_schedule
from countaug.lora_adapter import adapter_state, base_parameter_hash
from countaug.networks import CategoryConditioner
from countaug.scene_forge import generate_dataset, generate_scenes, load_dataset
from countaug.trainer import (
    ConditionEncoders,
    build_conditions,
    check_combination,
    dropout_mask,
    finetune,
    load_base,
    mse_loss,
    per_sample_mse,
    pretrain_base,
    random_boxes,
    save_base,
    total_loss,
)
from countaug.utils import module_hash

assertions = TestCase()


def shape_of(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split("x"))


@when("a noise error of {mse:g} and a counting loss of {counting:g} are combined with weight {weight:g}")
def step_impl(context, mse, counting, weight):
    context.combined = total_loss(mse, counting, weight)


@then("the combined loss is {value:g}")
def step_impl(context, value):
    assertions.assertAlmostEqual(context.combined, value, places=12)


@given("a predicted and a true noise tensor of shape {shape}")
def step_impl(context, shape):
    generator = torch.Generator().manual_seed(0)
    context.eps_true = torch.randn(shape_of(shape), generator=generator, dtype=torch.float64)
    context.eps_pred = torch.randn(shape_of(shape), generator=generator, dtype=torch.float64)


@then("the noise error equals the mean of the squared differences")
def step_impl(context):
    differences = (context.eps_pred - context.eps_true).flatten().tolist()
    expected = sum(d * d for d in differences) / len(differences)
    assertions.assertAlmostEqual(float(mse_loss(context.eps_true, context.eps_pred)), expected, places=7)


@then("the per-sample noise errors average to the noise error")
def step_impl(context):
    rows = per_sample_mse(context.eps_true, context.eps_pred)
    assertions.assertEqual(tuple(rows.shape), (context.eps_true.shape[0],))
    assertions.assertAlmostEqual(float(rows.mean()), float(mse_loss(context.eps_true, context.eps_pred)), places=9)


@when("the noise error is taken between tensors of shapes {first} and {second}")
def step_impl(context, first, second):
    capture(context, mse_loss, torch.zeros(shape_of(first)), torch.zeros(shape_of(second)))


@when("a dropout mask for {rows:d} rows is drawn with probability {p:g}")
def step_impl(context, rows, p):
    context.p = p
    context.mask = dropout_mask(rows, p, torch.Generator().manual_seed(0))


@then("the dropped rows lie within {k:d} binomial standard deviations of the expected count")
def step_impl(context, k):
    n, p = len(context.mask), context.p
    tolerance = k * math.sqrt(n * p * (1 - p))
    assertions.assertLessEqual(abs(int(context.mask.sum()) - n * p), tolerance)


@then("{n:d} rows are dropped")
def step_impl(context, n):
    assertions.assertEqual(int(context.mask.sum()), n)


@when('condition mode "{mode}" is combined with box source "{source}"')
def step_impl(context, mode, source):
    capture(context, check_combination, mode, source)


@then("the combination is {verdict}")
def step_impl(context, verdict):
    if verdict == "accepted":
        assertions.assertIsNone(context.error)
    else:
        assertions.assertEqual(type(context.error).__name__, "ConfigError")


def _encoders(context, with_detector: bool) -> ConditionEncoders:
    context.config = tiny_config()
    torch.manual_seed(0)
    categories = context.config.data.categories
    return ConditionEncoders(
        encoder=tiny_encoder(context.config),
        categories=categories,
        detector=tiny_detector(context.config) if with_detector else None,
        conditioner=CategoryConditioner(len(categories), context.config.encoder.emb).requires_grad_(False),
        object_size=(context.config.data.min_object_size, context.config.data.max_object_size),
    )


@given("the small condition encoders")
def step_impl(context):
    context.encoders = _encoders(context, with_detector=True)


@given("the small condition encoders without a detector")
def step_impl(context):
    context.encoders = _encoders(context, with_detector=False)


@given("{n:d} small training scenes")
def step_impl(context, n):
    context.scenes = generate_scenes(context.config.data, n, 42, "train")


@when('conditions are built in "{mode}" mode from "{source}" boxes')
def step_impl(context, mode, source):
    context.conditions = build_conditions(context.scenes, mode, source, context.encoders, np.random.default_rng(0))


@then("the conditions have shape {shape}")
def step_impl(context, shape):
    assertions.assertEqual(tuple(context.conditions.tokens.shape), shape_of(shape))


@then("the valid slots of each scene number {valid}")
def step_impl(context, valid):
    M = context.encoders.content_length
    for i, (scene, validity) in enumerate(zip(context.scenes, context.conditions.validity, strict=True)):
        objects = len(scene.annotations)
        expected = {"none": 0, "the objects": min(objects, M), "twice the objects": 2 * min(objects, M // 2)}[valid]
        assertions.assertEqual(int(validity.sum()), expected)
        slots = context.conditions.tokens[i, 1:]
        assertions.assertEqual(float(slots[~validity].abs().sum()), 0.0)


@when("{n:d} random boxes of size {low:d} to {high:d} are drawn in a {size:d} pixel image")
def step_impl(context, n, low, high, size):
    context.size = size
    context.random_boxes = random_boxes(n, size, (low, high), np.random.default_rng(0))


@then("every random box lies inside the image with a side between {low:d} and {high:d}")
def step_impl(context, low, high):
    for box in context.random_boxes:
        x_min, y_min, x_max, y_max = box.bbox
        assertions.assertTrue(0 <= x_min and x_max <= context.size and 0 <= y_min and y_max <= context.size)
        assertions.assertTrue(low <= x_max - x_min <= high)
        assertions.assertEqual(x_max - x_min, y_max - y_min)


@given("the small scene dataset on disk")
def step_impl(context):
    context.config = tiny_config()
    generate_dataset(context.config.data, context.workdir / "data")
    context.dataset = load_dataset(context.workdir / "data", "train")


@when("the base denoiser is pretrained")
def step_impl(context):
    context.base = pretrain_base(context.dataset, context.config)


@then("the base log records a validation error")
def step_impl(context):
    assertions.assertIn("val_mse", context.base.log.columns)
    assertions.assertTrue(context.base.log["val_mse"].notna().any())


@then("the base metrics name the best step")
def step_impl(context):
    metrics = context.base.metrics
    assertions.assertLessEqual(1, metrics["best_step"])
    assertions.assertLessEqual(metrics["best_step"], metrics["steps"])


@when("the base denoiser is saved and loaded again")
def step_impl(context):
    path = save_base(context.workdir / "base.pt", context.base, context.config, {})
    context.loaded_base, _, context.loaded_conditioner, _ = load_base(path)


@then("the loaded base denoiser is frozen with the same parameter hash")
def step_impl(context):
    assertions.assertEqual(module_hash(context.loaded_base), module_hash(context.base.model))
    assertions.assertFalse(any(p.requires_grad for p in context.loaded_base.parameters()))
    assertions.assertEqual(module_hash(context.loaded_conditioner), module_hash(context.base.conditioner))


def _finetune(context, override: str):
    config = tiny_config([override])
    torch.manual_seed(0)
    model = build_denoiser(config.denoiser)
    model.requires_grad_(False)
    context.frozen_base_hash = base_parameter_hash(model)
    schedule = make_schedule(config.schedule.timesteps)
    return capture(context, finetune, model, schedule, context.scenes, copy.copy(context.encoders), config)


@when('adapters are fine-tuned with "{override}"')
def step_impl(context, override):
    context.results = [_finetune(context, override)]


@when('adapters are fine-tuned again with "{override}"')
def step_impl(context, override):
    context.results.append(_finetune(context, override))


@then("both fine-tuning logs have the same noise errors")
def step_impl(context):
    first, second = (r.log for r in context.results)
    np.testing.assert_array_equal(first["mse"].to_numpy(), second["mse"].to_numpy())
    np.testing.assert_array_equal(first["total"].to_numpy(), second["total"].to_numpy())


@then("the second log has no counting loss")
def step_impl(context):
    assertions.assertTrue((context.results[1].log["counting"] == 0.0).all())


@then("every logged counting loss is positive")
def step_impl(context):
    assertions.assertIsNone(context.error)
    assertions.assertTrue((context.results[0].log["counting"] > 0.0).all())


@then("every logged total equals the noise error plus half the counting loss")
def step_impl(context):
    log = context.results[0].log
    np.testing.assert_allclose(log["total"], log["mse"] + 0.5 * log["counting"], rtol=0, atol=1e-7)


@then("every clipped gradient norm is at most {limit:g}")
def step_impl(context, limit):
    assertions.assertTrue((context.results[0].log["grad_norm_clipped"] <= limit + 1e-6).all())


@then("the fine-tuned base weights match the frozen base")
def step_impl(context):
    result = context.results[0]
    assertions.assertEqual(result.base_parameter_hash, context.frozen_base_hash)
    assertions.assertEqual(base_parameter_hash(result.model), context.frozen_base_hash)


@then("both runs end with bit-identical adapter weights")
def step_impl(context):
    first, second = (adapter_state(r.model) for r in context.results)
    assertions.assertEqual(sorted(first), sorted(second))
    for name, tensor in first.items():
        assertions.assertTrue(torch.equal(tensor, second[name]), name)


@given("condition encoders around that detector")
def step_impl(context):
    categories = context.config.data.categories
    context.encoders = ConditionEncoders(
        encoder=tiny_encoder(context.config),
        categories=categories,
        detector=context.detector,
        conditioner=CategoryConditioner(len(categories), context.config.encoder.emb).requires_grad_(False),
        detector_threshold=context.config.detector.threshold,
        object_size=(context.config.data.min_object_size, context.config.data.max_object_size),
    )


@given("{n:d} held-out scenes")
def step_impl(context, n):
    context.scenes = generate_scenes(context.config.data, n, 7, "eval")


@then("the valid slots of each scene are within 1 of its object count")
def step_impl(context):
    M = context.encoders.content_length
    for scene, validity in zip(context.scenes, context.conditions.validity, strict=True):
        expected = min(len(scene.annotations), M)
        assertions.assertLessEqual(abs(int(validity.sum()) - expected), 1, f"scene {scene.scene_id}")
