from unittest import TestCase

import numpy as np
import torch
from behave import given, then, when
from fixtures import capture, parse_list, scene_with, tiny_config, tiny_encoder

from countaug.fusion_condition import (
    crop_instances,
    crop_region,
    encode_condition,
    load_encoder,
    pack_crops,
    pretrain_encoder,
    save_encoder,
)
from countaug.scene_forge import generate_scenes
from countaug.utils import module_hash, to_tensor

assertions = TestCase()


def box_of(text: str) -> tuple[int, int, int, int]:
    return tuple(parse_list(text))


@when("the box {box} is padded by {pad:d} in a {size:d} pixel image")
def step_impl(context, box, pad, size):
    context.region = crop_region(box_of(box), pad, size, size)


@then("the crop region is {region}")
def step_impl(context, region):
    assertions.assertEqual(context.region, box_of(region))


@given('a {size:d} pixel scene with boxes "{boxes}"')
def step_impl(context, size, boxes):
    parsed = [] if boxes == "none" else [box_of(b) for b in boxes.split(";")]
    context.scene = scene_with([(0, b) for b in parsed], size=size)


@when("its instances are cropped with padding {pad:d} to {size:d} pixels")
def step_impl(context, pad, size):
    context.crops = capture(context, crop_instances, context.scene.image, context.scene.boxes, pad, size)


@then("there are {n:d} crops of {h:d} by {w:d} pixels")
def step_impl(context, n, h, w):
    assertions.assertEqual(len(context.crops), n)
    for crop in context.crops.crops:
        assertions.assertEqual(crop.shape, (h, w, 3))


@then("every crop is valid")
def step_impl(context):
    assertions.assertEqual(context.crops.n_valid, len(context.crops))


@when("the crops are packed into {M:d} slots")
def step_impl(context, M):
    context.packed = capture(context, pack_crops, context.crops, M, np.random.default_rng(0), 16)


@then('the packed validity mask is "{mask}"')
def step_impl(context, mask):
    assertions.assertEqual(context.packed.validity_mask, [bool(v) for v in parse_list(mask)])


@then("the padded slots hold zero images")
def step_impl(context):
    for crop, valid in zip(context.packed.crops, context.packed.validity_mask, strict=True):
        if not valid:
            assertions.assertFalse(crop.any())
            assertions.assertEqual(crop.shape, context.packed.crops[0].shape)


@then("the packed source boxes are {n:d} distinct input boxes")
def step_impl(context, n):
    boxes = context.packed.source_boxes
    assertions.assertEqual(len(set(boxes)), n)
    assertions.assertTrue(set(boxes) <= set(context.scene.boxes))


@given("a small frozen patch encoder")
def step_impl(context):
    context.config = tiny_config()
    context.encoder = tiny_encoder(context.config)


@when("the condition is encoded")
def step_impl(context):
    context.condition = encode_condition([context.scene.image], context.packed, context.encoder)


@when("the condition is encoded with patch tokens")
def step_impl(context):
    context.condition = encode_condition([context.scene.image], context.packed, context.encoder,
                                         include_patch_tokens=True)


@when("the condition is encoded for two copies of the image")
def step_impl(context):
    capture(context, encode_condition, [context.scene.image] * 2, context.packed, context.encoder)


@then("the condition has shape {shape}")
def step_impl(context, shape):
    assertions.assertEqual(tuple(context.condition.tokens.shape), tuple(int(v) for v in shape.split("x")))


@then("condition slots {a:d} and {b:d} are zero")
def step_impl(context, a, b):
    for slot in (a, b):
        assertions.assertEqual(float(context.condition.tokens[0, slot].abs().sum()), 0.0)
    assertions.assertFalse(bool(context.condition.validity[0, a - 1]))


@then("condition slot {slot:d} equals the encoder summary of the first crop")
def step_impl(context, slot):
    with torch.no_grad():
        expected = context.encoder.summary(to_tensor([context.packed.crops[0]]))[0]
    torch.testing.assert_close(context.condition.tokens[0, slot], expected, rtol=1e-5, atol=1e-6)


@given("the small scene dataset")
def step_impl(context):
    context.config = tiny_config()
    context.train_scenes = generate_scenes(context.config.data, 12, 42, "train")
    context.val_scenes = generate_scenes(context.config.data, 4, 42, "eval")


@when("the patch encoder is pretrained")
def step_impl(context):
    context.encoder, context.metrics = pretrain_encoder(
        context.train_scenes, context.val_scenes, context.config.data.categories, context.config.encoder
    )


@when("the patch encoder is pretrained with an accuracy bar of {bar:g}")
def step_impl(context, bar):
    config = context.config.encoder.model_copy(update={"accuracy_bar": bar})
    capture(context, pretrain_encoder, context.train_scenes, context.val_scenes, context.config.data.categories,
            config)


@then("the encoder has no trainable parameters")
def step_impl(context):
    assertions.assertFalse(any(p.requires_grad for p in context.encoder.parameters()))
    assertions.assertFalse(context.encoder.training)


@then("the encoder reports a per-category accuracy for every category")
def step_impl(context):
    names = [c.name for c in context.config.data.categories]
    assertions.assertEqual(sorted(context.metrics["per_category_accuracy"]), sorted(names))


@when("the encoder is saved and loaded again")
def step_impl(context):
    path = save_encoder(context.workdir / "encoder.pt", context.encoder, len(context.config.data.categories), {})
    context.loaded_encoder, _ = load_encoder(path)


@then("the loaded encoder has the same parameter hash")
def step_impl(context):
    assertions.assertEqual(module_hash(context.loaded_encoder), module_hash(context.encoder))


@given("{n:d} random small scenes")
def step_impl(context, n):
    context.scenes = generate_scenes(context.config.data, n, 5, "train")


@when("the scenes are encoded into conditions with {M:d} crop slots")
def step_impl(context, M):
    rng = np.random.default_rng(0)
    crop_size, pad = context.config.encoder.crop_size, context.config.encoder.pad
    context.packed = [pack_crops(crop_instances(s.image, s.boxes, pad, crop_size), M, rng, crop_size)
                      for s in context.scenes]
    context.conditions = [
        encode_condition([s.image for s in context.scenes[i : i + 50]], context.packed[i : i + 50], context.encoder)
        for i in range(0, len(context.scenes), 50)
    ]


@then("every condition has shape {slots:d}x{emb:d} with zero rows exactly at the invalid slots")
def step_impl(context, slots, emb):
    for batch in context.conditions:
        assertions.assertEqual(tuple(batch.tokens.shape[1:]), (slots, emb))
        nonzero = batch.tokens[:, 1:].abs().sum(dim=-1) > 0
        assertions.assertTrue(torch.equal(nonzero, batch.validity))
    valid = [p.n_valid for p in context.packed]
    assertions.assertEqual(valid, [min(len(s.annotations), slots - 1) for s in context.scenes])
