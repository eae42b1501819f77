import math
from unittest import TestCase

import numpy as np
import pandas as pd
import torch
from behave import given, then, when
from fixtures import capture, flat_image, parse_list, random_image

from countaug.eval_metrics import (
    MetricReport,
    channel_std,
    diversity_score,
    evaluate,
    frechet_distance,
    iqs_from_counts,
    node_seed,
)
from countaug.scene_forge import generate_scenes
from countaug.utils import read_json, to_tensor

assertions = TestCase()


def _counts(context, counts: str, objects: int):
    if not hasattr(context, "category_counts"):
        context.category_counts, context.truth = [], []
    context.category_counts.append(parse_list(counts))
    context.truth.append(objects)


@given('detection counts "{counts}" for one category with {objects:d} annotated objects')
def step_impl(context, counts, objects):
    _counts(context, counts, objects)


@given("the detection counts per category")
def step_impl(context):
    if not context.table:
        raise ValueError("No table provided for the detection counts")
    for row in context.table:
        _counts(context, row["counts"], int(row["annotated"]))


@when('the instance quantity score is computed at thresholds "{thresholds}"')
def step_impl(context, thresholds):
    detected = [np.asarray(context.category_counts)]
    context.scores = capture(context, iqs_from_counts, detected, [context.truth], parse_list(thresholds, float))


@then("the instance quantity score is {value:g}")
def step_impl(context, value):
    assertions.assertIsNone(context.error)
    assertions.assertAlmostEqual(context.scores[0], value, places=9)


@then("the score at threshold 0.5 is {value:g}")
def step_impl(context, value):
    assertions.assertAlmostEqual(context.scores[1], value, places=9)


@then("the score at threshold 0.5 is not defined")
def step_impl(context):
    assertions.assertTrue(math.isnan(context.scores[1]))


@given('flat images with values "{values}"')
def step_impl(context, values):
    context.images = [flat_image(8, v) for v in parse_list(values, float)]


@given("{n:d} random images")
def step_impl(context, n):
    rng = np.random.default_rng(n)
    context.images = [random_image(16, rng) for _ in range(n)]


@given("{n:d} more random images")
def step_impl(context, n):
    rng = np.random.default_rng(100 + n)
    context.more_images = [random_image(16, rng) for _ in range(n)]


@when("the channel spread is computed")
def step_impl(context):
    context.spread = capture(context, channel_std, context.images)


@then("the channel spread is {value:g}")
def step_impl(context, value):
    assertions.assertAlmostEqual(context.spread, value, places=6)


@then("the channel spread is the same in reverse order")
def step_impl(context):
    assertions.assertAlmostEqual(channel_std(context.images), channel_std(context.images[::-1]), places=12)


@given("two Gaussian feature clouds of {n:d} points in {d:d} dimensions with means {a:g} and {b:g}")
def step_impl(context, n, d, a, b):
    rng = np.random.default_rng(0)
    context.features_a = rng.normal(size=(n, d))
    context.features_b = rng.normal(size=(n, d))
    context.features_a[:, 0] += a
    context.features_b[:, 0] += b


@then("the Frechet distance from the first cloud to itself is 0 within {tolerance:g}")
def step_impl(context, tolerance):
    assertions.assertLessEqual(abs(frechet_distance(context.features_a, context.features_a)), tolerance)


@then("the Frechet distance is symmetric and non-negative")
def step_impl(context):
    forward = frechet_distance(context.features_a, context.features_b)
    backward = frechet_distance(context.features_b, context.features_a)
    assertions.assertAlmostEqual(forward, backward, places=8)
    assertions.assertGreaterEqual(forward, 0.0)


@then("the Frechet distance between the clouds is {value:g} within {tolerance:g}")
def step_impl(context, value, tolerance):
    assertions.assertLessEqual(abs(frechet_distance(context.features_a, context.features_b) - value), tolerance)


@when("the Frechet distance is computed without shrinkage")
def step_impl(context):
    context.distance = capture(context, frechet_distance, context.features_a, context.features_b)


@when("the Frechet distance is computed with shrinkage {shrinkage:g}")
def step_impl(context, shrinkage):
    context.distance = capture(context, frechet_distance, context.features_a, context.features_b, shrinkage)


@then("the Frechet distance is finite and non-negative")
def step_impl(context):
    assertions.assertIsNone(context.error)
    assertions.assertTrue(math.isfinite(context.distance))
    assertions.assertGreaterEqual(context.distance, 0.0)


@when("the diversity of each image against itself is scored")
def step_impl(context):
    context.diversity = diversity_score([(image, image) for image in context.images], context.encoder)


@when("the diversity of the image pairs is scored")
def step_impl(context):
    context.pairs = list(zip(context.images, context.more_images, strict=True))
    context.diversity = diversity_score(context.pairs, context.encoder)


@when("the diversity of no pairs is scored")
def step_impl(context):
    capture(context, diversity_score, [], context.encoder)


@then("the diversity score is {value:g} within {tolerance:g}")
def step_impl(context, value, tolerance):
    assertions.assertLessEqual(abs(context.diversity - value), tolerance)


@then("the diversity score matches the brute-force per-block distance within {tolerance:g}")
def step_impl(context, tolerance):
    per_pair = []
    with torch.no_grad():
        for original, augmented in context.pairs:
            blocks_a = context.encoder(to_tensor([original])).block_features
            blocks_b = context.encoder(to_tensor([augmented])).block_features
            per_block = []
            for fa, fb in zip(blocks_a, blocks_b, strict=True):
                fa = fa[0].to(torch.float64).numpy()
                fb = fb[0].to(torch.float64).numpy()
                na = fa / (np.sqrt((fa**2).sum(axis=0, keepdims=True)) + 1e-10)
                nb = fb / (np.sqrt((fb**2).sum(axis=0, keepdims=True)) + 1e-10)
                per_block.append(float(((na - nb) ** 2).sum(axis=0).mean()))
            per_pair.append(sum(per_block) / len(per_block))
    assertions.assertLessEqual(abs(context.diversity - sum(per_pair) / len(per_pair)), tolerance)


@then("the diversity score is positive")
def step_impl(context):
    assertions.assertGreater(context.diversity, 0.0)


@then('the node seed of path "{path}" under seed {seed:d} is stable')
def step_impl(context, path, seed):
    key = tuple(parse_list(path))
    assertions.assertEqual(node_seed(seed, key), node_seed(seed, key))


@then('the node seeds of paths "{a}", "{b}", "{c}" and "{d}" under seed {seed:d} are distinct')
def step_impl(context, a, b, c, d, seed):
    seeds = {node_seed(seed, tuple(parse_list(p))) for p in (a, b, c, d)}
    assertions.assertEqual(len(seeds), 4)


@when("a metric report with an instance quantity score of {value:g} is made")
def step_impl(context, value):
    context.report = capture(context, MetricReport, fid_proxy=1.5, ds=0.2, iqs=value, iqs50=value,
                             channel_std_first=0.05, channel_std_recurrent=None, n_images=4,
                             thresholds=[0.3, 0.5, 0.7])


@when("the report is written")
def step_impl(context):
    context.report_files = context.report.write(context.workdir / "eval")


@then('the report files record the scoring version "{version}"')
def step_impl(context, version):
    json_path, csv_path = context.report_files
    assertions.assertEqual(read_json(json_path)["iqs_version"], version)
    row = pd.read_csv(csv_path).iloc[0]
    assertions.assertEqual(row["iqs_version"], version)
    assertions.assertEqual(row["thresholds"], "0.3 0.5 0.7")


@given("{n:d} small evaluation scenes")
def step_impl(context, n):
    context.eval_scenes = generate_scenes(context.config.data, n, 42, "eval")


@when("the evaluation scenes are evaluated against themselves")
def step_impl(context):
    images = [s.image for s in context.eval_scenes]
    context.report = evaluate(images, context.eval_scenes, context.encoder, context.detector,
                              context.config.data.categories, context.config.eval)


@then("the report has a diversity score of {value:g} within {tolerance:g}")
def step_impl(context, value, tolerance):
    assertions.assertLessEqual(abs(context.report.ds - value), tolerance)


@then("the report scores lie within their bounds")
def step_impl(context):
    report = context.report
    assertions.assertTrue(0.0 <= report.iqs <= 100.0)
    assertions.assertTrue(0.0 <= report.iqs50 <= 100.0)
    assertions.assertGreaterEqual(report.fid_proxy, 0.0)
    assertions.assertEqual(report.n_images, len(context.eval_scenes))
    assertions.assertIsNotNone(report.channel_std_first)


@when('the first cloud is compared with noisy copies of itself at noise levels "{levels}"')
def step_impl(context, levels):
    rng = np.random.default_rng(1)
    context.distances = [
        frechet_distance(context.features_a, context.features_a + rng.normal(scale=s, size=context.features_a.shape))
        for s in parse_list(levels, float)
    ]


@then("the Frechet distances increase with the noise level")
def step_impl(context):
    assertions.assertTrue(all(a < b for a, b in zip(context.distances, context.distances[1:])))
