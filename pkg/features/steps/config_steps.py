import json
from unittest import TestCase

from behave import given, then, when
from fixtures import capture, parse_list

from countaug.utils import load_config

assertions = TestCase()

CONFIG_BODIES = {
    ".yaml": "train:\n  counting:\n    tau: TAU\n",
    ".json": json.dumps({"train": {"counting": {"tau": "TAU"}}}).replace('"TAU"', "TAU"),
    ".toml": "[train.counting]\ntau = TAU\n",
}


@when("the config is loaded without a file")
def step_impl(context):
    context.loaded_config = load_config()


@when('the config is loaded with overrides "{overrides}"')
def step_impl(context, overrides):
    context.loaded_config = capture(context, load_config, None, overrides.split(";"))


@when("the config is loaded with seed {seed:d}")
def step_impl(context, seed):
    context.loaded_config = load_config(seed=seed)


@then("the config has {T:d} timesteps and content length {M:d}")
def step_impl(context, T, M):
    assertions.assertEqual(context.loaded_config.schedule.timesteps, T)
    assertions.assertEqual(context.loaded_config.encoder.content_length, M)


@then("the counting loss defaults are tau {tau:g}, gate {gamma:g} and weight {weight:g}")
def step_impl(context, tau, gamma, weight):
    counting = context.loaded_config.train.counting
    assertions.assertEqual((counting.tau, counting.gamma, counting.lambda_weight), (tau, gamma, weight))


@then("the counting threshold is {tau:g}")
def step_impl(context, tau):
    assertions.assertIsNone(context.error)
    assertions.assertEqual(context.loaded_config.train.counting.tau, tau)


@then('the condition mode is "{mode}"')
def step_impl(context, mode):
    assertions.assertEqual(context.loaded_config.train.condition_mode, mode)


@then('the evaluation thresholds are "{thresholds}"')
def step_impl(context, thresholds):
    assertions.assertEqual(context.loaded_config.eval.thresholds, parse_list(thresholds, float))


@then("every phase uses seed {seed:d}")
def step_impl(context, seed):
    config = context.loaded_config
    for section in (config.data, config.encoder, config.detector, config.base, config.train, config.eval):
        assertions.assertEqual(section.seed, seed)


@given('a config file "{name}" setting the counting threshold to {tau:g}')
def step_impl(context, name, tau):
    context.config_path = context.workdir / name
    context.config_path.write_text(CONFIG_BODIES[context.config_path.suffix].replace("TAU", str(tau)))


@when("the config is loaded from that file")
def step_impl(context):
    context.loaded_config = capture(context, load_config, context.config_path)


@when('the config is loaded from "{name}"')
def step_impl(context, name):
    context.loaded_config = capture(context, load_config, context.workdir / name)


@then("its hash equals the hash of a second load with seed {seed:d}")
def step_impl(context, seed):
    assertions.assertEqual(context.loaded_config.config_hash(), load_config(seed=seed).config_hash())


@then("its hash differs from the hash of a load with seed {seed:d}")
def step_impl(context, seed):
    assertions.assertNotEqual(context.loaded_config.config_hash(), load_config(seed=seed).config_hash())
