import io
import shlex
from contextlib import redirect_stderr
from unittest import TestCase

import pandas as pd
import yaml
from behave import given, then, when
from fixtures import TINY

from countaug.cli import main
from countaug.utils import read_json

assertions = TestCase()


def _run(context, argv: list[str]) -> None:
    stderr = io.StringIO()
    with redirect_stderr(stderr):
        context.exit_code = main(argv)
    context.stderr = stderr.getvalue()
    context.exit_codes.append(context.exit_code)


@given("a small experiment config file")
def step_impl(context):
    context.config_file = context.workdir / "small.yaml"
    context.config_file.write_text(yaml.safe_dump(TINY))
    context.artifacts = context.workdir / "artifacts"
    context.data_root = context.workdir / "data"
    context.exit_codes = []


@when('countaug is run with the raw arguments "{raw}"')
def step_impl(context, raw):
    _run(context, shlex.split(raw))


def _command(context, command: str, extra: str = "") -> None:
    common = ["--config", str(context.config_file), "--artifacts", str(context.artifacts), "--data",
              str(context.data_root), "--log-level", "WARNING"]
    _run(context, [command, *common, *shlex.split(extra.replace("{artifacts}", str(context.artifacts)))])


@when('the "{command}" command is run')
def step_impl(context, command):
    _command(context, command)


@when('the "{command}" command is run with "{extra}"')
def step_impl(context, command, extra):
    _command(context, command, extra)


@then("the exit code is {code:d}")
def step_impl(context, code):
    assertions.assertEqual(context.exit_code, code, context.stderr)


@then('the error line names "{error}"')
def step_impl(context, error):
    lines = context.stderr.strip().splitlines()
    assertions.assertTrue(lines, "Nothing was written to stderr")
    assertions.assertTrue(lines[-1].startswith(f"error:{error}:"), lines[-1])


@then('the error line mentions "{text}"')
def step_impl(context, text):
    lines = context.stderr.strip().splitlines()
    assertions.assertTrue(lines, "Nothing was written to stderr")
    assertions.assertIn(text, lines[-1])


@then("every command so far exited with 0")
def step_impl(context):
    assertions.assertEqual(context.exit_codes, [0] * len(context.exit_codes), context.stderr)


@then('the "{command}" output "{name}" exists')
def step_impl(context, command, name):
    assertions.assertTrue((context.artifacts / command / name).exists(), f"{command}/{name} is missing")


@then('the "{command}" run manifest has status "{status}"')
def step_impl(context, command, status):
    assertions.assertEqual(read_json(context.artifacts / command / "manifest.json")["status"], status)


@then('the dataset has "{first}" and "{second}" splits')
def step_impl(context, first, second):
    for split in (first, second):
        manifest = read_json(context.data_root / split / "manifest.json")
        assertions.assertEqual(manifest["split"], split)
        assertions.assertTrue((context.data_root / split / "annotations.json").exists())


@then('the metrics in "{first}" and "{second}" are identical')
def step_impl(context, first, second):
    assertions.assertEqual(context.exit_code, 0, context.stderr)
    pd.testing.assert_frame_equal(pd.read_csv(context.artifacts / first / "metrics.csv"),
                                  pd.read_csv(context.artifacts / second / "metrics.csv"))


@then("the sweep report has {n:d} finished rows")
def step_impl(context, n):
    assertions.assertEqual(context.exit_code, 0, context.stderr)
    report = pd.read_csv(context.artifacts / "sweep" / "sweep.csv")
    assertions.assertEqual(len(report), n)
    assertions.assertTrue((report["status"] == "finished").all(), report["error"].tolist())


@then('every cell of the "{name}" sweep logged a positive counting loss')
def step_impl(context, name):
    assertions.assertEqual(context.exit_code, 0, context.stderr)
    report = pd.read_csv(context.artifacts / name / "sweep.csv")
    assertions.assertTrue((report["status"] == "finished").all(), report["error"].tolist())
    for row in report.itertuples():
        log = pd.read_csv(context.artifacts / name / "cells" / f"{row.param}_{row.value}" / "loss.csv")
        assertions.assertTrue((log["counting"] > 0).any(), f"cell {row.param}={row.value} never counted")
