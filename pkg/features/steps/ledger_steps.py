from unittest import TestCase

from behave import given, then, when
from fixtures import capture

from countaug.events.run import RunLedger
from countaug.utils import ArtifactResolver, read_json, write_json

assertions = TestCase()


@given("a run ledger")
def step_impl(context):
    context.ledger = RunLedger()


@when('a "{kind}" run is started with config hash "{digest}"')
def step_impl(context, kind, digest):
    context.run_id = context.ledger.start(kind, {"seed": 42}, digest, "code", "data", ["countaug", kind])


def _log_steps(context, steps):
    for step in steps:
        capture(context, context.ledger.log_step, context.run_id, {"step": step, "mse": 0.1 * step})
        if context.error is not None:
            return


@when("steps {a:d}, {b:d} and {c:d} are logged on the run")
def step_impl(context, a, b, c):
    _log_steps(context, [a, b, c])


@when("steps {a:d} and {b:d} are logged on the run")
def step_impl(context, a, b):
    _log_steps(context, [a, b])


@when('a checkpoint "{name}" with config hash "{digest}" is recorded')
def step_impl(context, name, digest):
    capture(context, context.ledger.record_checkpoint, context.run_id, name, f"{name}.pt", digest, "params")


@when('the run finishes with output "{name}" at "{path}"')
def step_impl(context, name, path):
    capture(context, context.ledger.finish, context.run_id, {name: path})


@then('the run manifest has status "{status}"')
def step_impl(context, status):
    assertions.assertIsNone(context.error)
    manifest = context.ledger.manifest(context.run_id)
    assertions.assertEqual(manifest["status"], status)
    assertions.assertIsNotNone(manifest["finished_at"])
    assertions.assertEqual(manifest["command"], ["countaug", manifest["kind"]])


@then("the run manifest holds {steps:d} logged steps and {checkpoints:d} checkpoint")
def step_impl(context, steps, checkpoints):
    manifest = context.ledger.manifest(context.run_id)
    assertions.assertEqual(len(manifest["loss_log"]), steps)
    assertions.assertEqual(len(manifest["checkpoints"]), checkpoints)


@then('the run events are "{events}"')
def step_impl(context, events):
    names = [e["event"] for e in context.ledger.get_events(context.run_id)]
    assertions.assertEqual(names, events.split(","))


@when('a tracked "{kind}" run fails with "{message}"')
def step_impl(context, kind, message):
    context.manifest_path = context.workdir / kind / "manifest.json"

    def failing_run():
        with context.ledger.track(kind, {}, "abc", context.manifest_path):
            raise RuntimeError(message)

    capture(context, failing_run)


@then('the written manifest has status "{status}" and error "{error}"')
def step_impl(context, status, error):
    manifest = read_json(context.manifest_path)
    assertions.assertEqual(manifest["status"], status)
    assertions.assertEqual(manifest["error"], error)


def _write_run(context, kind: str, status: str, finished_at: str) -> None:
    run_dir = context.workdir / "artifacts" / f"{kind}-{finished_at[:10]}"
    (run_dir / "model.pt").parent.mkdir(parents=True, exist_ok=True)
    (run_dir / "model.pt").write_bytes(b"weights")
    write_json(run_dir / "manifest.json", {"kind": kind, "status": status, "finished_at": finished_at,
                                           "outputs": {kind: "model.pt"}})


@given('finished "{kind}" runs written at "{first}" and "{second}"')
def step_impl(context, kind, first, second):
    for finished_at in (first, second):
        _write_run(context, kind, "finished", finished_at)


@given('a failed "{kind}" run written at "{finished_at}"')
def step_impl(context, kind, finished_at):
    _write_run(context, kind, "failed", finished_at)


@when('the "{kind}" artifact is resolved')
def step_impl(context, kind):
    context.resolved = capture(context, ArtifactResolver(context.workdir / "artifacts").output, kind, kind)


@then('the resolved artifact is the one from "{finished_at}"')
def step_impl(context, finished_at):
    assertions.assertEqual(context.resolved.parent.name, f"encoder-{finished_at[:10]}")
