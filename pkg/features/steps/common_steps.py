from unittest import TestCase

from behave import then

assertions = TestCase()


@then('a "{error}" error is raised')
def step_impl(context, error):
    assertions.assertIsNotNone(context.error, f"Expected a {error}, but nothing was raised")
    assertions.assertEqual(
        type(context.error).__name__,
        error,
        f"Expected a {error}, but got {type(context.error).__name__}: {context.error}",
    )


@then('a "{error}" error mentioning "{text}" is raised')
def step_impl(context, error, text):
    assertions.assertIsNotNone(context.error, f"Expected a {error}, but nothing was raised")
    assertions.assertEqual(type(context.error).__name__, error, f"Unexpected error: {context.error}")
    assertions.assertIn(text, str(context.error))


@then("no error is raised")
def step_impl(context):
    assertions.assertIsNone(context.error, f"Expected no error, but got {context.error!r}")
