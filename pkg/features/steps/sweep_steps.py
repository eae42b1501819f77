from unittest import TestCase

from behave import given, then, when
from fixtures import capture, tiny_config

from countaug.sweep import cell_config, resolve_grids

assertions = TestCase()


@given("the small config with a sweep budget of {steps:d} steps")
def step_impl(context, steps):
    context.config = tiny_config([f"sweep.max_steps={steps}"])


@given("the small config with a sweep budget of {steps:d} steps against a reference length of {reference:d}")
def step_impl(context, steps, reference):
    context.config = tiny_config([f"sweep.max_steps={steps}", f"sweep.gamma_reference_steps={reference}"])


@when('every "{param}" grid cell is configured')
def step_impl(context, param):
    (grid,) = resolve_grids([param])
    context.cells = {value: cell_config(context.config, grid, value) for value in grid.values}


@when("the {param} grid cell {value:g} is configured")
def step_impl(context, param, value):
    (grid,) = resolve_grids([param])
    context.cell = capture(context, cell_config, context.config, grid, value)


@when("the {param} grid cell {value:g} is configured with gate {gamma:g}")
def step_impl(context, param, value, gamma):
    (grid,) = resolve_grids([param])
    config = context.config.model_copy(deep=True)
    config.train.counting.gamma = gamma
    context.cell = capture(context, cell_config, config, grid, value)


@then("every cell trains for {steps:d} steps")
def step_impl(context, steps):
    for value, cell in context.cells.items():
        assertions.assertEqual(cell.train.max_steps, steps, f"cell {value}")


@then("every cell opens the counting gate before its last step")
def step_impl(context):
    for value, cell in context.cells.items():
        assertions.assertLess(cell.train.counting.gamma, cell.train.max_steps, f"cell {value}")


@then("the gamma {value:d} cell gates at step {gamma:g}")
def step_impl(context, value, gamma):
    assertions.assertAlmostEqual(context.cells[value].train.counting.gamma, gamma)
