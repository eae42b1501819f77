import copy
from unittest import TestCase

import torch
from behave import given, then, when
from fixtures import capture
from torch import nn

from countaug.config import LoraConfig
from countaug.diffusion_core import build_denoiser
from countaug.lora_adapter import (
    LoraLinear,
    adapter_parameters,
    base_parameter_hash,
    load_adapter,
    lora_layers,
    merge,
    merge_model,
    save_adapter,
    wrap_model,
)

assertions = TestCase()


def _predict(model, context):
    generator = torch.Generator().manual_seed(9)
    x = torch.randn(2, 3, 16, 16, generator=generator)
    condition = torch.randn(2, 4, context.config.denoiser.condition_dim, generator=generator)
    with torch.no_grad():
        return model(x, torch.tensor([10, 20]), condition)


@given("a {inputs:d} by {outputs:d} linear layer")
def step_impl(context, inputs, outputs):
    torch.manual_seed(0)
    context.layer = nn.Linear(inputs, outputs)
    context.x = torch.randn(5, inputs)


@when("it is wrapped with a rank {rank:d} adapter")
def step_impl(context, rank):
    context.wrapped = capture(context, LoraLinear, context.layer, rank, float(rank))


@then("the adapter adds {n:d} trainable parameters")
def step_impl(context, n):
    trainable = sum(p.numel() for p in context.wrapped.parameters() if p.requires_grad)
    assertions.assertEqual(trainable, n)


@then("the base layer has no trainable parameters")
def step_impl(context):
    assertions.assertFalse(any(p.requires_grad for p in context.wrapped.base.parameters()))


@then("the wrapped layer gives the same output as the base layer")
def step_impl(context):
    assertions.assertTrue(torch.equal(context.wrapped(context.x), context.layer(context.x)))


@when("the adapter matrices are randomized")
def step_impl(context):
    with torch.no_grad():
        context.wrapped.up.normal_()
        context.wrapped.down.normal_()


@when("the adapter is merged")
def step_impl(context):
    context.merged = merge(context.wrapped)


@then("the merged layer matches the wrapped layer within {tolerance:g}")
def step_impl(context, tolerance):
    with torch.no_grad():
        x = context.x.to(torch.float64)
        wrapped = context.wrapped.to(torch.float64)(x)
        merged = context.merged.to(torch.float64)(x)
    assertions.assertLessEqual(float((wrapped - merged).abs().max()), tolerance)


@when("the denoiser attention layers are wrapped with rank {rank:d} adapters")
def step_impl(context, rank):
    context.base_hash = base_parameter_hash(context.denoiser)
    context.lora = LoraConfig(rank=rank, alpha=float(rank), targets=["attention"])
    context.wrapped_names = wrap_model(context.denoiser, ["attention"], rank, float(rank))


@when('the denoiser "{family}" layers are wrapped with rank {rank:d} adapters')
def step_impl(context, family, rank):
    capture(context, wrap_model, context.denoiser, [family], rank, float(rank))


@then("some layers were wrapped")
def step_impl(context):
    assertions.assertGreater(len(context.wrapped_names), 0)
    assertions.assertTrue(all(n.endswith(("to_q", "to_k", "to_v", "to_out.0")) for n in context.wrapped_names))


@then("only adapter parameters are trainable")
def step_impl(context):
    trainable = {id(p) for p in context.denoiser.parameters() if p.requires_grad}
    assertions.assertEqual(trainable, {id(p) for p in adapter_parameters(context.denoiser)})


def _optimize_adapters(context, steps: int) -> None:
    optimizer = torch.optim.AdamW(adapter_parameters(context.denoiser), lr=1e-2)
    generator = torch.Generator().manual_seed(4)
    for _ in range(steps):
        x = torch.randn(2, 3, 16, 16, generator=generator)
        condition = torch.randn(2, 4, context.config.denoiser.condition_dim, generator=generator)
        loss = context.denoiser(x, torch.tensor([5, 40]), condition).pow(2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()


@when("the adapters take one optimizer step on a random loss")
def step_impl(context):
    _optimize_adapters(context, 1)


@when("the adapters take {steps:d} optimizer steps on a random loss")
def step_impl(context, steps):
    _optimize_adapters(context, steps)


@then("the base parameter hash is unchanged")
def step_impl(context):
    assertions.assertEqual(base_parameter_hash(context.denoiser), context.base_hash)


@when("the adapter is saved")
def step_impl(context):
    context.adapter_path = save_adapter(context.workdir / "adapter.pt", context.denoiser, context.lora, {})


@when("the adapter is loaded onto a fresh copy of the base")
def step_impl(context):
    context.fresh = copy.deepcopy(context.pristine)
    load_adapter(context.adapter_path, context.fresh)


@when("the adapter is loaded onto a differently initialized base")
def step_impl(context):
    torch.manual_seed(123)
    other = build_denoiser(context.config.denoiser)
    capture(context, load_adapter, context.adapter_path, other)


@then("the reloaded denoiser predicts the same noise as the adapted one")
def step_impl(context):
    torch.testing.assert_close(_predict(context.fresh.eval(), context), _predict(context.denoiser.eval(), context))


@when("the adapters of a copy of the denoiser are merged into its weights")
def step_impl(context):
    context.merged_model = merge_model(copy.deepcopy(context.denoiser))


@then("the merged denoiser has no adapter layers left")
def step_impl(context):
    assertions.assertEqual(lora_layers(context.merged_model), {})
    assertions.assertFalse(any(p.requires_grad for p in context.merged_model.parameters()))


@then("the merged denoiser predicts the same noise as the adapted one within {tolerance:g}")
def step_impl(context, tolerance):
    merged = _predict(context.merged_model.eval(), context)
    torch.testing.assert_close(merged, _predict(context.denoiser.eval(), context), atol=tolerance, rtol=tolerance)
