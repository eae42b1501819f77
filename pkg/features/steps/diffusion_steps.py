import copy
import math
from unittest import TestCase

import numpy as np
import torch
from behave import given, then, when
from fixtures import capture, tiny_config

from countaug.config import ExperimentConfig, ScheduleConfig
from countaug.diffusion_core import (
    PixelCodec,
    build_denoiser,
    forward_diffuse,
    guided_noise,
    load_denoiser,
    make_schedule,
    one_step_denoise,
    sample,
    save_denoiser,
    timestep_grid,
)
from countaug.utils import module_hash

assertions = TestCase()


def shape_of(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split("x"))


@given("a linear noise schedule with {T:d} timesteps")
def step_impl(context, T):
    context.schedule = make_schedule(T)


@then("the cumulative alpha products decrease strictly and stay in the open unit interval")
def step_impl(context):
    alpha_bar = context.schedule.alpha_bar
    assertions.assertTrue(np.all(np.diff(alpha_bar) < 0))
    assertions.assertTrue(np.all((alpha_bar > 0) & (alpha_bar < 1)))


@then("the first cumulative product is {value:g}")
def step_impl(context, value):
    assertions.assertAlmostEqual(context.schedule.alpha_bar[0], value, places=9)


@then("the first reverse noise scale is the square root of the first beta")
def step_impl(context):
    assertions.assertAlmostEqual(context.schedule.sigma[0], math.sqrt(context.schedule.beta[0]), places=12)


@when('a "{kind}" noise schedule with {T:d} timesteps and betas {low:g} to {high:g} is made')
def step_impl(context, kind, T, low, high):
    context.schedule = capture(context, make_schedule, T, kind, low, high)


@given("a random clean sample of shape {shape}")
def step_impl(context, shape):
    generator = torch.Generator().manual_seed(0)
    context.z0 = torch.rand(shape_of(shape), generator=generator, dtype=torch.float64) * 2 - 1


@when("the sample is diffused to timestep {t:d} with zero noise")
def step_impl(context, t):
    context.state = forward_diffuse(context.z0, t, torch.zeros_like(context.z0), context.schedule)


@when("the sample is diffused to timestep {t:d} with random noise")
def step_impl(context, t):
    context.eps = torch.randn(context.z0.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    context.state = capture(context, forward_diffuse, context.z0, t, context.eps, context.schedule)


@when("the sample is diffused with noise of shape {shape}")
def step_impl(context, shape):
    capture(context, forward_diffuse, context.z0, 1, torch.zeros(shape_of(shape), dtype=torch.float64),
            context.schedule)


@then("the diffused values equal the clean sample times {factor:g}")
def step_impl(context, factor):
    torch.testing.assert_close(context.state.values, context.z0 * factor, rtol=0, atol=1e-6)


@when("the true noise is removed in one reverse step")
def step_impl(context):
    context.recovered = one_step_denoise(context.state, context.eps, context.schedule, include_noise=False)


@then("the clean sample is recovered")
def step_impl(context):
    torch.testing.assert_close(context.recovered, context.z0, rtol=0, atol=1e-9)


@when("a reverse step is taken from a trainable noise prediction")
def step_impl(context):
    context.eps_pred = torch.zeros_like(context.z0, requires_grad=True)
    z = torch.randn(context.z0.shape, dtype=torch.float64)
    one_step_denoise(context.state, context.eps_pred, context.schedule, z).pow(2).sum().backward()


@then("the noise prediction receives a nonzero gradient")
def step_impl(context):
    assertions.assertIsNotNone(context.eps_pred.grad)
    assertions.assertGreater(float(context.eps_pred.grad.abs().sum()), 0.0)


@when("a stochastic reverse step is taken without a noise sample")
def step_impl(context):
    capture(context, one_step_denoise, context.state, context.eps, context.schedule, None, True)


@when("conditional noise {cond:g} and unconditional noise {uncond:g} are mixed with guidance scale {g:g}")
def step_impl(context, cond, uncond, g):
    context.guided = guided_noise(torch.full((2, 3), cond), torch.full((2, 3), uncond), g)


@then("the guided noise is {value:g}")
def step_impl(context, value):
    torch.testing.assert_close(context.guided, torch.full((2, 3), value))


@when("a sampling grid of {steps:d} steps over {T:d} timesteps is built")
def step_impl(context, steps, T):
    context.grid = timestep_grid(T, steps)


@then("the grid has {n:d} increasing timesteps ending at {last:d}")
def step_impl(context, n, last):
    assertions.assertEqual(len(context.grid), n)
    assertions.assertTrue(np.all(np.diff(context.grid) > 0))
    assertions.assertGreaterEqual(int(context.grid[0]), 1)
    assertions.assertEqual(int(context.grid[-1]), last)


@when("the schedule is respaced to every {stride:d}th timestep")
def step_impl(context, stride):
    context.grid = np.arange(stride, context.schedule.T + 1, stride)
    context.respaced = context.schedule.respace(context.grid)


@then("the respaced cumulative products match the original at the grid points")
def step_impl(context):
    np.testing.assert_allclose(context.respaced.alpha_bar, context.schedule.alpha_bar[context.grid - 1], rtol=1e-10)
    np.testing.assert_array_equal(context.respaced.timesteps, context.grid)


@when("the sample is encoded and decoded by the pixel codec")
def step_impl(context):
    images = (context.z0 + 1) / 2
    context.images = images
    context.encoded = PixelCodec().encode(images)
    context.decoded = PixelCodec().decode(context.encoded)


@then("the codec output equals the sample")
def step_impl(context):
    torch.testing.assert_close(context.decoded, context.images)


@then("the encoded values lie in -1 to 1")
def step_impl(context):
    assertions.assertTrue(bool((context.encoded.abs() <= 1.0).all()))


@given("the default denoiser in eval mode")
def step_impl(context):
    context.config = ExperimentConfig()
    torch.manual_seed(0)
    context.denoiser = build_denoiser(context.config.denoiser).eval()


@when("it predicts noise twice for a {shape} input with a {batch:d}x{tokens:d} token condition")
def step_impl(context, shape, batch, tokens):
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(tuple(int(v) for v in shape.split("x")), generator=generator)
    condition = torch.randn(batch, tokens, context.config.denoiser.condition_dim, generator=generator)
    t = torch.full((batch,), 500, dtype=torch.long)
    with torch.no_grad():
        context.predictions = [context.denoiser(x, t, condition) for _ in range(2)]


@then("the noise prediction has shape {shape}")
def step_impl(context, shape):
    assertions.assertEqual(tuple(context.predictions[0].shape), tuple(int(v) for v in shape.split("x")))


@then("both noise predictions are identical")
def step_impl(context):
    assertions.assertTrue(torch.equal(*context.predictions))


@when("a denoiser is built with a cap of {cap:d} parameters")
def step_impl(context, cap):
    config = tiny_config([f"denoiser.max_parameters={cap}"])
    capture(context, build_denoiser, config.denoiser)


@given("a small conditional denoiser")
def step_impl(context):
    context.config = tiny_config()
    torch.manual_seed(0)
    context.denoiser = build_denoiser(context.config.denoiser).eval()
    context.pristine = copy.deepcopy(context.denoiser)
    context.schedule = make_schedule(context.config.schedule.timesteps)
    context.condition = torch.randn(2, 4, context.config.denoiser.condition_dim,
                                    generator=torch.Generator().manual_seed(5))


def _sample(context, sampler, seed, guidance_scale=2.0):
    return sample(
        context.denoiser,
        context.condition,
        steps=4,
        guidance_scale=guidance_scale,
        schedule=context.schedule,
        generator=torch.Generator().manual_seed(seed),
        shape=(2, 3, 16, 16),
        sampler=sampler,
    )


@when('2 images are sampled with the "{sampler}" sampler and seed {seed:d}')
def step_impl(context, sampler, seed):
    context.samples = [_sample(context, sampler, seed)]


@when('2 images are sampled again with the "{sampler}" sampler and seed {seed:d}')
def step_impl(context, sampler, seed):
    context.samples.append(_sample(context, sampler, seed))


@then("the samples have shape {shape} and lie in the unit range")
def step_impl(context, shape):
    images = context.samples[0]
    assertions.assertEqual(tuple(images.shape), shape_of(shape))
    assertions.assertTrue(bool(((images >= 0) & (images <= 1)).all()))


@then("both samplings are identical")
def step_impl(context):
    torch.testing.assert_close(context.samples[0], context.samples[1], rtol=0, atol=0)


@when("images are sampled with guidance scale {g:g}")
def step_impl(context, g):
    capture(context, _sample, context, "euler", 0, g)


@when("the denoiser is saved and loaded again")
def step_impl(context):
    path = context.workdir / "base.pt"
    save_denoiser(path, context.denoiser, ScheduleConfig(timesteps=context.config.schedule.timesteps))
    context.loaded, context.loaded_schedule, _, _ = load_denoiser(path)


@then("the loaded denoiser has the same parameter hash")
def step_impl(context):
    assertions.assertEqual(module_hash(context.loaded), module_hash(context.denoiser))
    assertions.assertEqual(context.loaded_schedule.timesteps, context.config.schedule.timesteps)


@given("a standard normal clean sample of shape {shape}")
def step_impl(context, shape):
    generator = torch.Generator().manual_seed(0)
    context.z0 = torch.randn(shape_of(shape), generator=generator, dtype=torch.float64)


@then("the diffused values have unit variance within {tolerance:g}")
def step_impl(context, tolerance):
    assertions.assertLess(abs(float(context.state.values.var()) - 1.0), tolerance)


@when("{n:d} random forward and reverse steps are compared with their closed forms")
def step_impl(context, n):
    generator = torch.Generator().manual_seed(7)
    rng = np.random.default_rng(7)
    schedule = context.schedule
    context.deviations = []
    for _ in range(n):
        t = int(rng.integers(1, schedule.T + 1))
        z0 = torch.randn((2, 3, 4, 4), generator=generator, dtype=torch.float64)
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
        eps_pred = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
        z = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
        alpha, alpha_bar, sigma = schedule.alpha[t - 1], schedule.alpha_bar[t - 1], schedule.sigma[t - 1]

        state = forward_diffuse(z0, t, eps, schedule)
        expected_xt = math.sqrt(alpha_bar) * z0 + math.sqrt(1 - alpha_bar) * eps
        step = one_step_denoise(state, eps_pred, schedule, z)
        expected_step = (expected_xt - (1 - alpha) / math.sqrt(1 - alpha_bar) * eps_pred) / math.sqrt(alpha) + sigma * z
        context.deviations.append(float((state.values - expected_xt).abs().max()))
        context.deviations.append(float((step - expected_step).abs().max()))


@then("every step agrees within {tolerance:g}")
def step_impl(context, tolerance):
    assertions.assertLess(max(context.deviations), tolerance)


@when("the reverse step output is summed over a trainable noise prediction")
def step_impl(context):
    context.eps_pred = torch.zeros_like(context.z0, requires_grad=True)
    one_step_denoise(context.state, context.eps_pred, context.schedule, include_noise=False).sum().backward()


@then("the noise prediction gradient equals the closed-form coefficient within {tolerance:g} relative")
def step_impl(context, tolerance):
    t = int(context.state.timestep)
    alpha, alpha_bar = context.schedule.alpha[t - 1], context.schedule.alpha_bar[t - 1]
    coefficient = -(1 - alpha) / math.sqrt(1 - alpha_bar) / math.sqrt(alpha)
    relative = (context.eps_pred.grad - coefficient).abs().max() / abs(coefficient)
    assertions.assertLess(float(relative), tolerance)
