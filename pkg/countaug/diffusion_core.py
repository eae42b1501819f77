import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
import torch.nn.functional as F

from .config import DenoiserConfig, ScheduleConfig
from .errors import ConfigError, ShapeMismatchError
from .logging_config import IndentLogger
from .networks import ConditionalDenoiser
from .utils import load_archive, module_hash, save_archive, write_json

logger = IndentLogger(logging.getLogger("diffusion"))


@dataclass
class NoiseSchedule:
    """DDPM coefficient tables; arrays are indexed by t - 1 for timesteps t in 1..T"""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray = field(default=None)
    variance: Literal["posterior", "beta"] = "posterior"
    sigma_one: Literal["beta", "zero"] = "beta"

    def __post_init__(self) -> None:
        if self.timesteps is None:
            self.timesteps = np.arange(1, self.T + 1)

    def check_timestep(self, t: int | torch.Tensor) -> None:
        t_min, t_max = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
        if t_min < 1 or t_max > self.T:
            raise ValueError(f"timestep out of range: got [{t_min}, {t_max}], schedule covers 1..{self.T}")

    def gather(self, table: str, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Coefficient at t broadcast against `like` (batch-first)"""
        values = torch.as_tensor(getattr(self, table), dtype=torch.float64)
        index = torch.as_tensor(t, dtype=torch.long).reshape(-1).cpu() - 1
        picked = values[index].to(device=like.device, dtype=like.dtype)
        return picked.reshape(-1, *([1] * (like.dim() - 1)))

    def model_timesteps(self, k: int, batch: int, device: torch.device | str) -> torch.Tensor:
        """Timestep label the denoiser was trained on; differs from k on a respaced schedule"""
        return torch.full((batch,), int(self.timesteps[k - 1]), dtype=torch.long, device=device)

    def respace(self, grid: list[int] | np.ndarray) -> "NoiseSchedule":
        """Schedule over an increasing subset of timesteps, with betas recomputed from alpha_bar"""
        grid = np.asarray(sorted(set(int(t) for t in grid)))
        if len(grid) == 0 or grid[0] < 1 or grid[-1] > self.T:
            raise ValueError(f"respacing grid must lie within 1..{self.T}")
        alpha_bar = self.alpha_bar[grid - 1]
        previous = np.concatenate([[1.0], alpha_bar[:-1]])
        beta = 1.0 - alpha_bar / previous
        schedule = _from_betas(beta, self.variance, self.sigma_one)
        schedule.timesteps = grid
        return schedule


def _from_betas(beta: np.ndarray, variance: str, sigma_one: str) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance == "beta":
        sigma = np.sqrt(beta)
    else:
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
        sigma[0] = math.sqrt(beta[0]) if sigma_one == "beta" else 0.0
    return NoiseSchedule(T=len(beta), beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
                         variance=variance, sigma_one=sigma_one)


def make_schedule(
    T: int,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    variance: str = "posterior",
    sigma_one: str = "beta",
) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"Schedule needs T >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"Invalid beta bounds: need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")

    match kind:
        case "linear":
            beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        case "scaled_linear":
            beta = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), T, dtype=np.float64) ** 2
        case "cosine":
            s = 0.008
            steps = np.arange(T + 1, dtype=np.float64) / T
            f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
            beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, 0.999)
        case _:
            raise ConfigError(f"Unknown schedule kind '{kind}'")
    return _from_betas(beta, variance, sigma_one)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(config.timesteps, config.kind, config.beta_min, config.beta_max, config.variance,
                         config.sigma_one)


@dataclass
class LatentState:
    values: torch.Tensor
    timestep: int | torch.Tensor

    def __post_init__(self) -> None:
        if not torch.isfinite(self.values).all():
            raise ValueError("LatentState values must be finite")


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentState:
    """q-sample: sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps"""
    _check_shapes(z0, eps, "forward_diffuse")
    schedule.check_timestep(t)
    alpha_bar = schedule.gather("alpha_bar", t, z0)
    return LatentState(values=alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps, timestep=t)


def one_step_denoise(
    x_t: LatentState,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    z: torch.Tensor | None = None,
    include_noise: bool = True,
) -> torch.Tensor:
    """One reverse step 1/sqrt(a_t) (x_t - (1 - a_t)/sqrt(1 - abar_t) eps) + sigma_t z; differentiable in eps_pred"""
    _check_shapes(x_t.values, eps_pred, "one_step_denoise")
    schedule.check_timestep(x_t.timestep)
    alpha = schedule.gather("alpha", x_t.timestep, eps_pred)
    alpha_bar = schedule.gather("alpha_bar", x_t.timestep, eps_pred)
    mean = (x_t.values.to(eps_pred.dtype) - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_pred) / alpha.sqrt()
    if not include_noise:
        return mean
    if z is None:
        raise ValueError("one_step_denoise with include_noise needs a noise sample z")
    _check_shapes(eps_pred, z, "one_step_denoise noise")
    return mean + schedule.gather("sigma", x_t.timestep, eps_pred) * z


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor | None, guidance_scale: float) -> torch.Tensor:
    if guidance_scale == 1.0:
        return eps_cond
    if eps_uncond is None:
        raise ValueError("Guidance scale other than 1 needs an unconditional prediction")
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def sample_timesteps(batch: int, T: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch,), generator=generator)


def timestep_grid(T: int, steps: int) -> np.ndarray:
    """Evenly strided increasing timesteps ending at T"""
    if steps < 1:
        raise ValueError(f"Sampling needs at least one step, got {steps}")
    steps = min(steps, T)
    return np.unique(np.round(np.linspace(T / steps, T, steps)).astype(np.int64))


class PixelCodec:
    """Maps [0, 1] images to the diffusion space and back; factor 2 emulates a latent space"""

    def __init__(self, downsample: int = 1) -> None:
        if downsample not in (1, 2):
            raise ConfigError(f"latent_downsample must be 1 or 2, got {downsample}")
        self.downsample = downsample

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        z = images * 2.0 - 1.0
        return F.avg_pool2d(z, self.downsample) if self.downsample > 1 else z

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if self.downsample > 1:
            z = F.interpolate(z, scale_factor=self.downsample, mode="bilinear", align_corners=False)
        images = (z + 1.0) / 2.0
        return images.clamp(0.0, 1.0) if clamp else images


def _predict(denoiser, x, t_model, condition, null, guidance_scale):
    eps_cond = denoiser(x, t_model, condition)
    eps_uncond = denoiser(x, t_model, null) if guidance_scale != 1.0 else None
    return guided_noise(eps_cond, eps_uncond, guidance_scale)


@torch.no_grad()
def sample(
    denoiser: ConditionalDenoiser,
    condition: torch.Tensor | None,
    steps: int,
    guidance_scale: float,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    shape: tuple[int, ...] | None = None,
    sampler: Literal["euler", "ddpm"] = "euler",
    codec: PixelCodec | None = None,
) -> torch.Tensor:
    """Reverse process over a strided grid; returns images in [0, 1] as (B, C, H, W)"""
    if guidance_scale < 0:
        raise ValueError(f"guidance_scale must be >= 0, got {guidance_scale}")
    codec = codec or PixelCodec()
    if shape is None:
        raise ValueError("sample needs the diffusion-space shape")
    batch = shape[0]
    length = condition.shape[1] if condition is not None else 1
    null = None
    if guidance_scale != 1.0 or condition is None:
        if getattr(denoiser, "null_condition", None) is None:
            raise ConfigError("Denoiser has no null condition; classifier-free guidance needs one")
        null = denoiser.null_condition_like(batch, length)
    if condition is None:
        condition, guidance_scale = null, 1.0

    device = next(denoiser.parameters()).device
    condition = condition.to(device)
    null = null.to(device) if null is not None else None
    grid = timestep_grid(schedule.T, steps)

    if sampler == "ddpm":
        respaced = schedule.respace(grid)
        x = torch.randn(shape, generator=generator).to(device)
        for k in range(respaced.T, 0, -1):
            t_model = respaced.model_timesteps(k, batch, device)
            eps = _predict(denoiser, x, t_model, condition, null, guidance_scale)
            z = torch.randn(shape, generator=generator).to(device) if k > 1 else torch.zeros_like(x)
            x = one_step_denoise(LatentState(x, k), eps, respaced, z, include_noise=k > 1)
    elif sampler == "euler":
        descending = grid[::-1]
        alpha_bar = schedule.alpha_bar[descending - 1]
        sigmas = np.concatenate([np.sqrt((1.0 - alpha_bar) / alpha_bar), [0.0]])
        x = torch.randn(shape, generator=generator).to(device) * float(math.sqrt(sigmas[0] ** 2 + 1.0))
        for i, t in enumerate(descending):
            model_input = x / float(math.sqrt(sigmas[i] ** 2 + 1.0))
            t_model = torch.full((batch,), int(t), dtype=torch.long, device=device)
            eps = _predict(denoiser, model_input, t_model, condition, null, guidance_scale)
            x = x + float(sigmas[i + 1] - sigmas[i]) * eps
    else:
        raise ConfigError(f"Unknown sampler '{sampler}'")

    return codec.decode(x, clamp=True)


def build_denoiser(config: DenoiserConfig) -> ConditionalDenoiser:
    """Conditional UNet with cross-attention to the condition tokens; rejects configs above the parameter cap"""
    try:
        model = ConditionalDenoiser(config)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"Invalid denoiser architecture: {e}") from e
    n_params = sum(p.numel() for p in model.parameters())
    if n_params > config.max_parameters:
        raise ConfigError(f"Denoiser has {n_params} parameters, above the cap of {config.max_parameters}")
    logger.debug(f"Built denoiser with {n_params} parameters")
    return model


def save_denoiser(
    path: str | Path,
    model: ConditionalDenoiser,
    schedule: ScheduleConfig,
    extra_parameters: dict[str, torch.Tensor] | None = None,
    metadata: dict[str, Any] | None = None,
) -> Path:
    parameters = {f"denoiser.{k}": v for k, v in model.state_dict().items()}
    parameters.update(extra_parameters or {})
    payload = {
        "schedule": schedule.model_dump(mode="json"),
        "architecture": model.config.model_dump(mode="json"),
        "parameter_hash": module_hash(model),
        **(metadata or {}),
    }
    path = save_archive(path, "base", parameters, payload)
    write_json(Path(path).with_suffix(".json"), {k: v for k, v in payload.items() if k != "history"})
    return path


def load_denoiser(path: str | Path) -> tuple[ConditionalDenoiser, ScheduleConfig, dict[str, torch.Tensor], dict]:
    """Returns the denoiser, its schedule config, the remaining named tensors and the metadata"""
    archive = load_archive(path, kind="base")
    metadata = archive["metadata"]
    config = DenoiserConfig.model_validate(metadata["architecture"])
    model = build_denoiser(config)
    state = {k.removeprefix("denoiser."): v for k, v in archive["parameters"].items() if k.startswith("denoiser.")}
    model.load_state_dict(state)
    rest = {k: v for k, v in archive["parameters"].items() if not k.startswith("denoiser.")}
    return model, ScheduleConfig.model_validate(metadata["schedule"]), rest, metadata

