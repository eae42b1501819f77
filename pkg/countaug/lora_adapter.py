import logging
import math
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .config import LoraConfig
from .errors import ConfigError
from .logging_config import IndentLogger
from .utils import load_archive, parameter_hash, save_archive, write_json

logger = IndentLogger(logging.getLogger("trainer"))

TARGET_FAMILIES = {
    "attention": ("to_q", "to_k", "to_v", "to_out.0"),
    "feedforward": ("ff.net.0.proj", "ff.net.2"),
    "projection": ("proj_in", "proj_out"),
}


class LoraLinear(nn.Module):
    """y = W x + scale * B (A x) around a frozen linear layer"""

    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise ConfigError(
                f"LoRA rank {rank} exceeds min(in, out) = {min(base.in_features, base.out_features)} of the layer"
            )
        self.base = base
        self.base.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.down = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype,
                                             device=base.weight.device))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype,
                                           device=base.weight.device))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5))

    def forward(self, x: torch.Tensor, *args, **kwargs) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.down.T) @ self.up.T)

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)


def _selected(name: str, suffixes: tuple[str, ...]) -> bool:
    return any(name == s or name.endswith(f".{s}") for s in suffixes)


def _set_submodule(model: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, child, module)


def wrap_model(model: nn.Module, targets: list[str], rank: int, alpha: float) -> list[str]:
    """Freeze the model and wrap every selected linear layer; returns the wrapped module names"""
    unknown = set(targets) - set(TARGET_FAMILIES)
    if unknown:
        raise ConfigError(f"Unknown LoRA target families {sorted(unknown)}")
    suffixes = tuple(s for family in targets for s in TARGET_FAMILIES[family])
    model.requires_grad_(False)

    chosen = [
        name for name, module in model.named_modules()
        if isinstance(module, nn.Linear) and _selected(name, suffixes) and not name.endswith(".base")
    ]
    for name in chosen:
        _set_submodule(model, name, LoraLinear(model.get_submodule(name), rank, alpha))
    logger.debug(f"Wrapped {len(chosen)} layers with rank-{rank} adapters")
    return chosen


def wrap_from_config(model: nn.Module, config: LoraConfig) -> list[str]:
    return wrap_model(model, config.targets, config.rank, config.alpha)


def lora_layers(model: nn.Module) -> dict[str, LoraLinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoraLinear)}


def adapter_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for layer in lora_layers(model).values() for p in (layer.down, layer.up)]


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    state = {}
    for name, layer in lora_layers(model).items():
        state[f"{name}.down"] = layer.down.detach().clone()
        state[f"{name}.up"] = layer.up.detach().clone()
    return state


def load_adapter_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    layers = lora_layers(model)
    expected = {f"{n}.{p}" for n in layers for p in ("down", "up")}
    if set(state) != expected:
        raise ConfigError(f"Adapter state does not match the wrapped model ({len(state)} vs {len(expected)} tensors)")
    with torch.no_grad():
        for key, tensor in state.items():
            name, _, which = key.rpartition(".")
            getattr(layers[name], which).copy_(tensor)


def base_named_parameters(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Named base tensors, with wrapped names mapped back to their unwrapped form"""
    named = []
    for name, tensor in model.state_dict().items():
        if name.endswith(".down") or name.endswith(".up"):
            if isinstance(model.get_submodule(name.rpartition(".")[0]), LoraLinear):
                continue
        named.append((name.replace(".base.", "."), tensor))
    return named


def base_parameter_hash(model: nn.Module) -> str:
    return parameter_hash(base_named_parameters(model))


def merge(layer: LoraLinear) -> nn.Linear:
    """Plain linear layer with W' = W + scale * B A"""
    merged = nn.Linear(layer.base.in_features, layer.base.out_features, bias=layer.base.bias is not None,
                       dtype=layer.base.weight.dtype, device=layer.base.weight.device)
    with torch.no_grad():
        merged.weight.copy_(layer.base.weight + layer.delta_weight())
        if layer.base.bias is not None:
            merged.bias.copy_(layer.base.bias)
    merged.requires_grad_(False)
    return merged


def merge_model(model: nn.Module) -> nn.Module:
    for name, layer in list(lora_layers(model).items()):
        _set_submodule(model, name, merge(layer))
    return model


def save_adapter(path: str | Path, model: nn.Module, config: LoraConfig, metadata: dict[str, Any]) -> Path:
    payload = {
        "lora": config.model_dump(mode="json"),
        "wrapped_layers": sorted(lora_layers(model)),
        "base_parameter_hash": base_parameter_hash(model),
        **metadata,
    }
    path = save_archive(path, "adapter", adapter_state(model), payload)
    write_json(Path(path).with_suffix(".json"), {k: v for k, v in payload.items() if k != "history"})
    return path


def load_adapter(path: str | Path, model: nn.Module) -> dict[str, Any]:
    """Wrap `model` as recorded in the archive and load the adapter weights onto it"""
    archive = load_archive(path, kind="adapter")
    metadata = archive["metadata"]
    base_hash = base_parameter_hash(model)
    if metadata["base_parameter_hash"] != base_hash:
        raise ConfigError(f"Adapter {path} was trained on another base model")
    config = LoraConfig.model_validate(metadata["lora"])
    wrap_from_config(model, config)
    load_adapter_state(model, archive["parameters"])
    return metadata
