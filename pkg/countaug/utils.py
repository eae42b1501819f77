import hashlib
import json
import os
import random
import tomllib
from collections.abc import Iterable
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from .config import ExperimentConfig
from .errors import ConfigError, MissingArtifactError

FORMAT_VERSION = 1
DATA_ROOT_ENV = "COUNTAUG_DATA_ROOT"
PACKAGE_DIR = Path(__file__).resolve().parent


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator seeded the same way"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def parameter_hash(named_tensors: Iterable[tuple[str, torch.Tensor]]) -> str:
    """Order-independent SHA-256 over parameter names, shapes and raw bytes"""
    digest = hashlib.sha256()
    for name, tensor in sorted(named_tensors, key=lambda item: item[0]):
        data = tensor.detach().to("cpu").contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(data.shape)).encode())
        digest.update(str(data.dtype).encode())
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return parameter_hash(list(module.state_dict().items()))


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def code_hash() -> str:
    """Content hash of the package sources, recorded in run manifests"""
    digest = hashlib.sha256()
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        digest.update(str(path.relative_to(PACKAGE_DIR)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def save_archive(path: str | Path, kind: str, parameters: dict[str, torch.Tensor], metadata: dict[str, Any]) -> Path:
    """Write a single checkpoint archive holding named tensors and JSON-able metadata"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "parameters": {name: tensor.detach().to("cpu").clone() for name, tensor in parameters.items()},
        "metadata": json.loads(json.dumps(metadata)),
    }
    torch.save(payload, path)
    return path


def load_archive(path: str | Path, kind: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"Checkpoint {path} has format version {payload.get('format_version')}, "
                          f"expected {FORMAT_VERSION}")
    if kind is not None and payload.get("kind") != kind:
        raise ConfigError(f"Checkpoint {path} holds a '{payload.get('kind')}' archive, expected '{kind}'")
    return payload


def write_json(path: str | Path, data: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def read_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"File {path} does not exist")
    return json.loads(path.read_text())


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a YAML, JSON or TOML config file into a plain dict"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file {path} does not exist")
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping at the top level")
    return data


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply `a.b.c=value` overrides; values are typed with yaml.safe_load"""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override '{override}' is not of the form key=value")
        dotted, raw = override.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{override}' descends into a non-mapping value")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_config(
    path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None
) -> ExperimentConfig:
    """Build an ExperimentConfig from an optional file plus overrides; a seed override applies to every phase"""
    data = read_config_file(path) if path else {}
    data = apply_overrides(data, overrides)
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e.errors()[0]['loc']}: {e.errors()[0]['msg']}") from e
    if seed is not None:
        for section in (config.data, config.encoder, config.detector, config.base, config.train, config.eval):
            section.seed = seed
    return config


@dataclass
class ArtifactRecord:
    path: Path
    kind: str
    status: str
    finished_at: datetime
    outputs: dict[str, str]

    @classmethod
    def from_manifest(cls, path: Path) -> "ArtifactRecord":
        data = read_json(path)
        finished = data.get("finished_at") or data.get("started_at") or "1970-01-01T00:00:00"
        return cls(
            path=path.parent,
            kind=data.get("kind", ""),
            status=data.get("status", ""),
            finished_at=datetime.fromisoformat(finished),
            outputs=data.get("outputs", {}),
        )


class ArtifactResolver:
    """Finds the most recent finished artifact of a kind below an artifacts root"""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.records: list[ArtifactRecord] = []
        self._scan()

    def _scan(self) -> None:
        if not self.root.exists():
            return
        for path in self.root.rglob("manifest.json"):
            try:
                self.records.append(ArtifactRecord.from_manifest(path))
            except (ValueError, KeyError, json.JSONDecodeError):
                continue

    def find(self, kind: str) -> ArtifactRecord:
        candidates = [r for r in self.records if r.kind == kind and r.status == "finished"]
        if not candidates:
            raise MissingArtifactError(f"No finished '{kind}' artifact found below {self.root}")
        return max(candidates, key=lambda r: r.finished_at)

    def output(self, kind: str, name: str, explicit: str | Path | None = None) -> Path:
        """Resolve an artifact file: an explicit path wins, otherwise the latest manifest of the kind"""
        if explicit is not None:
            path = Path(explicit)
            if not path.exists():
                raise MissingArtifactError(f"{kind} artifact {path} does not exist")
            return path
        record = self.find(kind)
        if name not in record.outputs:
            raise MissingArtifactError(f"Artifact {record.path} has no output '{name}'")
        path = Path(record.outputs[name])
        if not path.is_absolute():
            path = record.path / path
        if not path.exists():
            raise MissingArtifactError(f"{kind} artifact {path} does not exist")
        return path


def to_tensor(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """HWC float images in [0, 1] -> (B, 3, H, W) float32 tensor"""
    array = np.stack(images) if isinstance(images, list) else np.asarray(images)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_images(tensor: torch.Tensor) -> list[np.ndarray]:
    """(B, 3, H, W) tensor -> list of HWC float32 arrays, quantized to 8 bits"""
    array = tensor.detach().to("cpu", torch.float32).clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
    return [np.round(a * 255.0).astype(np.float32) / 255.0 for a in array]
