import logging
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Any

import pandas as pd

from .config import ExperimentConfig
from .errors import ConfigError
from .eval_metrics import evaluate_bundle
from .logging_config import IndentLogger
from .scene_forge import load_dataset
from .service import ModelBundle
from .trainer import finetune_lora, total_steps
from .utils import apply_overrides

logger = IndentLogger(logging.getLogger("trainer"))

SWEEP_COLUMNS = ["param", "value", "effective_value", "FID_proxy", "DS", "IQS", "IQS50", "status", "error"]

GRID_REGISTRY: dict[str, Callable[[], "SweepGrid"]] = {}


@dataclass
class SweepGrid:
    param: str
    path: str
    values: list[Any]

    def __len__(self) -> int:
        return len(self.values)


def register_grid(name: str):
    def register(fn: Callable[[], SweepGrid]) -> Callable[[], SweepGrid]:
        if name in GRID_REGISTRY:
            raise ValueError(f"Cannot register duplicate grid '{name}'")
        GRID_REGISTRY[name] = fn
        return fn

    return register


@register_grid("tau")
def tau_grid() -> SweepGrid:
    return SweepGrid("tau", "train.counting.tau", [0.1, 0.2, 0.3, 0.4, 0.5])


@register_grid("gamma")
def gamma_grid() -> SweepGrid:
    return SweepGrid("gamma", "train.counting.gamma", [0, 1000, 3000, 5000, 10000, 15000])


@register_grid("lambda")
def lambda_grid() -> SweepGrid:
    return SweepGrid("lambda", "train.counting.lambda_weight", [0.5, 1.0, 2.0])


def resolve_grids(names: list[str]) -> list[SweepGrid]:
    unknown = [n for n in names if n not in GRID_REGISTRY]
    if unknown:
        raise ConfigError(f"Unknown sweep grids {unknown}; registered grids are {sorted(GRID_REGISTRY)}")
    return [GRID_REGISTRY[n]() for n in names]


@dataclass
class SweepInputs:
    """Frozen artifacts and datasets every cell starts from"""

    base: str
    encoder: str
    detector: str
    data_root: str
    eval_root: str | None = None


def cell_config(config: ExperimentConfig, grid: SweepGrid, value: Any) -> ExperimentConfig:
    """Apply one grid value under the sweep step budget

    Gate steps are stated against a full-length run of `gamma_reference_steps` and scale with the budget.
    """
    data = apply_overrides(config.model_dump(mode="json"), [f"{grid.path}={value}"])
    budget = config.sweep.max_steps
    if budget is not None:
        data["train"]["max_steps"] = budget
        counting = data["train"]["counting"]
        counting["gamma"] = float(counting["gamma"]) * budget / config.sweep.gamma_reference_steps
    try:
        cell = ExperimentConfig.model_validate(data)
    except ValueError as e:
        raise ConfigError(f"Sweep cell {grid.param}={value} is not a valid config: {e}") from e
    if budget is not None:
        check_gate_reachable(cell, budget)
    return cell


def check_gate_reachable(config: ExperimentConfig, steps: int) -> None:
    counting = config.train.counting
    if counting.lambda_weight > 0 and counting.gamma >= steps:
        raise ConfigError(
            f"Counting loss never activates: gamma={counting.gamma:g} is not below the {steps} training steps"
        )


def run_cell(config_data: dict[str, Any], param: str, path: str, value: Any, inputs: SweepInputs,
             out_dir: str) -> dict[str, Any]:
    """Fine-tune and evaluate one grid cell; failures become a row with status 'failed'"""
    row = {"param": param, "value": value, "effective_value": None, "FID_proxy": None, "DS": None, "IQS": None,
           "IQS50": None, "status": "finished", "error": ""}
    try:
        config = cell_config(ExperimentConfig.model_validate(config_data), SweepGrid(param, path, [value]), value)
        row["effective_value"] = reduce(lambda node, key: node[key], path.split("."), config.model_dump(mode="json"))
        train = load_dataset(inputs.data_root, "train")
        check_gate_reachable(config, total_steps(len(train.scenes), config))
        references = load_dataset(inputs.eval_root or inputs.data_root, "eval")
        artifacts = finetune_lora(inputs.base, train, config, out_dir, inputs.encoder, inputs.detector)
        bundle = ModelBundle.load(config, train.categories, inputs.base, inputs.encoder, inputs.detector,
                                  artifacts.adapter_path)
        report = evaluate_bundle(bundle, references.scenes, config.eval)
        report.write(out_dir)
        row.update({"FID_proxy": report.fid_proxy, "DS": report.ds, "IQS": report.iqs, "IQS50": report.iqs50})
    except Exception as e:
        logger.error(f"Cell {param}={value} failed: {type(e).__name__}: {e}")
        row.update({"status": "failed", "error": f"{type(e).__name__}: {e}"})
    return row


def sweep(grids: list[SweepGrid], config: ExperimentConfig, inputs: SweepInputs, out_dir: str | Path,
          workers: int = 1) -> pd.DataFrame:
    """One fine-tune + evaluation per grid cell, reported as one CSV row each"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_data = config.model_dump(mode="json")
    cells = [
        (config_data, grid.param, grid.path, value, inputs, str(out_dir / "cells" / f"{grid.param}_{value}"))
        for grid in grids
        for value in grid.values
    ]

    rows = []
    with logger.indent_block(f"Sweeping {len(cells)} cells over {[g.param for g in grids]}", phase=True, timed=True):
        if workers > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_cell_args, cells))
        else:
            for cell in cells:
                with logger.indent_block(f"Cell {cell[1]}={cell[3]}", timed=True):
                    rows.append(run_cell(*cell))

    report = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    report.to_csv(out_dir / "sweep.csv", index=False)
    failed = int((report["status"] == "failed").sum())
    logger.info(f"Sweep finished: {len(report) - failed} cells finished, {failed} failed")
    return report


def _run_cell_args(args: tuple) -> dict[str, Any]:
    return run_cell(*args)
