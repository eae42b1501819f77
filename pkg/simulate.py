import argparse
import logging
from pathlib import Path

import pandas as pd

from countaug.eval_metrics import evaluate_bundle
from countaug.logging_config import configure_logging
from countaug.scene_forge import load_dataset
from countaug.service import ModelBundle
from countaug.trainer import finetune_lora
from countaug.utils import ArtifactResolver, default_data_root, load_config

logging.basicConfig(level=logging.ERROR)

VARIANTS = {
    "mse_only": ["train.counting.lambda_weight=0"],
    "counting": [],
    "image_only": ["train.condition_mode=image_only"],
    "category_name": ["train.condition_mode=category_name"],
    "content_image": ["train.condition_mode=content_image"],
    "both": ["train.condition_mode=both"],
}


class AblationSimulator:
    """Fine-tunes and evaluates every variant over several seeds from one set of frozen artifacts"""

    def __init__(self, config_path: Path | None, artifacts: Path, data_root: Path, out_dir: Path,
                 overrides: list[str]) -> None:
        self.config_path = config_path
        self.overrides = overrides
        self.out_dir = out_dir
        resolver = ArtifactResolver(artifacts)
        self.base = resolver.output("base", "base")
        self.encoder = resolver.output("encoder", "encoder")
        self.detector = resolver.output("detector", "detector")
        self.train = load_dataset(data_root, "train")
        self.references = load_dataset(data_root, "eval")
        self.results = []

    def simulate_variant(self, name: str, seed: int) -> None:
        config = load_config(self.config_path, [*self.overrides, *VARIANTS[name]], seed)
        cell_dir = self.out_dir / name / f"seed_{seed}"
        artifacts = finetune_lora(self.base, self.train, config, cell_dir, self.encoder, self.detector)
        bundle = ModelBundle.load(config, self.train.categories, self.base, self.encoder, self.detector,
                                  artifacts.adapter_path)
        report = evaluate_bundle(bundle, self.references.scenes, config.eval)
        report.write(cell_dir)
        self.results.append({
            "variant": name,
            "seed": seed,
            "FID_proxy": report.fid_proxy,
            "DS": report.ds,
            "IQS": report.iqs,
            "IQS50": report.iqs50,
            "final_mse": float(artifacts.result.log["mse"].iloc[-1]),
        })

    def run_simulation(self, variants: list[str], seeds: list[int]) -> pd.DataFrame:
        for name in variants:
            for seed in seeds:
                self.simulate_variant(name, seed)
        return pd.DataFrame(self.results)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    return results.groupby("variant")[["FID_proxy", "DS", "IQS", "IQS50"]].agg(["mean", "std"])


def main() -> None:
    parser = argparse.ArgumentParser(description="Multi-seed ablation of the counting loss and condition modes")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--artifacts", type=Path, default=Path("artifacts"))
    parser.add_argument("--data", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("artifacts/ablation"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(VARIANTS))
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args()
    configure_logging("WARNING")

    simulator = AblationSimulator(args.config, args.artifacts, args.data or default_data_root(), args.out,
                                  args.overrides)
    results = simulator.run_simulation(args.variants, args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    results.to_csv(args.out / "ablation_results.csv", index=False)

    print("\nAblation Statistics:")
    print(f"Variants: {results['variant'].nunique()}, seeds: {results['seed'].nunique()}")
    print(summarize(results).round(3).to_string())

    if {"mse_only", "counting"} <= set(results["variant"]):
        by_seed = results.pivot(index="seed", columns="variant", values="IQS")
        gain = by_seed["counting"] - by_seed["mse_only"]
        print("\nCounting loss effect on IQS:")
        print(f"Mean gain: {gain.mean():.2f} points, improved on {(gain > 0).sum()} of {len(gain)} seeds")


if __name__ == "__main__":
    main()
