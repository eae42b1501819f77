import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .config import ExperimentConfig
from .errors import ConfigError, MissingArtifactError, exit_code_for
from .eval_metrics import evaluate, recurrent_generate, write_tree
from .events.run import RunLedger
from .fusion_condition import load_encoder, pretrain_encoder, save_encoder
from .logging_config import IndentLogger, configure_logging
from .plotting import plot_loss_curves, plot_samples, plot_sweep
from .reward_counter import load_detector, loss_debug_dump, pretrain_detector, save_detector
from .scene_forge import SceneDataset, generate_dataset, holdout_split, load_dataset, prompt_for_scene
from .service import ModelBundle, read_augmentations, write_augmentations
from .sweep import SweepInputs, resolve_grids, sweep
from .trainer import finetune_lora, pretrain_base, save_base
from .utils import ArtifactResolver, code_hash, default_data_root, load_config, module_hash, read_json, write_json

logger = IndentLogger(logging.getLogger("cli"))

COMMANDS = (
    "gen-data",
    "pretrain-encoder",
    "pretrain-detector",
    "pretrain-base",
    "finetune",
    "augment",
    "eval",
    "sweep",
    "recurrent",
    "inspect-loss",
)


class StrictArgumentParser(argparse.ArgumentParser):
    """Argument errors are config errors rather than a bare exit"""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = StrictArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML, JSON or TOML experiment config")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: <artifacts>/<command>)")
    common.add_argument("--seed", type=int, default=None, help="seed for every phase")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.counting.tau=0.2")
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--artifacts", type=Path, default=Path("artifacts"),
                        help="root scanned for earlier run manifests")
    common.add_argument("--data", type=Path, default=None, help="dataset root (default: $COUNTAUG_DATA_ROOT or ./data)")

    parser = StrictArgumentParser(prog="countaug", description="Prompt-free multi-object augmentation at desk scale")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=StrictArgumentParser)
    for name in COMMANDS:
        sub = commands.add_parser(name, parents=[common])
        if name in ("finetune", "augment", "eval", "sweep", "recurrent", "inspect-loss"):
            for kind in ("base", "encoder", "detector"):
                sub.add_argument(f"--{kind}", type=Path, default=None, help=f"{kind} checkpoint (default: latest run)")
        if name in ("augment", "eval", "recurrent"):
            sub.add_argument("--adapter", type=Path, default=None, help="adapter checkpoint (default: latest run)")
            sub.add_argument("--no-adapter", action="store_true", help="sample from the base model alone")
        if name in ("augment", "eval"):
            sub.add_argument("--box-source", choices=["ground_truth", "detector", "random_crop"], default=None)
            sub.add_argument("--limit", type=int, default=None, help="use only the first N scenes")
        if name in ("finetune", "eval", "sweep"):
            sub.add_argument("--plots", action="store_true", help="write PNG plots next to the results")
        if name in ("augment", "recurrent", "inspect-loss"):
            sub.add_argument("--split", choices=["train", "eval"], default="eval")
        if name in ("recurrent", "inspect-loss"):
            sub.add_argument("--scene-id", type=int, default=None)
        match name:
            case "eval":
                sub.add_argument("--generated", type=Path, default=None, help="augment output to evaluate")
                sub.add_argument("--tree", type=Path, default=None, help="recurrent output for the recurrent std")
                sub.add_argument("--compare", type=Path, nargs="+", default=None,
                                 help="eval output directories to tabulate instead of evaluating")
            case "sweep":
                sub.add_argument("--grid", action="append", default=None, help="registered grid name (repeatable)")
            case "recurrent":
                sub.add_argument("--depth", type=int, default=None)
                sub.add_argument("--fanout", type=int, default=None)
            case "inspect-loss":
                sub.add_argument("--image", type=Path, default=None, help="PNG to score instead of the scene image")
    return parser


class CommandContext:
    """Parsed arguments, config and the shared ledger of one invocation"""

    def __init__(self, args: argparse.Namespace, config: ExperimentConfig, argv: list[str]) -> None:
        self.args = args
        self.config = config
        self.argv = argv
        self.ledger = RunLedger()
        self.resolver = ArtifactResolver(args.artifacts)
        self.out = args.out or (args.artifacts / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data_root = args.data or default_data_root()

    def artifact(self, kind: str, required: bool = True) -> Path | None:
        explicit = getattr(self.args, kind, None)
        try:
            return self.resolver.output(kind, kind, explicit)
        except MissingArtifactError:
            if required:
                raise
            return None

    def dataset(self, split: str) -> SceneDataset:
        return load_dataset(self.data_root, split)

    def track(self, kind: str, data_hash: str = ""):
        return self.ledger.track(kind, self.config.model_dump(mode="json"), self.config.config_hash(),
                                 self.out / "manifest.json", code_hash(), data_hash, ["countaug", *self.argv])

    def bundle(self, categories) -> ModelBundle:
        explicit = {kind: getattr(self.args, kind, None) for kind in ("base", "encoder", "detector", "adapter")}
        return ModelBundle.from_resolver(self.config, categories, self.resolver, explicit, not self.args.no_adapter)


def gen_data(ctx: CommandContext) -> None:
    root = ctx.data_root
    with ctx.track("dataset") as run:
        manifests = generate_dataset(ctx.config.data, root)
        run.outputs.update({split: str(Path(root).resolve() / split) for split in manifests})


def pretrain_encoder_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset("train")
    config = ctx.config.encoder
    with ctx.track("encoder", dataset.manifest.content_hash) as run:
        train, val = holdout_split(dataset.scenes, config.val_fraction)
        encoder, metrics = pretrain_encoder(train, val, dataset.categories, config, ctx.config.train.device)
        path = save_encoder(ctx.out / "encoder.pt", encoder, len(dataset.categories),
                            {"config_hash": ctx.config.config_hash(), **metrics})
        ctx.ledger.record_checkpoint(run.run_id, "encoder", path, ctx.config.config_hash(), module_hash(encoder))
        run.outputs.update({"encoder": path.name})


def pretrain_detector_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset("train")
    config = ctx.config.detector
    scene_config = ctx.config.data.model_copy(update={"categories": dataset.categories})
    with ctx.track("detector", dataset.manifest.content_hash) as run:
        train, val = holdout_split(dataset.scenes, config.val_fraction)
        detector, metrics = pretrain_detector(train, val, scene_config, config, ctx.config.train.device)
        path = save_detector(ctx.out / "detector.pt", detector, config, scene_config.image_size,
                             {"config_hash": ctx.config.config_hash(), **metrics})
        ctx.ledger.record_checkpoint(run.run_id, "detector", path, ctx.config.config_hash(), module_hash(detector))
        run.outputs.update({"detector": path.name})


def pretrain_base_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset("train")
    with ctx.track("base", dataset.manifest.content_hash) as run:
        result = pretrain_base(dataset, ctx.config, ctx.ledger, run.run_id)
        path = save_base(ctx.out / "base.pt", result, ctx.config, {"config_hash": ctx.config.config_hash()})
        result.log.to_csv(ctx.out / "loss.csv", index=False)
        ctx.ledger.record_checkpoint(run.run_id, "base", path, ctx.config.config_hash(), module_hash(result.model))
        run.outputs.update({"base": path.name, "loss_log": "loss.csv"})


def finetune_command(ctx: CommandContext) -> None:
    train = ctx.config.train
    needs_detector = train.counting.lambda_weight > 0 or train.box_source == "detector"
    artifacts = finetune_lora(
        ctx.artifact("base"),
        ctx.dataset("train"),
        ctx.config,
        ctx.out,
        ctx.artifact("encoder"),
        ctx.artifact("detector", required=needs_detector),
        ctx.ledger,
        ["countaug", *ctx.argv],
    )
    if ctx.args.plots:
        plot_loss_curves(artifacts.result.log, ctx.out / "loss_curves.png", train.counting.gamma)
    logger.info(f"Adapter written to {artifacts.adapter_path}")


def _limited(scenes: list, limit: int | None) -> list:
    return scenes[:limit] if limit is not None else scenes


def augment_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset(ctx.args.split)
    box_source = ctx.args.box_source or ctx.config.eval.box_source
    with ctx.track("augment", dataset.manifest.content_hash) as run:
        bundle = ctx.bundle(dataset.categories)
        augmentations = bundle.augment_scenes(_limited(dataset.scenes, ctx.args.limit), ctx.config.eval.seed,
                                              box_source, ctx.config.eval.samples_per_scene)
        provenance = write_augmentations(augmentations, ctx.out)
        run.outputs.update({"provenance": provenance.name, "images": "images"})


def _compare(ctx: CommandContext) -> None:
    rows = []
    for run_dir in ctx.args.compare:
        metrics = read_json(Path(run_dir) / "metrics.json")
        rows.append({"run": str(run_dir), **{k: v for k, v in metrics.items() if k != "thresholds"}})
    table = pd.DataFrame(rows)
    table.to_csv(ctx.out / "comparison.csv", index=False)
    logger.info(f"Comparison of {len(rows)} runs:\n{table.to_string(index=False)}")


def eval_command(ctx: CommandContext) -> None:
    if ctx.args.compare:
        with ctx.track("comparison") as run:
            _compare(ctx)
            run.outputs.update({"comparison": "comparison.csv"})
        return

    dataset = ctx.dataset("eval")
    config = ctx.config.eval
    if ctx.args.box_source:
        config = config.model_copy(update={"box_source": ctx.args.box_source})
    recurrent_std = None
    if ctx.args.tree is not None:
        recurrent_std = read_json(ctx.args.tree / "tree.json")["channel_std"].get("level_2")

    with ctx.track("eval", dataset.manifest.content_hash) as run:
        references = _limited(dataset.scenes, ctx.args.limit)
        if ctx.args.generated is not None:
            by_id = {s.scene_id: s for s in references}
            loaded = [(entry, image) for entry, image in read_augmentations(ctx.args.generated)
                      if entry["scene_id"] in by_id]
            generated = [image for _, image in loaded]
            paired = [by_id[entry["scene_id"]] for entry, _ in loaded]
            encoder, _ = load_encoder(ctx.artifact("encoder"))
            detector, _ = load_detector(ctx.artifact("detector"))
            report = evaluate(generated, paired, encoder, detector, dataset.categories, config, recurrent_std)
        else:
            bundle = ctx.bundle(dataset.categories)
            augmentations = bundle.augment_scenes(references, config.seed, config.box_source, config.samples_per_scene)
            generated = [a.image for a in augmentations]
            by_id = {s.scene_id: s for s in references}
            paired = [by_id[a.scene_id] for a in augmentations]
            report = evaluate(generated, paired, bundle.encoders.encoder, bundle.detector, dataset.categories, config,
                              recurrent_std)
        json_path, csv_path = report.write(ctx.out)
        run.outputs.update({"metrics": json_path.name, "metrics_csv": csv_path.name})
        if ctx.args.plots:
            plot_samples([s.image for s in paired], generated, ctx.out / "samples.png")
            run.outputs["samples_plot"] = "samples.png"


def sweep_command(ctx: CommandContext) -> None:
    names = ctx.args.grid if ctx.args.grid is not None else ctx.config.sweep.grids
    grids = resolve_grids(names)
    with ctx.track("sweep") as run:
        if grids:
            inputs = SweepInputs(
                base=str(ctx.artifact("base")),
                encoder=str(ctx.artifact("encoder")),
                detector=str(ctx.artifact("detector")),
                data_root=str(ctx.data_root),
            )
        else:
            inputs = SweepInputs(base="", encoder="", detector="", data_root=str(ctx.data_root))
        report = sweep(grids, ctx.config, inputs, ctx.out, ctx.config.sweep.workers)
        run.outputs.update({"report": "sweep.csv"})
        if ctx.args.plots and len(report):
            run.outputs.update({p.stem: p.name for p in plot_sweep(report, ctx.out)})


def _scene(dataset: SceneDataset, scene_id: int | None):
    if scene_id is None:
        return dataset.scenes[0]
    for scene in dataset.scenes:
        if scene.scene_id == scene_id:
            return scene
    raise ConfigError(f"Scene {scene_id} is not in the {dataset.manifest.split} split")


def recurrent_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset(ctx.args.split)
    config = ctx.config.eval
    with ctx.track("recurrent", dataset.manifest.content_hash) as run:
        bundle = ctx.bundle(dataset.categories)
        tree = recurrent_generate(bundle, _scene(dataset, ctx.args.scene_id), ctx.args.depth or config.recurrent_depth,
                                  ctx.args.fanout or config.recurrent_fanout, config.seed)
        tree_path = write_tree(tree, ctx.out)
        report = {"channel_std_first": tree.level_std(1), "channel_std_recurrent": tree.level_std(2),
                  "degenerate_nodes": sum(n.degenerate for n in tree.nodes), "images": len(tree.nodes)}
        write_json(ctx.out / "channel_std.json", report)
        logger.info(f"Generated {len(tree.nodes)} images; channel std first {report['channel_std_first']}, "
                    f"recurrent {report['channel_std_recurrent']}")
        run.outputs.update({"tree": tree_path.name, "channel_std": "channel_std.json"})


def inspect_loss_command(ctx: CommandContext) -> None:
    dataset = ctx.dataset(ctx.args.split)
    scene = _scene(dataset, ctx.args.scene_id)
    with ctx.track("inspect", dataset.manifest.content_hash) as run:
        detector, _ = load_detector(ctx.artifact("detector"))
        image = scene.image
        if ctx.args.image is not None:
            if not ctx.args.image.exists():
                raise MissingArtifactError(f"Image {ctx.args.image} does not exist")
            with Image.open(ctx.args.image) as img:
                image = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        dump = loss_debug_dump(image, prompt_for_scene(scene, dataset.categories), detector, ctx.config.train.counting)
        dump["scene_id"] = scene.scene_id
        write_json(ctx.out / "loss_dump.json", dump)
        for category in dump["categories"]:
            logger.info(f"{category['name']}: count {category['count']}, top-k {category['top_k_scores']}, "
                        f"loss {category['loss']:.4f}")
        run.outputs.update({"dump": "loss_dump.json"})


HANDLERS = {
    "gen-data": gen_data,
    "pretrain-encoder": pretrain_encoder_command,
    "pretrain-detector": pretrain_detector_command,
    "pretrain-base": pretrain_base_command,
    "finetune": finetune_command,
    "augment": augment_command,
    "eval": eval_command,
    "sweep": sweep_command,
    "recurrent": recurrent_command,
    "inspect-loss": inspect_loss_command,
}


def error_line(error: BaseException) -> str:
    message = " ".join(str(error).split())
    return f"error:{type(error).__name__}:{message}"


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        config = load_config(args.config, args.overrides, args.seed)
        with logger.indent_block(f"countaug {args.command}", phase=True, timed=True):
            HANDLERS[args.command](CommandContext(args, config, argv))
    except Exception as e:
        print(error_line(e), file=sys.stderr)
        if logger.is_debug():
            logging.getLogger("cli").exception("Command failed")
        return exit_code_for(e)
    return 0


def run(command: str, argv: list[str]) -> int:
    return main([command, *argv])
