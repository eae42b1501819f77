from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}

SWEEP_METRICS = ("FID_proxy", "DS", "IQS", "IQS50")


def plot_loss_curves(log: pd.DataFrame, path: str | Path, gamma: float | None = None) -> Path:
    """MSE, counting and total loss against the optimizer step"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for column in ("mse", "counting", "total"):
            if column in log:
                ax.plot(log["step"], log[column], label=column, linewidth=1.0)
        if gamma is not None and len(log) and gamma < log["step"].max():
            ax.axvline(gamma, color="grey", linestyle=":", linewidth=0.8, label="counting starts")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_sweep(report: pd.DataFrame, out_dir: str | Path) -> list[Path]:
    """One figure per swept parameter, one panel per metric"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finished = report[report["status"] == "finished"]
    paths = []
    with mpl.rc_context(STYLE):
        for param, rows in finished.groupby("param"):
            rows = rows.sort_values("value")
            fig, axes = plt.subplots(1, len(SWEEP_METRICS), figsize=(2.2 * len(SWEEP_METRICS), 2.2))
            for ax, metric in zip(axes, SWEEP_METRICS, strict=True):
                ax.plot(rows["value"].astype(float), rows[metric].astype(float), marker="o", linewidth=1.0)
                ax.set_xlabel(str(param))
                ax.set_title(metric)
            fig.tight_layout()
            path = out_dir / f"sweep_{param}.png"
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
    return paths


def plot_samples(references: list[np.ndarray], generated: list[np.ndarray], path: str | Path, limit: int = 8) -> Path:
    """Reference scenes on the top row, their augmentations below"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = min(limit, len(references), len(generated))
    if count == 0:
        raise ValueError("plot_samples needs at least one image pair")
    with mpl.rc_context(STYLE):
        fig, axes = plt.subplots(2, count, figsize=(1.2 * count, 2.6), squeeze=False)
        for i in range(count):
            for row, image in enumerate((references[i], generated[i])):
                axes[row][i].imshow(np.clip(image, 0.0, 1.0))
                axes[row][i].axis("off")
        axes[0][0].set_title("reference", loc="left")
        axes[1][0].set_title("augmented", loc="left")
        fig.savefig(path)
        plt.close(fig)
    return path
