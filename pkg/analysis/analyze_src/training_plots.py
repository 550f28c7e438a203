from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns


def plot_loss_curve(loss_curve: pd.DataFrame, path: Path) -> Path:
    """Reconstruction loss per epoch."""
    fig, ax = plt.subplots(figsize=(8, 5))
    sns.lineplot(data=loss_curve, x="epoch", y="loss", marker="o", ax=ax)
    ax.set_title("Masked reconstruction loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_fsu_loss(fsu_loss: pd.DataFrame, path: Path) -> Path:
    """Final-epoch reconstruction MSE of every FSU, worst first."""
    frame = fsu_loss.sort_values("mse", ascending=False, kind="stable")
    fig, ax = plt.subplots(figsize=(max(8, 0.25 * len(frame)), 5))
    sns.barplot(data=frame, x="fsu", y="mse", color="indianred", ax=ax)
    ax.set_yscale("log")
    ax.set_title("Per-FSU reconstruction loss")
    ax.set_xlabel("")
    ax.tick_params(axis="x", rotation=90)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_label_efficiency(reports: list, path: Path) -> Path:
    """Accuracy and macro-F1 of the probe against the labeled fraction."""
    frame = pd.DataFrame(
        [{"fraction": r.labeled_fraction, "accuracy": r.accuracy, "macro_f1": r.macro_f1} for r in reports]
    ).melt(id_vars="fraction", var_name="metric", value_name="score")
    fig, ax = plt.subplots(figsize=(8, 5))
    sns.lineplot(data=frame, x="fraction", y="score", hue="metric", marker="o", ax=ax)
    ax.set_title("Label efficiency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
