from abc import ABC, abstractmethod
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from src.embedding_geometry import GeometryReport


# Abstract Base Class for Embedding Geometry Plots
# ------------------------------------------------
# This class defines a template for plotting a geometry report: the inter-FSU
# centroid distance heatmap first, then the intra-FSU variance bars.
# Subclasses decide how each figure is drawn.
class GeometryPlotTemplate(ABC):
    def plot(self, report: GeometryReport, out_dir) -> list:
        """
        Draws both geometry figures for a report and, when present, for its shared-embedding contrast.

        Parameters:
        report (GeometryReport): Output of embedding_geometry.
        out_dir: Directory the PNG files are written to.

        Returns:
        list: Paths of the written figures.
        """
        out_dir = Path(out_dir)
        written = []
        for r in [report] + ([report.contrast] if report.contrast is not None else []):
            written.append(self.distance_heatmap(r, out_dir / f"inter_distance_{r.mode}.png"))
            written.append(self.variance_bars(r, out_dir / f"intra_variance_{r.mode}.png"))
        return written

    @abstractmethod
    def distance_heatmap(self, report: GeometryReport, path: Path) -> Path:
        pass

    @abstractmethod
    def variance_bars(self, report: GeometryReport, path: Path) -> Path:
        pass


# Concrete Class drawing the figures with seaborn
# -----------------------------------------------
class SeabornGeometryPlots(GeometryPlotTemplate):
    def distance_heatmap(self, report, path):
        size = max(8, 0.25 * len(report.fsu_names))
        fig, ax = plt.subplots(figsize=(size, size * 0.85))
        sns.heatmap(report.distance_frame(), cmap="viridis", square=True, ax=ax,
                    cbar_kws={"label": "centroid distance"})
        ax.set_title(f"Inter-FSU centroid distances ({report.mode})")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path

    def variance_bars(self, report, path):
        frame = report.variance_frame()
        fig, ax = plt.subplots(figsize=(max(8, 0.25 * len(frame)), 5))
        sns.barplot(data=frame, x="fsu", y="intra_variance", color="steelblue", ax=ax)
        ax.set_yscale("log")
        ax.set_title(f"Intra-FSU variance ({report.mode}), max/min = {report.variance_ratio:.1f}")
        ax.set_xlabel("")
        ax.tick_params(axis="x", rotation=90)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


def variance_comparison(report: GeometryReport) -> pd.DataFrame:
    """Long-form intra-variance table of a report and its contrast, for side-by-side plots."""
    frames = [report.variance_frame().assign(mode=report.mode)]
    if report.contrast is not None:
        frames.append(report.contrast.variance_frame().assign(mode=report.contrast.mode))
    return pd.concat(frames, ignore_index=True)
