from abc import ABC, abstractmethod
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import seaborn as sns

from src.fsu_importance import ImportanceReport


# Abstract Base Class for Importance Plot Strategy
# ------------------------------------------------
class ImportancePlotStrategy(ABC):
    @abstractmethod
    def plot(self, report: ImportanceReport, path: Path) -> Path:
        """
        Draws the model and oracle importance of every FSU into one figure.

        Parameters:
        report (ImportanceReport): Output of importance_report.
        path (Path): PNG file to write.

        Returns:
        Path: The written figure.
        """
        pass


# Concrete Strategy: paired horizontal bars, ranked by model importance
# ---------------------------------------------------------------------
class RankedImportanceBars(ImportancePlotStrategy):
    def __init__(self, top_k: int = 20):
        self.top_k = top_k

    def plot(self, report, path):
        ranked = report.ranked_frame().head(self.top_k)
        long = ranked.melt(id_vars="fsu", value_vars=["model_importance", "oracle_importance"],
                           var_name="method", value_name="importance")
        long["method"] = long["method"].str.replace("_importance", "", regex=False)
        fig, ax = plt.subplots(figsize=(8, max(4, 0.35 * len(ranked))))
        sns.barplot(data=long, y="fsu", x="importance", hue="method", orient="h", ax=ax)
        ax.set_title(f"FSU importance, Spearman rho = {report.spearman_rho:.3f}")
        ax.set_ylabel("")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
