import logging
from typing import Optional

from analysis.analyze_src.embedding_geometry_plots import SeabornGeometryPlots
from analysis.analyze_src.importance_plots import RankedImportanceBars
from src.run_config import load_config
from src.stages import run_analysis
from zenml import step


@step(enable_cache=False)
def analysis_step(config_path: str, run_dir: str, ckpt_path: str, dataset_path: str,
                  contrast_ckpt_path: Optional[str] = None) -> dict:
    """Embedding geometry and FSU importance of the probed checkpoint, with figures."""
    reports = run_analysis(load_config(config_path), ckpt_path, dataset_path, "all", run_dir,
                           contrast_ckpt=contrast_ckpt_path)
    SeabornGeometryPlots().plot(reports["geometry"], run_dir)
    RankedImportanceBars().plot(reports["importance"], f"{run_dir}/importance.png")
    geometry = reports["geometry"]
    summary = {
        "variance_ratio": geometry.variance_ratio,
        "contrast_variance_ratio": None if geometry.contrast is None else geometry.contrast.variance_ratio,
        "spearman_rho": reports["importance"].spearman_rho,
        "top_fsus": reports["importance"].model_ranking[:5],
    }
    logging.info(f"Analysis summary: {summary}")
    return summary
