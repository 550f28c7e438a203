import logging
from typing import Annotated, Tuple

import mlflow
from src.run_config import load_config
from src.stages import run_probe
from zenml import step


@step(enable_cache=False)
def model_evaluator_step(
    config_path: str, run_dir: str, ckpt_path: str, train_path: str, test_path: str
) -> Tuple[Annotated[dict, "eval_report"], Annotated[str, "probe_checkpoint"]]:
    """
    Frozen-encoder probing of a checkpoint.

    Parameters:
    config_path (str): Run configuration YAML.
    run_dir (str): Directory of the run; reports land next to the checkpoint.
    ckpt_path (str): Pretrained checkpoint.
    train_path (str): Labeled training set.
    test_path (str): Labeled test set.

    Returns:
    dict: The EvalReport of the largest labeled fraction.
    str: Path of the checkpoint carrying the trained head.
    """
    reports = run_probe(load_config(config_path), ckpt_path, train_path, test_path, run_dir)

    # Ensure that the evaluation produced reports
    if not reports:
        raise ValueError("Probing must produce at least one report.")
    for report in reports:
        logging.info(f"Fraction {report.labeled_fraction:g}: accuracy {report.accuracy:.4f}")
        if mlflow.active_run():
            mlflow.log_metric(f"accuracy_{report.labeled_fraction:g}", report.accuracy)
            mlflow.log_metric(f"macro_f1_{report.labeled_fraction:g}", report.macro_f1)
    return reports[-1].to_dict(), f"{run_dir}/probe.ckpt"
