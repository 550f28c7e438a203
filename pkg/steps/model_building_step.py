import logging
from pathlib import Path
from typing import Annotated

import mlflow
from src.run_config import load_config
from src.stages import run_pretrain
from zenml import ArtifactConfig, Model, step
from zenml.client import Client

# Get the active experiment tracker from ZenML
experiment_tracker = Client().active_stack.experiment_tracker

model = Model(
    name="flowsem_mae",
    version=None,
    license="Apache 2.0",
    description="Masked-autoencoder encoder of protocol-field flow tables.",
)


@step(
    enable_cache=False,
    experiment_tracker=experiment_tracker.name if experiment_tracker else None,
    model=model,
)
def model_building_step(
    config_path: str, run_dir: str, train_path: str, overrides: dict
) -> Annotated[str, ArtifactConfig(name="flowsem_checkpoint", is_model_artifact=True)]:
    """
    Pretrains the encoder by masked reconstruction and logs the run to MLflow.

    Parameters:
    config_path (str): Run configuration YAML.
    run_dir (str): Directory for the checkpoint and loss tables.
    train_path (str): Training dataset file.
    overrides (dict): Dotted config keys, e.g. {"pretrain.no_temporal": True} for an ablation.

    Returns:
    str: Path of the written checkpoint.
    """
    cfg = load_config(config_path, overrides)
    out_dir = Path(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = str(out_dir / "model.ckpt")

    # Start an MLflow run to log the pretraining process
    if not mlflow.active_run():
        mlflow.start_run()  # Start a new MLflow run if there isn't one active

    try:
        mlflow.log_params({"seed": cfg.seed, **{f"pretrain.{k}": v for k, v in cfg.pretrain.model_dump().items()},
                           **{f"model.{k}": v for k, v in cfg.model.model_dump().items()}})

        def on_epoch(epoch: int, loss: float):
            mlflow.log_metric("reconstruction_loss", loss, step=epoch)

        logging.info("Pretraining the encoder.")
        result = run_pretrain(cfg, train_path, ckpt_path, out_dir, on_epoch)
        logging.info("Pretraining completed.")
        mlflow.log_artifact(str(out_dir / "loss_curve.csv"))
        mlflow.log_artifact(str(out_dir / "fsu_loss.csv"))
        logging.info(f"Model columns: {result.columns}")

    except Exception as e:
        logging.error(f"Error during pretraining: {e}")
        raise e

    finally:
        # End the MLflow run
        mlflow.end_run()

    return ckpt_path
