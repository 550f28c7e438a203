from src.run_config import load_config, make_run_dir
from steps.analysis_step import analysis_step
from steps.data_ingestion_step import data_ingestion_step
from steps.data_splitter_step import data_splitter_step
from steps.model_building_step import model_building_step
from steps.model_evaluator_step import model_evaluator_step
from zenml import Model, pipeline


@pipeline(
    model=Model(
        # The name uniquely identifies this model
        name="flowsem_mae"
    ),
)
def flowsem_pipeline(config_path: str, spec: str = "two_class", n_flows: int = 400, pcaps: list = None):
    """Define an end-to-end pretraining and evaluation pipeline."""
    run_dir = str(make_run_dir(load_config(config_path), "pipeline"))

    # Data Ingestion Step
    dataset_path = data_ingestion_step(config_path=config_path, run_dir=run_dir, pcaps=pcaps or [],
                                       spec=spec, n_flows=n_flows)

    # Data Splitting Step
    train_path, test_path = data_splitter_step(config_path=config_path, run_dir=run_dir, dataset_path=dataset_path)

    # Pretraining Step
    ckpt_path = model_building_step(config_path=config_path, run_dir=run_dir, train_path=train_path, overrides={})

    # Frozen Probe Step
    eval_report, probe_ckpt = model_evaluator_step(
        config_path=config_path, run_dir=run_dir, ckpt_path=ckpt_path, train_path=train_path, test_path=test_path
    )

    # Analysis Step
    analysis_step(config_path=config_path, run_dir=run_dir, ckpt_path=probe_ckpt, dataset_path=test_path)

    return eval_report
