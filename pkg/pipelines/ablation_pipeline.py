from src.run_config import load_config, make_run_dir
from steps.analysis_step import analysis_step
from steps.data_ingestion_step import data_ingestion_step
from steps.data_splitter_step import data_splitter_step
from steps.model_building_step import model_building_step
from steps.model_evaluator_step import model_evaluator_step
from zenml import Model, pipeline

# Each variant switches off one component of the full model.
VARIANTS = {
    "full": {},
    "no_filter": {"pretrain.no_filter": True},
    "shared_embed": {"pretrain.shared_embed": True},
    "no_temporal": {"pretrain.no_temporal": True},
}


@pipeline(model=Model(name="flowsem_mae"))
def ablation_pipeline(config_path: str, spec: str = "timing_only", n_flows: int = 400, pcaps: list = None):
    """Pretrains and probes the full model and each ablation on the same split."""
    run_dir = str(make_run_dir(load_config(config_path), "ablation"))

    dataset_path = data_ingestion_step(config_path=config_path, run_dir=run_dir, pcaps=pcaps or [],
                                       spec=spec, n_flows=n_flows)
    train_path, test_path = data_splitter_step(config_path=config_path, run_dir=run_dir, dataset_path=dataset_path)

    pretrained, probed = {}, {}
    for name, overrides in VARIANTS.items():
        variant_dir = f"{run_dir}/{name}"
        pretrained[name] = model_building_step(config_path=config_path, run_dir=variant_dir, train_path=train_path,
                                               overrides=overrides, id=f"pretrain_{name}")
        _, probed[name] = model_evaluator_step(config_path=config_path, run_dir=variant_dir,
                                               ckpt_path=pretrained[name], train_path=train_path,
                                               test_path=test_path, id=f"probe_{name}")

    # Embedding geometry of the full model against the shared-embedding variant trained on the same split
    analysis_step(config_path=config_path, run_dir=f"{run_dir}/full", ckpt_path=probed["full"],
                  dataset_path=test_path, contrast_ckpt_path=pretrained["shared_embed"], id="analysis_full")
