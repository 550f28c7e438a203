import logging

from src.run_config import load_config
from src.stages import run_extract, run_synth, write_json
from zenml import step


@step(enable_cache=False)
def data_ingestion_step(config_path: str, run_dir: str, pcaps: list, spec: str, n_flows: int) -> str:
    """
    Builds the dataset file of a pipeline run.

    Parameters:
    config_path (str): Run configuration YAML.
    run_dir (str): Directory every stage of the run writes to.
    pcaps (list): Captures to extract; when empty the synthetic spec is used instead.
    spec (str): Bundled synthetic spec name or YAML path.
    n_flows (int): Number of synthetic flows.

    Returns:
    str: Path of the dataset file.
    """
    cfg = load_config(config_path)
    out = f"{run_dir}/dataset.fsu"
    if pcaps:
        logging.info(f"Extracting {len(pcaps)} capture inputs.")
        write_json(run_extract(cfg, pcaps, out), f"{run_dir}/extract_report.json")
    else:
        logging.info(f"Synthesizing {n_flows} flows from spec '{spec}'.")
        run_synth(cfg, spec, n_flows, out)
    return out
