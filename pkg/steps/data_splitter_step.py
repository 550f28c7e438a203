from typing import Annotated, Tuple

from src.run_config import load_config
from src.stages import run_split
from zenml import step


@step
def data_splitter_step(
    config_path: str, run_dir: str, dataset_path: str
) -> Tuple[Annotated[str, "train_path"], Annotated[str, "test_path"]]:
    """Splits the dataset file into stratified train and test files, using the configured ratios."""
    paths = run_split(load_config(config_path), dataset_path, run_dir)
    return paths["train"], paths["test"]
