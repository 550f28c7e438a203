import logging
import math
from abc import ABC, abstractmethod

import numpy as np

from src.errors import ClassTooSmall, ConfigError
from src.flow_dataset import DatasetFile

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


def _groups(dataset: DatasetFile) -> list:
    """Record indices grouped by label, in ascending label order; one group when unlabeled."""
    if not dataset.labeled:
        return [np.arange(len(dataset))]
    return [np.flatnonzero(dataset.labels == c) for c in np.unique(dataset.labels)]


def _check_ratios(ratios) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if not ratios or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"Split ratios must be positive and sum to 1, got {ratios}")
    return ratios


# Abstract Base Class for Data Splitting Strategy
# -----------------------------------------------
# A strategy turns one dataset into train/validation/test datasets.
class DataSplittingStrategy(ABC):
    @abstractmethod
    def split_data(self, dataset: DatasetFile) -> tuple:
        """
        Splits a dataset.

        Parameters:
        dataset (DatasetFile): The flow tables to split.

        Returns:
        tuple: One DatasetFile per split, records in original order.
        """
        pass


# Concrete Strategy for a seeded split, stratified by label when labels are present
# ---------------------------------------------------------------------------------
class StratifiedSplitStrategy(DataSplittingStrategy):
    def __init__(self, ratios=(0.8, 0.1, 0.1), seed: int = 42):
        self.ratios = _check_ratios(ratios)
        self.seed = seed

    def split_data(self, dataset: DatasetFile) -> tuple:
        logging.info(f"Performing stratified split with ratios {self.ratios} and seed {self.seed}.")
        rng = np.random.default_rng(self.seed)
        k = len(self.ratios)
        parts = [[] for _ in range(k)]
        for group in _groups(dataset):
            n = len(group)
            if n < k:
                raise ClassTooSmall(f"A class with {n} flows cannot fill {k} splits")
            permuted = group[rng.permutation(n)]
            # every split but the first gets round(r * n), at least one; the first takes the rest
            sizes = [max(1, round(r * n)) for r in self.ratios[1:]]
            first = n - sum(sizes)
            if first < 1:
                raise ClassTooSmall(f"A class with {n} flows leaves no training flows")
            bounds = np.cumsum([first] + sizes)[:-1]
            for i, chunk in enumerate(np.split(permuted, bounds)):
                parts[i].append(chunk)

        splits = tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)
        logging.info(f"Split completed: sizes {[len(s) for s in splits]}.")
        return splits


# Context Class for Data Splitting
# --------------------------------
class DataSplitter:
    def __init__(self, strategy: DataSplittingStrategy):
        self._strategy = strategy

    def set_strategy(self, strategy: DataSplittingStrategy):
        logging.info("Switching data splitting strategy.")
        self._strategy = strategy

    def split(self, dataset: DatasetFile) -> tuple:
        logging.info("Splitting data using the selected strategy.")
        return self._strategy.split_data(dataset)


def split(dataset: DatasetFile, ratios=(0.8, 0.1, 0.1), seed: int = 42) -> tuple:
    return DataSplitter(StratifiedSplitStrategy(ratios, seed)).split(dataset)


def nested_subset(dataset: DatasetFile, fraction: float, seed: int = 42) -> DatasetFile:
    """
    Stratified label-fraction subset.

    For one seed, the subset at a smaller fraction is contained in the subset at any
    larger fraction: each class contributes a prefix of one seeded permutation.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"Label fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    rng = np.random.default_rng(seed)
    keep = []
    for group in _groups(dataset):
        permuted = group[rng.permutation(len(group))]
        keep.append(permuted[: max(1, math.ceil(fraction * len(group) - 1e-9))])
    subset = dataset.subset(np.sort(np.concatenate(keep)))
    logging.info(f"Label fraction {fraction}: kept {len(subset)} of {len(dataset)} flows.")
    return subset
