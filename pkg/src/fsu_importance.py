import logging
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier

from src import autodiff as ad
from src.autodiff import Tape, Tensor
from src.errors import LengthMismatch, UnlabeledData
from src.flow_dataset import DatasetFile, flow_means
from src.model_building import FlowSemModel

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


def _normalized(scores: np.ndarray) -> np.ndarray:
    scores = np.clip(np.asarray(scores, dtype=np.float64), 0.0, None)
    total = scores.sum()
    if total <= 0.0:
        return np.full(len(scores), 1.0 / len(scores))
    return scores / total


# Abstract Base Class for Attribution Strategy
# --------------------------------------------
# Turns the input gradient of the true-class logit into per-cell scores, and weighs
# the per-FSU totals.
class AttributionStrategy(ABC):
    @abstractmethod
    def score(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        pass

    def column_weights(self, dataset: DatasetFile) -> np.ndarray:
        return np.ones(dataset.N)


# Gradient magnitude per one standard deviation of the column over the valid cells;
# a column that never varies scores zero.
class SaliencyAttribution(AttributionStrategy):
    def score(self, x, grad):
        return np.abs(grad)

    def column_weights(self, dataset):
        return dataset.values[dataset.valid].astype(np.float64).std(axis=0)


class InputXGradientAttribution(AttributionStrategy):
    def score(self, x, grad):
        return np.abs(x * grad)


ATTRIBUTIONS = {"saliency": SaliencyAttribution, "input_x_gradient": InputXGradientAttribution}


def fsu_importance(model: FlowSemModel, dataset: DatasetFile, mode: str = "saliency", batch_size: int = 64) -> np.ndarray:
    """
    Mean over flows of the summed per-packet attribution of each FSU, weighted by the
    strategy's column weights and normalized to sum 1.

    The attribution is taken on the logit of each flow's true class, at valid packets only.
    """
    if not dataset.labeled:
        raise UnlabeledData("FSU importance needs labeled flows")
    strategy = ATTRIBUTIONS[mode]()
    totals = np.zeros(dataset.N)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        X, valid, labels = dataset.values[sl], dataset.valid[sl], dataset.labels[sl]
        x = Tensor(X, requires_grad=True)
        one_hot = np.zeros((len(labels), model.hyper.C), dtype=x.data.dtype)
        one_hot[np.arange(len(labels)), labels] = 1.0
        with Tape() as tape:
            H = model.encode(model.embed(x, valid, np.zeros(X.shape, dtype=bool)), valid)
            true_logit = ad.sum(ad.mul(model.classify(H, valid), Tensor(one_hot)))
            tape.backward(true_logit)
        scores = strategy.score(X, x.grad) * valid[:, :, None]
        totals += scores.sum(axis=(0, 1))
    # the forward pass records gradients into parameters too
    for tensor in model.params.values():
        tensor.grad = None
    return _normalized(totals / len(dataset) * strategy.column_weights(dataset))


def oracle_importance(dataset: DatasetFile, seed: int = 42, n_estimators: int = 100, max_depth: int = 4) -> np.ndarray:
    """Gini importance of a seeded random forest fit on per-flow column means."""
    if not dataset.labeled:
        raise UnlabeledData("Oracle importance needs labeled flows")
    forest = RandomForestClassifier(n_estimators=n_estimators, max_depth=max_depth, random_state=seed)
    forest.fit(flow_means(dataset).to_numpy(), dataset.labels)
    return _normalized(forest.feature_importances_)


def spearman(a, b) -> float:
    """Pearson correlation of average (tie-aware) ranks."""
    a, b = pd.Series(np.asarray(a, dtype=np.float64)), pd.Series(np.asarray(b, dtype=np.float64))
    if len(a) != len(b) or len(a) < 3:
        raise LengthMismatch(f"spearman needs equal lengths of at least 3, got {len(a)} and {len(b)}")
    ra, rb = a.rank(method="average").to_numpy(), b.rank(method="average").to_numpy()
    ra, rb = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0.0:
        warnings.warn("spearman of a constant input is undefined; returning 0.0")
        return 0.0
    return float((ra * rb).sum() / denom)


@dataclass
class ImportanceReport:
    fsu_names: list
    model_importance: np.ndarray
    oracle_importance: np.ndarray
    spearman_rho: float
    mode: str = "saliency"

    @property
    def model_ranking(self) -> list:
        return [self.fsu_names[i] for i in np.argsort(-self.model_importance, kind="stable")]

    @property
    def oracle_ranking(self) -> list:
        return [self.fsu_names[i] for i in np.argsort(-self.oracle_importance, kind="stable")]

    def ranked_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "fsu": self.fsu_names,
            "model_importance": self.model_importance,
            "oracle_importance": self.oracle_importance,
        })
        frame["model_rank"] = frame["model_importance"].rank(ascending=False, method="min").astype(int)
        frame["oracle_rank"] = frame["oracle_importance"].rank(ascending=False, method="min").astype(int)
        return frame.sort_values("model_rank", kind="stable").reset_index(drop=True)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "spearman_rho": self.spearman_rho,
            "model_importance": dict(zip(self.fsu_names, self.model_importance.tolist())),
            "oracle_importance": dict(zip(self.fsu_names, self.oracle_importance.tolist())),
            "model_ranking": self.model_ranking,
            "oracle_ranking": self.oracle_ranking,
        }


def importance_report(model: FlowSemModel, dataset: DatasetFile, mode: str = "saliency", seed: int = 42,
                      n_estimators: int = 100, max_depth: int = 4) -> ImportanceReport:
    logging.info(f"Computing FSU importance ({mode}) and forest oracle.")
    model_scores = fsu_importance(model, dataset, mode)
    oracle_scores = oracle_importance(dataset, seed, n_estimators, max_depth)
    rho = spearman(model_scores, oracle_scores)
    logging.info(f"Spearman correlation between model and oracle importance: {rho:.3f}")
    return ImportanceReport(list(dataset.column_names), model_scores, oracle_scores, rho, mode)
