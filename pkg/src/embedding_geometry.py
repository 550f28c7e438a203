import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import pandas as pd
from sklearn.metrics import pairwise_distances

from src.autodiff import make_rng
from src.errors import InsufficientSamples, ShapeMismatch
from src.flow_dataset import DatasetFile
from src.model_building import FlowSemModel, Hyper

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

MIN_SAMPLES = 100
VARIANCE_FLOOR = 1e-12


@dataclass
class GeometryReport:
    mode: str
    fsu_names: list
    centroids: np.ndarray
    inter_distance: np.ndarray
    intra_variance: np.ndarray
    variance_ratio: float
    contrast: Optional["GeometryReport"] = field(default=None, repr=False)

    def distance_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.inter_distance, index=self.fsu_names, columns=self.fsu_names)

    def variance_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fsu": self.fsu_names, "intra_variance": self.intra_variance})

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "fsu_names": list(self.fsu_names),
            "intra_variance": self.intra_variance.tolist(),
            "inter_distance": self.inter_distance.tolist(),
            "variance_ratio": self.variance_ratio,
        }
        if self.contrast is not None:
            out["contrast"] = self.contrast.to_dict()
        return out


def variance_ratio(intra_variance: np.ndarray) -> float:
    """max/min intra-FSU variance over FSUs whose variance is not numerically zero."""
    live = intra_variance[intra_variance > VARIANCE_FLOOR]
    if len(live) < 2:
        return 1.0
    return float(live.max() / live.min())


def geometry_of(embeddings: np.ndarray, fsu_names: list, mode: str) -> GeometryReport:
    """Centroids, pairwise centroid distances and intra-FSU variance of E[S, N, d]."""
    E = embeddings.astype(np.float64)
    centroids = E.mean(axis=0)
    intra = ((E - centroids[None]) ** 2).sum(axis=-1).mean(axis=0)
    inter = pairwise_distances(centroids, metric="euclidean")
    inter = (inter + inter.T) / 2.0
    np.fill_diagonal(inter, 0.0)
    return GeometryReport(mode, list(fsu_names), centroids, inter, intra, variance_ratio(intra))


def sample_rows(dataset: DatasetFile, sample_n: int, seed: int) -> np.ndarray:
    """sample_n valid packet rows [sample_n, N] drawn without replacement."""
    if sample_n < MIN_SAMPLES:
        raise InsufficientSamples(f"sample_n must be at least {MIN_SAMPLES}, got {sample_n}")
    rows = dataset.values[dataset.valid]
    if len(rows) < sample_n:
        raise InsufficientSamples(f"Only {len(rows)} valid packets available, {sample_n} requested")
    pick = np.sort(make_rng(seed, 5).choice(len(rows), size=sample_n, replace=False))
    return rows[pick]


def _mode(model: FlowSemModel) -> str:
    return "shared" if model.hyper.shared_embed else "fsu_specific"


def shared_twin(model: FlowSemModel, seed: int) -> FlowSemModel:
    """Freshly initialized shared-embedding model with the same architecture."""
    hyper = Hyper(d=model.hyper.d, L=model.hyper.L, h=model.hyper.h, T=model.hyper.T,
                  N=model.hyper.N, C=model.hyper.C, shared_embed=True)
    return FlowSemModel.init(seed, hyper)


def embedding_geometry(model: FlowSemModel, dataset: DatasetFile, sample_n: int = 1000, seed: int = 42,
                       contrast: Union[bool, FlowSemModel] = True) -> GeometryReport:
    """
    Geometry of the value embeddings E_k(x), positional terms excluded.

    contrast=True adds the same measurement, on the same sampled cells, for a freshly
    initialized shared-embedding twin; a model passed as contrast (typically the
    shared-embedding variant pretrained on the same corpus) is measured instead.
    """
    logging.info(f"Measuring embedding geometry over {sample_n} packets.")
    rows = sample_rows(dataset, sample_n, seed)
    report = geometry_of(model.value_embeddings(rows).data, dataset.column_names, _mode(model))
    if isinstance(contrast, FlowSemModel):
        other = contrast
    elif contrast:
        other = shared_twin(model, seed)
    else:
        other = None
    if other is not None:
        if other.hyper.N != model.hyper.N:
            raise ShapeMismatch(f"Contrast model has {other.hyper.N} FSU columns, model has {model.hyper.N}")
        report.contrast = geometry_of(other.value_embeddings(rows).data, dataset.column_names, _mode(other))
        logging.info(f"Variance ratio ({report.contrast.mode} contrast): {report.contrast.variance_ratio:.3f}")
    logging.info(f"Variance ratio ({report.mode}): {report.variance_ratio:.3f}")
    return report
