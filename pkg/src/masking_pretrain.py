import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from src import autodiff as ad
from src.autodiff import Tape, make_rng
from src.errors import ConfigError, SchemaMismatch
from src.flow_dataset import DatasetFile, select_columns, zero_columns
from src.fsu_schema import FsuSchema, Predictability, default_schema
from src.model_building import FlowSemModel, Hyper
from src.optimizer import AdamW

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

TEMPORAL_COLUMNS = ("frame.time_delta", "frame.time_relative")
MAX_MASK_RETRIES = 16


@dataclass
class MaskPlan:
    m_packet: np.ndarray
    m_field: np.ndarray
    input_mask: np.ndarray
    forced: bool = False

    @property
    def targets(self) -> np.ndarray:
        """Every hidden valid cell is a reconstruction target."""
        return self.input_mask


@dataclass
class PretrainConfig:
    p_packet: float = 0.15
    p_field: float = 0.15
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 42
    d: int = 64
    L: int = 4
    h: int = 4
    no_filter: bool = False
    shared_embed: bool = False
    no_temporal: bool = False
    admit_nongeneralizable: bool = False

    def __post_init__(self):
        for name in ("p_packet", "p_field"):
            rate = getattr(self, name)
            if not 0.0 < rate < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    @property
    def admitted(self) -> set:
        admit = {Predictability.GENERALIZABLE}
        if self.no_filter:
            admit.add(Predictability.RANDOM)
        if self.admit_nongeneralizable:
            admit.add(Predictability.NON_GENERALIZABLE)
        return admit

    def flags(self) -> dict:
        return {
            "no_filter": self.no_filter,
            "shared_embed": self.shared_embed,
            "no_temporal": self.no_temporal,
            "admit_nongeneralizable": self.admit_nongeneralizable,
        }


@dataclass
class PretrainResult:
    model: FlowSemModel
    loss_curve: pd.DataFrame
    fsu_loss: pd.DataFrame
    columns: list
    flags: dict = field(default_factory=dict)


def sample_mask(valid: np.ndarray, n_fields: int, p_packet: float, p_field: float,
                rng: np.random.Generator, max_retries: int = MAX_MASK_RETRIES) -> MaskPlan:
    """
    Draws packet-level and field-level Bernoulli masks for one flow.

    A draw is redrawn when it hides nothing or hides every valid cell; after
    max_retries a single random field (or, with one field, one random valid packet)
    is hidden instead.
    """
    valid = np.asarray(valid, dtype=bool)
    T = valid.shape[0]
    n_valid_cells = int(valid.sum()) * n_fields
    for _ in range(max_retries):
        m_packet = rng.random(T) < p_packet
        m_field = rng.random(n_fields) < p_field
        input_mask = (m_packet[:, None] | m_field[None, :]) & valid[:, None]
        hidden = int(input_mask.sum())
        if 0 < hidden < n_valid_cells:
            return MaskPlan(m_packet, m_field, input_mask)

    m_packet = np.zeros(T, dtype=bool)
    m_field = np.zeros(n_fields, dtype=bool)
    if n_fields > 1:
        m_field[rng.integers(n_fields)] = True
    else:
        m_packet[rng.choice(np.flatnonzero(valid))] = True
    input_mask = (m_packet[:, None] | m_field[None, :]) & valid[:, None]
    logging.warning("Mask sampling exhausted its retries; forcing a single hidden field.")
    return MaskPlan(m_packet, m_field, input_mask, forced=True)


def pretrain_loss(X: np.ndarray, X_hat: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean squared reconstruction error over the target cells."""
    return ad.mse(X_hat, np.asarray(X, dtype=X_hat.data.dtype), np.asarray(targets, dtype=bool))


def model_view(dataset: DatasetFile, cfg: PretrainConfig, schema: Optional[FsuSchema] = None) -> DatasetFile:
    """Columns the model sees under the config's admitted classes, with temporal columns zeroed when asked."""
    schema = schema or default_schema()
    if dataset.schema_hash != schema.schema_hash:
        raise SchemaMismatch("Dataset was built with a different FSU schema")
    names = [d.name for d in schema.columns(cfg.admitted)]
    view = select_columns(dataset, names)
    if cfg.no_temporal:
        view = zero_columns(view, TEMPORAL_COLUMNS)
    return view


def batch_masks(valid: np.ndarray, flow_ids: np.ndarray, n_fields: int, cfg: PretrainConfig, epoch: int) -> np.ndarray:
    """Input masks for a batch; each flow draws from its own (seed, epoch, flow_id) stream."""
    masks = np.empty(valid.shape + (n_fields,), dtype=bool)
    for b, flow_id in enumerate(flow_ids):
        rng = make_rng(cfg.seed, epoch, int(flow_id))
        masks[b] = sample_mask(valid[b], n_fields, cfg.p_packet, cfg.p_field, rng).input_mask
    return masks


def pretrain(dataset: DatasetFile, cfg: PretrainConfig, schema: Optional[FsuSchema] = None,
             on_epoch: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """
    Masked-reconstruction pretraining.

    Parameters:
    dataset (DatasetFile): Flow tables; labels are ignored.
    cfg (PretrainConfig): Rates, optimizer settings, architecture and ablation flags.
    schema (FsuSchema): Catalog the dataset was built with.
    on_epoch (Callable): Called with (epoch, pooled epoch loss) after every epoch.

    Returns:
    PretrainResult: Trained model, per-epoch loss curve and the final epoch's per-FSU loss table.
    """
    view = model_view(dataset, cfg, schema)
    hyper = Hyper(d=cfg.d, L=cfg.L, h=cfg.h, T=view.T, N=view.N,
                  C=max(2, len(view.class_names)), shared_embed=cfg.shared_embed)
    model = FlowSemModel.init(cfg.seed, hyper)
    model.fit_input_scaling(view.values, view.valid)
    optimizer = AdamW(model.encoder_params(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    logging.info(f"Pretraining on {len(view)} flows, N={view.N}, flags={cfg.flags()}.")

    order_rng = make_rng(cfg.seed, 2)
    curve = []
    sse = np.zeros(view.N)
    counts = np.zeros(view.N, dtype=np.int64)
    for epoch in range(cfg.epochs):
        sse[:] = 0.0
        counts[:] = 0
        order = order_rng.permutation(len(view))
        for start in range(0, len(view), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            X, valid = view.values[idx], view.valid[idx]
            targets = batch_masks(valid, view.flow_ids[idx], view.N, cfg, epoch)
            with Tape() as tape:
                E = model.embed(X, valid, targets)
                X_hat = model.reconstruct(model.encode(E, valid))
                loss = pretrain_loss(X, X_hat, targets)
                tape.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            err = (X_hat.data.astype(np.float64) - X) ** 2 * targets
            sse += err.sum(axis=(0, 1))
            counts += targets.sum(axis=(0, 1))
        epoch_loss = float(sse.sum() / counts.sum())
        curve.append(epoch_loss)
        logging.info(f"Epoch {epoch + 1}/{cfg.epochs}: reconstruction loss {epoch_loss:.6f}")
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)

    loss_curve = pd.DataFrame({"epoch": np.arange(1, cfg.epochs + 1), "loss": curve})
    fsu_loss = pd.DataFrame({
        "fsu": view.column_names,
        "sse": sse,
        "count": counts,
        "mse": np.divide(sse, counts, out=np.zeros_like(sse), where=counts > 0),
    })
    logging.info("Pretraining completed.")
    return PretrainResult(model, loss_curve, fsu_loss, list(view.column_names), cfg.flags())
