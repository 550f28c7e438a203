import json
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import confusion_matrix
from statsmodels.stats.proportion import proportion_confint

from src import autodiff as ad
from src.autodiff import Tape, Tensor, make_rng
from src.data_splitter import nested_subset
from src.errors import EmptyMatrix, FlowSemError, SchemaMismatch, ShapeMismatch, UnlabeledData
from src.flow_dataset import DatasetFile, flow_means, select_columns, zero_columns
from src.masking_pretrain import TEMPORAL_COLUMNS
from src.model_building import FlowSemModel, encoder_digest
from src.optimizer import AdamW

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


@dataclass
class ProbeConfig:
    epochs: int = 50
    finetune_epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    macro_f1: float
    per_class: list
    confusion: list
    labeled_fraction: float = 1.0
    seed: int = 0
    class_names: list = field(default_factory=list)
    accuracy_ci: tuple = (0.0, 0.0)
    digest_before: Optional[str] = None
    digest_after: Optional[str] = None
    n_train: int = 0
    n_test: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def confusion_frame(self) -> pd.DataFrame:
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        return pd.DataFrame(self.confusion, index=names, columns=names)

    def to_text(self) -> str:
        lines = [
            f"protocol          {self.protocol}",
            f"labeled fraction  {self.labeled_fraction:.2f}",
            f"accuracy          {self.accuracy:.4f}  (95% CI {self.accuracy_ci[0]:.4f}-{self.accuracy_ci[1]:.4f})",
            f"macro F1          {self.macro_f1:.4f}",
            "",
            pd.DataFrame(self.per_class).to_string(index=False, float_format=lambda v: f"{v:.4f}"),
        ]
        return "\n".join(lines)


def metrics(confusion) -> tuple:
    """
    Accuracy, macro-F1 and a per-class table from a confusion matrix (rows = true class).

    Precision, recall and F1 use 0/0 := 0, so a class with no support and no
    predictions contributes F1 = 0 to the macro mean.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeMismatch(f"Confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("Confusion matrix entries must be nonnegative")
    total = cm.sum()
    if total == 0:
        raise EmptyMatrix("Confusion matrix has no samples")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    table = pd.DataFrame({
        "class": np.arange(cm.shape[0]),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": support.astype(int),
    })
    return float(tp.sum() / total), float(f1.mean()), table


def build_report(protocol: str, y_true, y_pred, n_classes: int, class_names=None, **extra) -> EvalReport:
    cm = confusion_matrix(y_true, y_pred, labels=list(range(n_classes)))
    accuracy, macro_f1, table = metrics(cm)
    if class_names:
        table["class"] = [class_names[i] for i in table["class"]]
    low, high = proportion_confint(int(np.trace(cm)), int(cm.sum()), alpha=0.05, method="wilson")
    return EvalReport(
        protocol=protocol,
        accuracy=accuracy,
        macro_f1=macro_f1,
        per_class=table.to_dict(orient="records"),
        confusion=cm.tolist(),
        class_names=list(class_names or []),
        accuracy_ci=(float(low), float(high)),
        n_test=int(cm.sum()),
        **extra,
    )


def apply_checkpoint_view(dataset: DatasetFile, header: dict, force: bool = False) -> DatasetFile:
    """Selects the checkpoint's columns and repeats its input ablations on a dataset."""
    if dataset.schema_hash.hex() != header["schema_hash"] and not force:
        raise SchemaMismatch("Dataset and checkpoint were built with different FSU schemas")
    view = select_columns(dataset, header["columns"])
    if header.get("flags", {}).get("no_temporal"):
        view = zero_columns(view, TEMPORAL_COLUMNS)
    return view


def _require_labels(*datasets: DatasetFile):
    for ds in datasets:
        if not ds.labeled:
            raise UnlabeledData("Evaluation needs every flow to carry a label")


def _n_classes(train: DatasetFile, test: DatasetFile) -> int:
    return max(len(train.class_names), int(train.labels.max()) + 1, int(test.labels.max()) + 1)


def representations(model: FlowSemModel, dataset: DatasetFile, batch_size: int = 64) -> np.ndarray:
    """Pooled flow representations z[R, d]; no tape, so nothing is recorded or updated."""
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.represent(dataset.values[sl], dataset.valid[sl]).data)
    return np.concatenate(out, axis=0)


def _predict_head(model: FlowSemModel, Z: np.ndarray) -> np.ndarray:
    return model.head(Tensor(Z)).data.argmax(axis=-1)


# Abstract Base Class for Model Evaluation Strategy
# -------------------------------------------------
# A strategy trains a classification head (and possibly the encoder) on a labeled
# training set and reports on a test set.
class ModelEvaluationStrategy(ABC):
    @abstractmethod
    def evaluate_model(self, model: FlowSemModel, train: DatasetFile, test: DatasetFile, cfg: ProbeConfig) -> EvalReport:
        pass


# Concrete Strategy for frozen-encoder probing
# --------------------------------------------
# Representations are computed once; only the head's parameters ever change.
class FrozenProbeStrategy(ModelEvaluationStrategy):
    def evaluate_model(self, model, train, test, cfg):
        _require_labels(train, test)
        n_classes = _n_classes(train, test)
        before = encoder_digest(model)
        model.reset_head(n_classes, cfg.seed)
        model.freeze_encoder(True)
        try:
            Z_train = representations(model, train)
            Z_test = representations(model, test)
            model.fit_head_scaling(Z_train)
            optimizer = AdamW(model.head_params(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
            rng = make_rng(cfg.seed, 3)
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(train))
                for start in range(0, len(train), cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    with Tape() as tape:
                        loss = ad.cross_entropy(model.head(Tensor(Z_train[idx])), train.labels[idx])
                        tape.backward(loss)
                    optimizer.step()
                    optimizer.zero_grad()
            predictions = _predict_head(model, Z_test)
        finally:
            model.freeze_encoder(False)
        after = encoder_digest(model)
        if before != after:
            raise FlowSemError("Encoder weights changed during frozen probing")
        logging.info(f"Frozen probe finished after {cfg.epochs} epochs.")
        return build_report("frozen", test.labels, predictions, n_classes, test.class_names or train.class_names,
                            seed=cfg.seed, digest_before=before, digest_after=after, n_train=len(train))


# Concrete Strategy for full fine-tuning
class FineTuneStrategy(ModelEvaluationStrategy):
    def evaluate_model(self, model, train, test, cfg):
        _require_labels(train, test)
        n_classes = _n_classes(train, test)
        before = encoder_digest(model)
        model.reset_head(n_classes, cfg.seed)
        model.fit_head_scaling(representations(model, train))
        optimizer = AdamW(model.trainable_params(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        rng = make_rng(cfg.seed, 4)
        for epoch in range(cfg.finetune_epochs):
            order = rng.permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                with Tape() as tape:
                    z = model.represent(train.values[idx], train.valid[idx])
                    loss = ad.cross_entropy(model.head(z), train.labels[idx])
                    tape.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
            logging.info(f"Fine-tune epoch {epoch + 1}/{cfg.finetune_epochs}: loss {float(loss.data):.4f}")
        predictions = _predict_head(model, representations(model, test))
        return build_report("unfrozen", test.labels, predictions, n_classes, test.class_names or train.class_names,
                            seed=cfg.seed, digest_before=before, digest_after=encoder_digest(model),
                            n_train=len(train))


# Context Class for Model Evaluation
# ----------------------------------
class ModelEvaluator:
    def __init__(self, strategy: ModelEvaluationStrategy):
        self._strategy = strategy

    def set_strategy(self, strategy: ModelEvaluationStrategy):
        logging.info("Switching model evaluation strategy.")
        self._strategy = strategy

    def evaluate(self, model, train, test, cfg: ProbeConfig) -> EvalReport:
        logging.info("Evaluating the model using the selected strategy.")
        report = self._strategy.evaluate_model(model, train, test, cfg)
        logging.info(f"Evaluation: accuracy={report.accuracy:.4f}, macro_f1={report.macro_f1:.4f}")
        return report


def probe_frozen(model, train, test, cfg: Optional[ProbeConfig] = None) -> EvalReport:
    return ModelEvaluator(FrozenProbeStrategy()).evaluate(model, train, test, cfg or ProbeConfig())


def finetune(model, train, test, cfg: Optional[ProbeConfig] = None) -> EvalReport:
    return ModelEvaluator(FineTuneStrategy()).evaluate(model, train, test, cfg or ProbeConfig())


def label_efficiency(model, train, test, fractions, cfg: Optional[ProbeConfig] = None) -> list:
    """One frozen-probe report per labeled fraction, on nested stratified training subsets."""
    cfg = cfg or ProbeConfig()
    reports = []
    for fraction in sorted(fractions):
        subset = nested_subset(train, fraction, cfg.seed)
        report = probe_frozen(model, subset, test, cfg)
        report.labeled_fraction = float(fraction)
        reports.append(report)
    return reports


def logistic_oracle(train: DatasetFile, test: DatasetFile, seed: int = 42) -> EvalReport:
    """Separability baseline: logistic regression on per-flow column means."""
    _require_labels(train, test)
    n_classes = _n_classes(train, test)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(flow_means(train).to_numpy(), train.labels)
    predictions = clf.predict(flow_means(test).to_numpy())
    return build_report("logistic_oracle", test.labels, predictions, n_classes,
                        test.class_names or train.class_names, seed=seed, n_train=len(train))


def majority_baseline(train: DatasetFile, test: DatasetFile) -> EvalReport:
    """Predicts the most frequent training class for every test flow."""
    _require_labels(train, test)
    n_classes = _n_classes(train, test)
    majority = int(np.bincount(train.labels, minlength=n_classes).argmax())
    predictions = np.full(len(test), majority)
    return build_report("majority", test.labels, predictions, n_classes,
                        test.class_names or train.class_names, n_train=len(train))
