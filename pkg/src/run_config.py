import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConfigError
from src.fsu_schema import FsuSchema, Predictability, default_schema, load_schema
from src.masking_pretrain import PretrainConfig
from src.model_evaluator import ProbeConfig

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

SEED_ENV = "FLOWSEM_SEED"
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "flowsem.yaml"

PredictabilityName = Literal["generalizable", "random", "non_generalizable"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IngestSection(_Section):
    salt: int = 0x5EED
    drop_udp_ports: Dict[int, str] = Field(default_factory=lambda: {53: "dns", 67: "dhcp", 68: "dhcp"})
    workers: int = 1
    max_flows: Optional[int] = None
    max_packets: Optional[int] = None
    label_by_dir: bool = False

    @field_validator("workers")
    @classmethod
    def _positive_workers(cls, v):
        if v < 1:
            raise ValueError("workers must be at least 1")
        return v


class SchemaSection(_Section):
    path: Optional[str] = None


class DatasetSection(_Section):
    T: int = 10
    split: List[float] = Field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: Optional[int] = None
    # columns written to dataset files; stages select their own view by name
    admit: List[PredictabilityName] = Field(default_factory=lambda: ["generalizable", "random", "non_generalizable"])

    @field_validator("T")
    @classmethod
    def _positive_t(cls, v):
        if v < 1:
            raise ValueError("T must be at least 1")
        return v

    @field_validator("split")
    @classmethod
    def _ratios(cls, v):
        if len(v) < 2 or any(r <= 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split ratios must be positive and sum to 1")
        return v


class ModelSection(_Section):
    d: int = 64
    L: int = 4
    h: int = 4


class PretrainSection(_Section):
    p_packet: float = 0.15
    p_field: float = 0.15
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_filter: bool = False
    shared_embed: bool = False
    no_temporal: bool = False
    admit_nongeneralizable: bool = False


class ProbeSection(_Section):
    epochs: int = 50
    finetune_epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    label_fractions: List[float] = Field(default_factory=lambda: [1.0])
    unfrozen: bool = False

    @field_validator("label_fractions")
    @classmethod
    def _fractions(cls, v):
        if not v or any(not 0.0 < f <= 1.0 for f in v):
            raise ValueError("label fractions must lie in (0, 1]")
        return v


class AnalysisSection(_Section):
    sample_n: int = 1000
    attribution: Literal["saliency", "input_x_gradient"] = "saliency"
    forest_estimators: int = 100
    forest_depth: int = 4
    contrast: bool = True


class RunConfig(_Section):
    """Every knob of every stage; the YAML snapshot of one of these reproduces a run."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    seed: int = 42
    run_root: str = "runs"
    ingest: IngestSection = Field(default_factory=IngestSection)
    schema_: SchemaSection = Field(default_factory=SchemaSection, alias="schema")
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)

    @property
    def split_seed(self) -> int:
        return self.seed if self.dataset.split_seed is None else self.dataset.split_seed

    @property
    def dataset_admit(self) -> set:
        return {Predictability(name) for name in self.dataset.admit}

    def fsu_schema(self) -> FsuSchema:
        return load_schema(self.schema_.path) if self.schema_.path else default_schema()

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(
            p_packet=p.p_packet,
            p_field=p.p_field,
            epochs=p.epochs,
            batch_size=p.batch_size,
            lr=p.lr,
            betas=tuple(p.betas),
            eps=p.eps,
            weight_decay=p.weight_decay,
            seed=self.seed,
            d=self.model.d,
            L=self.model.L,
            h=self.model.h,
            no_filter=p.no_filter,
            shared_embed=p.shared_embed,
            no_temporal=p.no_temporal,
            admit_nongeneralizable=p.admit_nongeneralizable,
        )

    def probe_config(self) -> ProbeConfig:
        p = self.probe
        return ProbeConfig(
            epochs=p.epochs,
            finetune_epochs=p.finetune_epochs,
            lr=p.lr,
            batch_size=p.batch_size,
            weight_decay=p.weight_decay,
            seed=self.seed,
        )

    def snapshot(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def _apply_override(document: dict, dotted: str, value: Any):
    node = document
    *parents, leaf = dotted.split(".")
    for key in parents:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot override '{dotted}': '{key}' is not a section")
        node = child
    node[leaf] = value


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    """
    Resolves a RunConfig.

    Parameters:
    path: YAML file; the built-in defaults when None.
    overrides (dict): Dotted keys (e.g. "pretrain.epochs") set on top of the file; None values are ignored.
    environ (Mapping): Environment consulted for FLOWSEM_SEED, os.environ by default.

    Returns:
    RunConfig: The validated configuration.
    """
    document = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                document = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"Config {path} is not valid YAML: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"Config {path} must be a mapping")

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _apply_override(document, dotted, value)

    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            document["seed"] = int(environ[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from e

    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def make_run_dir(cfg: RunConfig, command: str, run_dir=None) -> Path:
    """Creates <run_root>/<command>-<UTC timestamp> (or run_dir) and writes the resolved config into it."""
    if run_dir is None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        run_dir = Path(cfg.run_root) / f"{command}-{stamp}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(cfg.snapshot(), f, sort_keys=False)
    logging.info(f"Run directory: {run_dir}")
    return run_dir
