"""Stage runners shared by the command line and the pipeline steps.

Each runner reads its inputs from files, calls the library, and writes its outputs
(dataset files, checkpoints, JSON reports, CSV tables) into a directory.
"""

import json
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from src.capture_ingest import IngestReport, ingest_captures
from src.data_splitter import nested_subset, split
from src.embedding_geometry import embedding_geometry
from src.errors import EmptyFlow, SchemaMismatch
from src.flow_dataset import read_dataset, tables_from_flows, write_dataset
from src.fsu_importance import importance_report
from src.fsu_schema import CLAMP_COUNTS
from src.masking_pretrain import PretrainResult, pretrain
from src.model_building import load_checkpoint, save_checkpoint
from src.model_evaluator import apply_checkpoint_view, finetune, label_efficiency, probe_frozen
from src.run_config import RunConfig
from src.synth_corpus import load_synth_spec, synth_corpus

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

CAPTURE_SUFFIXES = {".pcap", ".pcapng", ".cap"}
SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "val", "test")}


def write_json(payload: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def collect_inputs(inputs) -> list:
    """Capture files named directly, plus every capture under the named directories, in sorted order."""
    paths = []
    for item in inputs:
        item = Path(item)
        if item.is_dir():
            paths.extend(sorted(p for p in item.rglob("*") if p.is_file() and p.suffix.lower() in CAPTURE_SUFFIXES))
        else:
            paths.append(item)
    return paths


def run_extract(cfg: RunConfig, inputs, out_path) -> dict:
    """
    Captures -> flows -> dataset file.

    Returns:
    dict: The extraction report (ingest counters, truncation statistics, clamp counts).
    """
    paths = collect_inputs(inputs)
    ingest = cfg.ingest
    if ingest.label_by_dir:
        class_names = sorted({p.parent.name for p in paths})
        groups = [(label, [p for p in paths if p.parent.name == name]) for label, name in enumerate(class_names)]
    else:
        class_names = []
        groups = [(None, paths)]

    flows, labels, report = [], [], IngestReport()
    for label, group in groups:
        group_flows, group_report = ingest_captures(
            group, ingest.salt, ingest.drop_udp_ports, ingest.workers, ingest.max_packets
        )
        flows.extend(group_flows)
        labels.extend([label] * len(group_flows))
        report = report.merge(group_report)
    for flow_id, flow in enumerate(flows):
        flow.flow_id = flow_id
    if ingest.max_flows is not None:
        flows, labels = flows[: ingest.max_flows], labels[: ingest.max_flows]
    if not flows:
        raise EmptyFlow("No flows survived protocol filtering")

    T = cfg.dataset.T
    CLAMP_COUNTS.reset()
    dataset = tables_from_flows(
        flows, cfg.fsu_schema(), T, cfg.dataset_admit, labels if ingest.label_by_dir else None, class_names
    )
    write_dataset(dataset, out_path)

    lengths = np.array([len(flow.packets) for flow in flows])
    summary = {
        **report.to_dict(),
        "flows_written": len(dataset),
        "truncated_flows": int((lengths > T).sum()),
        "padded_flows": int((lengths < T).sum()),
        "mean_packets_per_flow": float(lengths.mean()),
        "clamped": CLAMP_COUNTS.snapshot(),
        "class_names": class_names,
    }
    logging.info(f"Extraction completed: {summary['flows_written']} flows written to {out_path}.")
    return summary


def run_synth(cfg: RunConfig, spec_name: str, n_flows: int, out_path, pcap_path=None):
    spec = load_synth_spec(spec_name)
    dataset = synth_corpus(spec, n_flows, cfg.seed, cfg.dataset.T, cfg.fsu_schema(), cfg.dataset_admit, pcap_path)
    write_dataset(dataset, out_path)
    return dataset


def run_split(cfg: RunConfig, data_path, out_dir) -> dict:
    """Stratified split of a dataset file; returns {split name: path}."""
    parts = split(read_dataset(data_path), tuple(cfg.dataset.split), cfg.split_seed)
    names = SPLIT_NAMES.get(len(parts), tuple(f"split{i}" for i in range(len(parts))))
    out = {}
    for name, part in zip(names, parts):
        out[name] = str(Path(out_dir) / f"{name}.fsu")
        write_dataset(part, out[name])
    return out


def run_pretrain(cfg: RunConfig, data_path, ckpt_path, out_dir,
                 on_epoch: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    schema = cfg.fsu_schema()
    result = pretrain(read_dataset(data_path), cfg.pretrain_config(), schema, on_epoch)
    save_checkpoint(result.model, ckpt_path, schema.schema_hash, cfg.seed, result.columns, result.flags)
    result.loss_curve.to_csv(Path(out_dir) / "loss_curve.csv", index=False)
    result.fsu_loss.to_csv(Path(out_dir) / "fsu_loss.csv", index=False)
    return result


def run_probe(cfg: RunConfig, ckpt_path, train_path, test_path, out_dir, label_fraction: Optional[float] = None,
              unfrozen: Optional[bool] = None, force: bool = False) -> list:
    """
    Frozen probing (or fine-tuning) of a checkpoint at one or more labeled fractions.

    Writes one eval_report JSON and confusion CSV per fraction, and probe.ckpt: the
    encoder with the head trained at the largest fraction.
    """
    train, test = read_dataset(train_path), read_dataset(test_path)
    model, header = load_checkpoint(ckpt_path, train.schema_hash, force)
    train_view = apply_checkpoint_view(train, header, force)
    test_view = apply_checkpoint_view(test, header, force)
    probe_cfg = cfg.probe_config()
    fractions = sorted([label_fraction] if label_fraction is not None else cfg.probe.label_fractions)
    unfrozen = cfg.probe.unfrozen if unfrozen is None else unfrozen

    if unfrozen:
        reports = []
        for fraction in fractions:
            model, header = load_checkpoint(ckpt_path, train.schema_hash, force)
            report = finetune(model, nested_subset(train_view, fraction, probe_cfg.seed), test_view, probe_cfg)
            report.labeled_fraction = float(fraction)
            reports.append(report)
    elif len(fractions) == 1:
        report = probe_frozen(model, nested_subset(train_view, fractions[0], probe_cfg.seed), test_view, probe_cfg)
        report.labeled_fraction = float(fractions[0])
        reports = [report]
    else:
        reports = label_efficiency(model, train_view, test_view, fractions, probe_cfg)

    out_dir = Path(out_dir)
    for report in reports:
        suffix = "" if len(reports) == 1 else f"_{report.labeled_fraction:g}"
        write_json(report.to_dict(), out_dir / f"eval_report{suffix}.json")
        report.confusion_frame().to_csv(out_dir / f"confusion{suffix}.csv")
    save_checkpoint(model, out_dir / "probe.ckpt", bytes.fromhex(header["schema_hash"]), header["seed"],
                    header["columns"], {**header.get("flags", {}), "probed": True, "unfrozen": bool(unfrozen)})
    return reports


def run_analysis(cfg: RunConfig, ckpt_path, data_path, target: str, out_dir, force: bool = False,
                 contrast_ckpt=None) -> dict:
    """
    Embedding geometry and/or FSU importance of a checkpoint on a dataset.

    Geometry is contrasted against contrast_ckpt when given (the shared-embedding variant
    pretrained on the same corpus), otherwise against a freshly initialized shared twin.

    Importance needs a trained head; a checkpoint that never went through probing gets
    a frozen probe fitted on the analysis data first.
    """
    dataset = read_dataset(data_path)
    model, header = load_checkpoint(ckpt_path, dataset.schema_hash, force)
    view = apply_checkpoint_view(dataset, header, force)
    out_dir = Path(out_dir)
    reports = {}
    if target in ("geometry", "all"):
        contrast = cfg.analysis.contrast
        if contrast_ckpt is not None:
            contrast, contrast_header = load_checkpoint(contrast_ckpt, dataset.schema_hash, force)
            if contrast_header["columns"] != header["columns"]:
                raise SchemaMismatch(f"{contrast_ckpt} was trained on other FSU columns than {ckpt_path}")
        geometry = embedding_geometry(model, view, cfg.analysis.sample_n, cfg.seed, contrast)
        write_json(geometry.to_dict(), out_dir / "geometry.json")
        geometry.distance_frame().to_csv(out_dir / "inter_distance.csv")
        geometry.variance_frame().to_csv(out_dir / "intra_variance.csv", index=False)
        reports["geometry"] = geometry
    if target in ("importance", "all"):
        if not header.get("flags", {}).get("probed"):
            logging.warning("Checkpoint carries no trained head; fitting a frozen probe on the analysis data first.")
            probe_frozen(model, view, view, cfg.probe_config())
        importance = importance_report(model, view, cfg.analysis.attribution, cfg.seed,
                                       cfg.analysis.forest_estimators, cfg.analysis.forest_depth)
        write_json(importance.to_dict(), out_dir / "importance.json")
        importance.ranked_frame().to_csv(out_dir / "importance_ranked.csv", index=False)
        reports["importance"] = importance
    return reports
