import functools
import logging
from pathlib import Path

import click

from src.errors import FlowSemError
from src.event_log import EventLog
from src.run_config import DEFAULT_CONFIG, load_config, make_run_dir

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

STORAGE_EXIT = 3

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=str(DEFAULT_CONFIG), show_default=True,
    help="Run configuration YAML; a run's config.yaml snapshot reproduces it.",
)
run_dir_option = click.option(
    "--run-dir", type=click.Path(file_okay=False), default=None, show_default=True,
    help="Output directory; <run_root>/<command>-<UTC timestamp> when omitted.",
)
seed_option = click.option("--seed", type=int, default=None, show_default=True, help="Overrides `seed`.")


def exit_codes(command):
    """Maps library errors to exit codes: the error family's code, 3 for any other I/O failure."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return command(*args, **kwargs)
        except FlowSemError as e:
            logging.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            code = e.exit_code
        except OSError as e:
            logging.error(f"I/O error: {e}")
            click.echo(f"error: {e}", err=True)
            code = STORAGE_EXIT
        ctx.exit(code)

    return wrapper


def start_run(command: str, config_path, run_dir, overrides: dict):
    cfg = load_config(config_path, overrides)
    run_dir = make_run_dir(cfg, command, run_dir)
    return cfg, run_dir, EventLog(run_dir)


@click.group()
def cli():
    """Protocol-field masked-autoencoder pretraining for network flows."""


@cli.command()
@click.argument("pcaps", nargs=-1, type=click.Path())
@config_option
@run_dir_option
@click.option("--schema", "schema_path", type=click.Path(dir_okay=False), default=None, show_default=True,
              help="FSU catalog YAML; the bundled catalog when omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, show_default=True,
              help="Dataset file; <run dir>/dataset.fsu when omitted.")
@click.option("--max-flows", type=int, default=None, show_default=True, help="Keep only the first flows.")
@click.option("--T", "T", type=int, default=None, show_default=True, help="Packets per flow table.")
@click.option("--workers", type=int, default=None, show_default=True, help="Capture files ingested in parallel.")
@click.option("--label-by-dir", is_flag=True, default=False,
              help="Label each capture by its parent directory name.")
@exit_codes
def extract(pcaps, config_path, run_dir, schema_path, out, max_flows, T, workers, label_by_dir):
    """Parse captures (files or directories) into a dataset of flow tables."""
    from src.stages import run_extract, write_json

    cfg, run_dir, events = start_run("extract", config_path, run_dir, {
        "schema.path": schema_path, "ingest.max_flows": max_flows, "dataset.T": T,
        "ingest.workers": workers, "ingest.label_by_dir": label_by_dir or None,
    })
    with events, events.stage("extract"):
        out = out or str(run_dir / "dataset.fsu")
        report = run_extract(cfg, pcaps, out)
        write_json(report, run_dir / "extract_report.json")
        events.emit("report", kind="extract", kept=report["kept"], flows=report["flows_written"])
    click.echo(f"Wrote {report['flows_written']} flows to {out}")


@cli.command()
@config_option
@run_dir_option
@seed_option
@click.option("--spec", default="two_class", show_default=True,
              help="Bundled spec name (two_class, timing_only, three_class, planted_fields) or a YAML path.")
@click.option("--n", "n_flows", type=int, default=400, show_default=True, help="Number of flows.")
@click.option("--T", "T", type=int, default=None, show_default=True, help="Packets per flow table.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, show_default=True,
              help="Dataset file; <run dir>/dataset.fsu when omitted.")
@click.option("--emit-pcap", type=click.Path(dir_okay=False), default=None, show_default=True,
              help="Also write the synthesized packets as a pcap.")
@exit_codes
def synth(config_path, run_dir, seed, spec, n_flows, T, out, emit_pcap):
    """Synthesize a labeled corpus from class patterns."""
    from src.stages import run_synth

    cfg, run_dir, events = start_run("synth", config_path, run_dir, {"seed": seed, "dataset.T": T})
    with events, events.stage("synth"):
        out = out or str(run_dir / "dataset.fsu")
        dataset = run_synth(cfg, spec, n_flows, out, emit_pcap)
        events.emit("report", kind="synth", flows=len(dataset), classes=dataset.class_names)
    click.echo(f"Wrote {len(dataset)} flows to {out}")


@cli.command("split")
@click.option("--data", required=True, type=click.Path(dir_okay=False), help="Dataset file to split.")
@config_option
@run_dir_option
@seed_option
@click.option("--ratios", default=None, show_default=True, help="Comma-separated split ratios, e.g. 0.8,0.1,0.1.")
@exit_codes
def split_command(data, config_path, run_dir, seed, ratios):
    """Stratified train/val/test split of a dataset file."""
    from src.stages import run_split

    parsed = None
    if ratios:
        try:
            parsed = [float(r) for r in ratios.split(",")]
        except ValueError as e:
            raise click.BadParameter(f"--ratios: {e}")
    cfg, run_dir, events = start_run("split", config_path, run_dir, {"seed": seed, "dataset.split": parsed})
    with events, events.stage("split"):
        paths = run_split(cfg, data, run_dir)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@cli.command("pretrain")
@click.option("--data", required=True, type=click.Path(dir_okay=False), help="Dataset file.")
@config_option
@run_dir_option
@seed_option
@click.option("--out-ckpt", type=click.Path(dir_okay=False), default=None, show_default=True,
              help="Checkpoint file; <run dir>/model.ckpt when omitted.")
@click.option("--epochs", type=int, default=None, show_default=True)
@click.option("--p-packet", type=float, default=None, show_default=True, help="Packet-axis mask rate.")
@click.option("--p-field", type=float, default=None, show_default=True, help="Field-axis mask rate.")
@click.option("--no-filter", is_flag=True, default=False, help="Also feed random FSUs.")
@click.option("--shared-embed", is_flag=True, default=False, help="One value embedding for every FSU.")
@click.option("--no-temporal", is_flag=True, default=False, help="Zero the temporal FSUs.")
@click.option("--no-plots", is_flag=True, default=False, help="Skip the PNG figures.")
@exit_codes
def pretrain_command(data, config_path, run_dir, seed, out_ckpt, epochs, p_packet, p_field,
                     no_filter, shared_embed, no_temporal, no_plots):
    """Masked-reconstruction pretraining of the encoder."""
    from src.stages import run_pretrain

    cfg, run_dir, events = start_run("pretrain", config_path, run_dir, {
        "seed": seed, "pretrain.epochs": epochs, "pretrain.p_packet": p_packet, "pretrain.p_field": p_field,
        "pretrain.no_filter": no_filter or None, "pretrain.shared_embed": shared_embed or None,
        "pretrain.no_temporal": no_temporal or None,
    })
    with events, events.stage("pretrain"):
        out_ckpt = out_ckpt or str(run_dir / "model.ckpt")
        result = run_pretrain(cfg, data, out_ckpt, run_dir, events.epoch_callback("pretrain"))
        events.emit("report", kind="pretrain", final_loss=float(result.loss_curve["loss"].iloc[-1]),
                    checkpoint=out_ckpt)
        if not no_plots:
            from analysis.analyze_src.training_plots import plot_fsu_loss, plot_loss_curve

            plot_loss_curve(result.loss_curve, run_dir / "loss_curve.png")
            plot_fsu_loss(result.fsu_loss, run_dir / "fsu_loss.png")
    click.echo(f"Checkpoint written to {out_ckpt}")


@cli.command("probe")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Pretrained checkpoint.")
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False), help="Labeled training set.")
@click.option("--test", "test_path", required=True, type=click.Path(dir_okay=False), help="Labeled test set.")
@config_option
@run_dir_option
@seed_option
@click.option("--unfrozen", is_flag=True, default=False, help="Fine-tune the encoder together with the head.")
@click.option("--label-fraction", type=float, default=None, show_default=True,
              help="Fraction of labeled training flows; the configured fractions when omitted.")
@click.option("--force", is_flag=True, default=False, help="Accept a checkpoint built with another FSU schema.")
@exit_codes
def probe_command(ckpt, train_path, test_path, config_path, run_dir, seed, unfrozen, label_fraction, force):
    """Train a classification head on the encoder's flow representations and report test metrics."""
    from src.stages import run_probe

    cfg, run_dir, events = start_run("probe", config_path, run_dir, {"seed": seed})
    with events, events.stage("probe"):
        reports = run_probe(cfg, ckpt, train_path, test_path, run_dir, label_fraction, unfrozen or None, force)
        for report in reports:
            events.emit("report", kind="probe", protocol=report.protocol, fraction=report.labeled_fraction,
                        accuracy=report.accuracy, macro_f1=report.macro_f1)
        if len(reports) > 1:
            from analysis.analyze_src.training_plots import plot_label_efficiency

            plot_label_efficiency(reports, run_dir / "label_efficiency.png")
    for report in reports:
        click.echo(report.to_text())


@cli.command("analyze")
@click.argument("target", type=click.Choice(["geometry", "importance", "all"]))
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint to analyze.")
@click.option("--data", required=True, type=click.Path(dir_okay=False), help="Dataset file.")
@click.option("--contrast-ckpt", type=click.Path(dir_okay=False), default=None,
              help="Pretrained shared-embedding checkpoint to contrast the geometry against.")
@config_option
@run_dir_option
@seed_option
@click.option("--sample-n", type=int, default=None, show_default=True, help="Packets sampled for geometry.")
@click.option("--attribution", type=click.Choice(["saliency", "input_x_gradient"]), default=None,
              show_default=True)
@click.option("--force", is_flag=True, default=False, help="Accept a checkpoint built with another FSU schema.")
@click.option("--no-plots", is_flag=True, default=False, help="Skip the PNG figures.")
@exit_codes
def analyze_command(target, ckpt, data, contrast_ckpt, config_path, run_dir, seed, sample_n, attribution, force,
                    no_plots):
    """Embedding geometry and/or gradient FSU importance against the forest oracle."""
    from src.stages import run_analysis

    cfg, run_dir, events = start_run(f"analyze-{target}", config_path, run_dir, {
        "seed": seed, "analysis.sample_n": sample_n, "analysis.attribution": attribution,
    })
    with events, events.stage(f"analyze-{target}"):
        reports = run_analysis(cfg, ckpt, data, target, run_dir, force, contrast_ckpt)
        if "geometry" in reports:
            from analysis.analyze_src.embedding_geometry_plots import SeabornGeometryPlots, variance_comparison

            geometry = reports["geometry"]
            variance_comparison(geometry).to_csv(run_dir / "intra_variance_comparison.csv", index=False)
            events.emit("report", kind="geometry", variance_ratio=geometry.variance_ratio,
                        contrast_ratio=None if geometry.contrast is None else geometry.contrast.variance_ratio)
            if not no_plots:
                SeabornGeometryPlots().plot(geometry, run_dir)
            click.echo(f"variance ratio ({geometry.mode}): {geometry.variance_ratio:.3f}")
            if geometry.contrast is not None:
                click.echo(f"variance ratio ({geometry.contrast.mode} contrast): {geometry.contrast.variance_ratio:.3f}")
        if "importance" in reports:
            from analysis.analyze_src.importance_plots import RankedImportanceBars

            importance = reports["importance"]
            events.emit("report", kind="importance", spearman_rho=importance.spearman_rho,
                        top=importance.model_ranking[:5])
            if not no_plots:
                RankedImportanceBars().plot(importance, run_dir / "importance.png")
            click.echo(f"spearman rho: {importance.spearman_rho:.3f}")
            click.echo("top FSUs: " + ", ".join(importance.model_ranking[:5]))


@cli.command("pipeline")
@config_option
@click.option("--spec", default="two_class", show_default=True, help="Synthetic spec used when no captures are given.")
@click.option("--n", "n_flows", type=int, default=400, show_default=True)
@click.option("--pcap", "pcaps", multiple=True, type=click.Path(), help="Captures to extract instead of synthesizing.")
@click.option("--ablation", is_flag=True, default=False, help="Run the full model and its three ablations.")
@exit_codes
def pipeline_command(config_path, spec, n_flows, pcaps, ablation):
    """
    Run the ZenML pipeline and start the MLflow UI for experiment tracking.
    """
    from zenml.integrations.mlflow.mlflow_utils import get_tracking_uri

    from pipelines.ablation_pipeline import ablation_pipeline
    from pipelines.training_pipeline import flowsem_pipeline

    config_path = str(Path(config_path).resolve())
    if ablation:
        ablation_pipeline(config_path=config_path, spec=spec, n_flows=n_flows, pcaps=list(pcaps))
    else:
        flowsem_pipeline(config_path=config_path, spec=spec, n_flows=n_flows, pcaps=list(pcaps))

    print(
        "Now run \n "
        f"    mlflow ui --backend-store-uri '{get_tracking_uri()}'\n"
        "To inspect your experiment runs within the mlflow UI.\n"
        "You can find your runs tracked within the experiment."
    )


if __name__ == "__main__":
    cli()
