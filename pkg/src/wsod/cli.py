"""Command-line interface: ``wsod gen-synth | train | infer | eval``."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import model as M
from .data import SynthConfig, gen_synthetic, load_dataset, read_detections, save_dataset, write_detections
from .metrics import evaluate, format_report
from .train import Checkpoint, TrainConfig, TrainingDiverged, infer, train, write_loss_log

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "loss_log.csv"


def _fail(msg: str) -> None:
    raise click.ClickException(msg)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"{path}: {exc}")
    if not isinstance(data, dict):
        _fail(f"{path}: expected a JSON object")
    return data


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Weakly supervised detection on precomputed feature maps."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-synth")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file of generator settings.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output dataset directory.")
def gen_synth_cmd(config_path, seed, out):
    """Generate a synthetic part-vs-whole dataset."""
    raw = _read_json(config_path) if config_path else {}
    unknown = set(raw) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        _fail(f"unknown synth config key(s): {', '.join(sorted(unknown))}")
    try:
        ds = gen_synthetic(SynthConfig.from_mapping(raw), seed)
    except ValueError as exc:
        _fail(str(exc))
    manifest = save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} records to {manifest}")


@main.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Dataset manifest.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file of training settings.")
@click.option("--mode", type=click.Choice(M.MODES), help="Overrides the mode in --config.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output run directory.")
def train_cmd(data, config_path, mode, out):
    """Train a model; writes the checkpoint and the loss log."""
    try:
        cfg = TrainConfig.from_dict(_read_json(config_path)) if config_path else TrainConfig()
        if mode:
            cfg = replace(cfg, mode=mode)
        ds = load_dataset(data)
    except ValueError as exc:
        _fail(str(exc))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(ds, cfg)
    except TrainingDiverged as exc:
        exc.checkpoint.save(out / CHECKPOINT_NAME)
        _fail(f"{exc}; last good checkpoint saved to {out / CHECKPOINT_NAME}")
    except ValueError as exc:
        _fail(str(exc))
    result.checkpoint.save(out / CHECKPOINT_NAME)
    write_loss_log(result.log, out / LOG_NAME)
    click.echo(f"trained {cfg.mode} for {len(result.log)} iterations; wrote {out / CHECKPOINT_NAME}")


@main.command("infer")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Dataset manifest.")
@click.option("--checkpoint", required=True, type=click.Path(exists=True),
              help="Checkpoint file or run directory.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Detections JSON file.")
def infer_cmd(data, checkpoint, out):
    """Run detection over every record."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    try:
        ckpt = Checkpoint.load(path)
        ds = load_dataset(data, require_labels=False)
        dets = infer(ds, ckpt)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    write_detections(dets, out)
    click.echo(f"wrote {sum(len(v) for v in dets.values())} detections to {out}")


@main.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Dataset manifest.")
@click.option("--detections", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", "what", type=click.Choice(["map", "corloc"]), default="map", show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), help="Also write the report as JSON.")
@click.option("--ap-mode", type=click.Choice(["continuous", "elevenpoint"]), default="continuous",
              show_default=True)
def eval_cmd(data, detections, what, report, ap_mode):
    """Score detections against the dataset's ground truth."""
    try:
        ds = load_dataset(data, require_labels=False)
        dets = read_detections(detections)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    if not ds.has_ground_truth:
        _fail("CorLoc requires ground truth" if what == "corloc" else "mAP requires ground truth")
    rep = evaluate(dets, ds.ground_truth, ds.num_classes, what=(what,), ap_mode=ap_mode,
                   class_names=ds.class_names)
    click.echo(format_report(rep))
    if report:
        Path(report).write_text(rep.to_json())


if __name__ == "__main__":
    sys.exit(main())
