"""Run configured experiments and write per-seed and aggregate metric CSVs."""

from __future__ import annotations

import csv
import logging
import math
import os
import statistics
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

from ..nn_model import OptState, build, cosine_lr, preset_spec, save_checkpoint
from ..pipeline import DivergenceError, EpochMetrics, Pipeline, run_epoch
from .config import ENV_OUTPUT_DIR, ExperimentConfig
from .datasets import Dataset, make_dataset

log = logging.getLogger(__name__)

CSV_VERSION = "mpcompress-metrics v1"
COLUMNS = [f.name for f in fields(EpochMetrics)]
_HIGHER_IS_BETTER = {"test_acc_on", "test_acc_off"}
_LOWER_IS_BETTER = {"train_loss", "test_loss_on", "test_loss_off"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def aggregate_rows(per_seed: list) -> tuple[list, list]:
    """Per-epoch mean, standard error (sample std / sqrt(runs)) and best over runs."""
    header = ["epoch", "runs"]
    for col in COLUMNS[1:]:
        header += [f"{col}_mean", f"{col}_stderr"]
        if col in _HIGHER_IS_BETTER or col in _LOWER_IS_BETTER:
            header.append(f"{col}_best")
    n_epochs = min((len(rows) for rows in per_seed), default=0)
    out = []
    for e in range(n_epochs):
        row = [e, len(per_seed)]
        for col in COLUMNS[1:]:
            vals = [getattr(rows[e], col) for rows in per_seed]
            vals = [float(v) for v in vals if v is not None]
            if not vals:
                row += [None, None] + ([None] if (col in _HIGHER_IS_BETTER or col in _LOWER_IS_BETTER) else [])
                continue
            mean = statistics.fmean(vals)
            se = statistics.stdev(vals) / math.sqrt(len(vals)) if len(vals) > 1 else float("nan")
            row += [mean, se]
            if col in _HIGHER_IS_BETTER:
                row.append(max(vals))
            elif col in _LOWER_IS_BETTER:
                row.append(min(vals))
        out.append(row)
    return header, out


def write_aggregate_csv(path, per_seed: list) -> None:
    header, rows = aggregate_rows(per_seed)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} aggregate\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def model_for(cfg: ExperimentConfig, data: Dataset, seed: int) -> list:
    return build(preset_spec(cfg.model, in_dim=data.input_dim, classes=data.classes), seed)


def train_seed(cfg: ExperimentConfig, data: Dataset, seed: int, checkpoint: str | None = None) -> list:
    layers = model_for(cfg, data, seed)
    pcfg = cfg.pipeline_config()
    opts = [
        OptState(cfg.optimizer.momentum, cfg.optimizer.weight_decay, cfg.optimizer.lr0, cfg.t_max)
        for _ in range(pcfg.degree)
    ]
    settings = cfg.train_settings(seed)
    rows: list = []
    with Pipeline(layers, pcfg, aqsgd_capacity=len(data.x_train)) as pipe:
        for epoch in range(cfg.epochs):
            try:
                row = run_epoch(pipe, data, epoch, opts, rows.append, settings)
            except DivergenceError as exc:
                log.warning("%s seed=%d diverged in epoch %d: %s", cfg.name, seed, epoch, exc)
                rows += _diverged_rows(cfg, pipe, epoch, settings)
                break
            log.info(
                "%s seed=%d epoch=%d loss=%.4f acc_on=%s acc_off=%s",
                cfg.name, seed, epoch, row.train_loss, row.test_acc_on, row.test_acc_off,
            )
        if checkpoint:
            save_checkpoint(checkpoint, pipe.layers)
    return rows


def _diverged_rows(cfg, pipe, first_epoch, settings) -> list:
    """Rows for a run that blew up: NaN metrics from the failing epoch onwards."""
    nan = float("nan")
    on = nan if settings.eval_modes in ("on", "both") else None
    off = nan if settings.eval_modes in ("off", "both") else None
    return [
        EpochMetrics(
            epoch=e,
            lr=cosine_lr(e, settings.lr0, settings.t_max),
            train_loss=nan,
            test_loss_on=on,
            test_acc_on=on,
            test_loss_off=off,
            test_acc_off=off,
            bytes_forward=pipe.bytes_forward(),
            bytes_backward=pipe.bytes_backward(),
            feedback_buffer_bytes=pipe.buffer_bytes(),
        )
        for e in range(first_epoch, cfg.epochs)
    ]


@dataclass
class ExperimentResult:
    seed_csvs: list = field(default_factory=list)
    aggregate_csv: Path | None = None
    rows: dict = field(default_factory=dict)


def output_dir(default="runs") -> Path:
    return Path(os.environ.get(ENV_OUTPUT_DIR, default))


def run_experiment(cfg: ExperimentConfig, out_dir=None, checkpoints: bool = False) -> ExperimentResult:
    out = Path(out_dir) if out_dir is not None else output_dir()
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg.dataset)
    result = ExperimentResult()
    for seed in cfg.seeds:
        ckpt = str(out / f"{cfg.name}_seed{seed}.ckpt") if checkpoints else None
        rows = train_seed(cfg, data, seed, ckpt)
        path = out / f"{cfg.name}_seed{seed}.csv"
        write_metrics_csv(path, rows)
        result.seed_csvs.append(path)
        result.rows[seed] = rows
    result.aggregate_csv = out / f"{cfg.name}_aggregate.csv"
    write_aggregate_csv(result.aggregate_csv, [result.rows[s] for s in cfg.seeds])
    return result
