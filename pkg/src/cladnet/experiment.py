"""Runs experiments from an ExperimentConfig and writes results, manifests and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import KINDS as AUGMENTATIONS
from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig, dataset_from_dict
from .continual import STRATEGIES, StrategyConfig, StreamResult, SubjectStreams, run_stream
from .dataio import DatasetConfig, PreparedData, load_cache, mask_labels
from .objectives import SSL_LOSSES
from .sslnet import BodyPartition

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FORMAT_LINE = f"# format-version: {FORMAT_VERSION}"
ACCURACY_COLUMNS = ("strategy", "seed", "t", "t_prime", "accuracy")
SUMMARY_COLUMNS = ("strategy", "seed", "FA", "FM", "LA", "distill_mode")
ABLATION_AXES = ("components", "ssl_loss", "augmentation", "attention", "labels")
LABEL_FRACTIONS = (0.1, 0.2, 1.0)
COMPONENT_CELLS = {
    "full": dict(transformer=True, distill=True),
    "w/o distill": dict(transformer=True, distill=False),
    "w/o transformer": dict(transformer=False, distill=True),
    "plain": dict(transformer=False, distill=False),
}


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path, columns, rows) -> Path:
    """CSV with a format-version comment line followed by a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ------------------------------------------------------------------- running


def load_prepared(path) -> tuple[PreparedData, dict, DatasetConfig]:
    """Prepared cache plus the dataset config it was built from."""
    data, meta = load_cache(path)
    return data, meta, dataset_from_dict(meta["dataset"])


def partition_for(ds: DatasetConfig, channel_names) -> BodyPartition:
    if not ds.body_parts:
        return BodyPartition.contiguous([len(channel_names)])
    return BodyPartition.from_names(list(channel_names), ds.body_parts, ds.query_part)


def run_seed(
    cfg: ExperimentConfig,
    data: PreparedData,
    ds: DatasetConfig,
    seed: int,
    keep_checkpoints: bool = False,
) -> StreamResult:
    return run_stream(
        SubjectStreams.from_prepared(data),
        cfg.strategy,
        partition_for(ds, data.train.channel_names),
        ds.n_classes,
        cfg.run.for_seed(seed),
        cfg.model.transformer,
        cfg.model.cnn,
        cfg.ssl,
        keep_checkpoints=keep_checkpoints,
    )


def accuracy_rows(label: str, seed: int, A: np.ndarray) -> list[list[str]]:
    T = A.shape[0]
    return [[label, str(seed), str(t + 1), str(tp + 1), fmt(A[t, tp])] for t in range(T) for tp in range(T)]


def summary_row(label: str, seed: int, result: StreamResult) -> list[str]:
    m = result.metrics
    return [label, str(seed), fmt(m["FA"]), fmt(m["FM"]), fmt(m["LA"]), result.strategy.distill_mode or "none"]


def manifest(cfg: ExperimentConfig, meta: dict, cache: str, extra: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "config": cfg.to_dict(),
        "resolved_strategy": dataclasses.asdict(cfg.strategy.resolved()),
        "seeds": list(cfg.run.seeds),
        "cache": str(cache),
        "dataset_checksum": meta.get("checksum"),
        "cache_dataset": meta.get("dataset"),
        **(extra or {}),
    }


def train(cfg: ExperimentConfig, cache, out_dir, checkpoints: bool = True) -> list[list[str]]:
    """All seeds of one strategy; writes accuracy.csv, summary.csv, manifest.json and checkpoints."""
    cfg.strategy.resolved()  # strategy/config mismatch fails here, before any training
    data, meta, ds = load_prepared(cache)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = cfg.strategy.kind
    acc, summary = [], []
    for seed in cfg.run.seeds:
        result = run_seed(cfg, data, ds, seed, keep_checkpoints=checkpoints)
        acc.extend(accuracy_rows(label, seed, result.A))
        summary.append(summary_row(label, seed, result))
        for k, ck in enumerate(result.checkpoints):
            save_checkpoint(
                out / "checkpoints" / f"seed{seed}" / f"task{k + 1}.npz",
                ck["classifier"],
                ck["transformer"],
                {"seed": seed, "task": k + 1, "subject": ck["subject"], "strategy": label},
            )
        log.info("seed %d: %s", seed, result.metrics)
    write_csv(out / "accuracy.csv", ACCURACY_COLUMNS, acc)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, meta, cache), indent=2, sort_keys=True) + "\n")
    return summary


# ------------------------------------------------------------------ ablation


def ablation_grid(axis: str, cfg: ExperimentConfig, strategies: list[str] | None = None) -> list[tuple[str, float, ExperimentConfig]]:
    """``(cell label, label fraction, config)`` triples for one ablation axis."""
    if axis == "components":
        return [
            (name, 1.0, replace(cfg, strategy=replace(cfg.strategy, kind="clad", **flags)))
            for name, flags in COMPONENT_CELLS.items()
        ]
    if axis == "ssl_loss":
        return [(loss, 1.0, replace(cfg, ssl=replace(cfg.ssl, loss=loss))) for loss in SSL_LOSSES]
    if axis == "augmentation":
        return [
            (kind, 1.0, replace(cfg, ssl=replace(cfg.ssl, augmentation=replace(cfg.ssl.augmentation, kind=kind))))
            for kind in AUGMENTATIONS
        ]
    if axis == "attention":
        return [
            (att, 1.0, replace(cfg, model=replace(cfg.model, transformer=replace(cfg.model.transformer, attention=att))))
            for att in ("cross", "self")
        ]
    if axis == "labels":
        kinds = strategies or [cfg.strategy.kind]
        bad = [k for k in kinds if k not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}")
        return [
            (f"{kind} phi={phi:g}", phi, replace(cfg, strategy=StrategyConfig(**{**dataclasses.asdict(cfg.strategy), "kind": kind})))
            for phi in LABEL_FRACTIONS
            for kind in kinds
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


ABLATION_COLUMNS = ("axis", "cell", "strategy", "label_fraction", "n_seeds", "FA", "FM", "LA", "distill_mode")


def ablate(cfg: ExperimentConfig, cache, out_dir, axis: str, strategies: list[str] | None = None) -> list[list[str]]:
    grid = ablation_grid(axis, cfg, strategies)
    for _, _, cell_cfg in grid:
        cell_cfg.strategy.resolved()
    data, meta, ds = load_prepared(cache)
    if axis == "labels" and ds.label_fraction != 1.0:
        raise ConfigError("the labels axis needs a cache prepared with label_fraction 1.0")
    rows = []
    for name, phi, cell_cfg in grid:
        cell_data = data
        if phi < 1.0:
            cell_data = replace(data, train=mask_labels(data.train, phi, ds.seed))
        metrics = []
        for seed in cell_cfg.run.seeds:
            metrics.append(run_seed(cell_cfg, cell_data, ds, seed).metrics)
        mean = {k: float(np.mean([m[k] for m in metrics])) for k in ("FA", "FM", "LA")}
        res = cell_cfg.strategy.resolved()
        rows.append(
            [axis, name, cell_cfg.strategy.kind, fmt(phi), str(len(metrics)), fmt(mean["FA"]), fmt(mean["FM"]), fmt(mean["LA"]), res.distill_mode or "none"]
        )
        log.info("%s / %s: %s", axis, name, mean)
    out = Path(out_dir)
    write_csv(out / f"ablation_{axis}.csv", ABLATION_COLUMNS, rows)
    (out / f"ablation_{axis}_manifest.json").write_text(
        json.dumps(manifest(cfg, meta, cache, {"axis": axis, "cells": [g[0] for g in grid]}), indent=2, sort_keys=True) + "\n"
    )
    return rows


# -------------------------------------------------------------------- report


REPORT_COLUMNS = ("strategy", "n_seeds", "FA_mean", "FA_std", "FM_mean", "FM_std", "LA_mean", "LA_std")
CURVE_COLUMNS = ("strategy", "t", "t_prime", "accuracy_mean", "accuracy_std", "n_seeds")


def report(runs_dir, out_dir) -> tuple[list[list[str]], list[list[str]]]:
    """Per-strategy mean and population std over seeds, plus tidy forgetting curves."""
    runs = Path(runs_dir)
    summaries = sorted(runs.rglob("summary.csv")) if runs.is_dir() else []
    if not summaries:
        raise FileNotFoundError(f"no summary.csv files under {runs_dir}")
    metrics: dict[str, list[dict]] = {}
    for path in summaries:
        for row in read_csv(path):
            metrics.setdefault(row["strategy"], []).append(row)
    curves: dict[tuple[str, int, int], list[float]] = {}
    for path in sorted(runs.rglob("accuracy.csv")):
        for row in read_csv(path):
            key = (row["strategy"], int(row["t"]), int(row["t_prime"]))
            curves.setdefault(key, []).append(float(row["accuracy"]))

    table = []
    for strategy in sorted(metrics):
        rows = metrics[strategy]
        line = [strategy, str(len(rows))]
        for k in ("FA", "FM", "LA"):
            vals = np.array([float(r[k]) for r in rows])
            line += [fmt(vals.mean()), fmt(vals.std())]
        table.append(line)
    curve_rows = [
        [s, str(t), str(tp), fmt(np.mean(v)), fmt(np.std(v)), str(len(v))] for (s, t, tp), v in sorted(curves.items())
    ]
    out = Path(out_dir)
    write_csv(out / "report.csv", REPORT_COLUMNS, table)
    write_csv(out / "curves.csv", CURVE_COLUMNS, curve_rows)
    return table, curve_rows
