"""JSON schemas and CSV headers for every file the CLI writes."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema

from .saliency import CUMULATIVE_COLUMNS, SALIENCY_COLUMNS
from .train import Metrics

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_num_list = {"type": "array", "items": _num}

FOLD = {
    "type": "object",
    "required": ["fold", "train_loss", "train_accuracy", "val_loss", "val_accuracy",
                 "best_epoch", "best_val_accuracy", "test_accuracy", "n_train", "n_val", "n_test"],
    "properties": {
        "fold": _int,
        "train_loss": _num_list,
        "train_accuracy": _num_list,
        "val_loss": _num_list,
        "val_accuracy": _num_list,
        "best_epoch": {"type": "integer", "minimum": -1},
        "best_val_accuracy": _num,
        "test_accuracy": _num,
        "n_train": _int,
        "n_val": _int,
        "n_test": _int,
    },
}

METRICS = {
    "type": "object",
    "required": ["train_config", "folds", "summary"],
    "properties": {
        "train_config": {"type": "object"},
        "folds": {"type": "array", "items": FOLD, "minItems": 1},
        "summary": {
            "type": "object",
            "required": ["test_accuracy_mean", "test_accuracy_std", "n_folds"],
            "properties": {"test_accuracy_mean": _num, "test_accuracy_std": _num, "n_folds": _int},
        },
    },
}

SPLIT = {
    "type": "object",
    "required": ["test", "folds", "class_counts", "source_index"],
    "properties": {
        "test": {"type": "array", "items": _int},
        "folds": {"type": "array", "items": {"type": "array", "items": _int}},
        "class_counts": {"type": "array", "items": {"type": "array", "items": _int}},
        "source_index": {"type": "array", "items": _int},
    },
}

EVAL = {
    "type": "object",
    "required": ["accuracy", "n_segments", "confusion", "class_counts"],
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "n_segments": _int,
        "confusion": {"type": "array", "items": {"type": "array", "items": _int}},
        "class_counts": {"type": "array", "items": _int},
    },
}

COSTS = {
    "type": "object",
    "required": ["active_params", "stored_params", "macs_total", "macs_per_layer",
                 "activation_count", "head_inputs"],
    "properties": {
        "active_params": _int,
        "stored_params": _int,
        "macs_total": _int,
        "macs_per_layer": {"type": "object", "additionalProperties": _int},
        "activation_count": _int,
        "head_inputs": _int,
    },
}

BENCH = {
    "type": "object",
    "required": ["inference_ms_mean", "inference_ms_std", "inference_trials", "epoch_s_mean",
                 "epoch_s_std", "epoch_trials", "n_segments", "batch_size", "machine"],
    "properties": {
        "inference_ms_mean": _num,
        "inference_ms_std": _num,
        "inference_trials": _int,
        "epoch_s_mean": _num,
        "epoch_s_std": _num,
        "epoch_trials": _int,
        "n_segments": _int,
        "batch_size": _int,
        "machine": {"type": "object"},
    },
}

JSON_SCHEMAS = {
    "metrics.json": METRICS,
    "split.json": SPLIT,
    "eval.json": EVAL,
    "costs.json": COSTS,
    "bench.json": BENCH,
}

CSV_HEADERS = {
    "metrics.csv": Metrics.CSV_COLUMNS,
    "saliency.csv": SALIENCY_COLUMNS,
    "cumulative.csv": CUMULATIVE_COLUMNS,
    "waveforms_*.csv": ("scale", "tap", "weight"),
}


def validate_json(name: str, doc):
    jsonschema.validate(doc, JSON_SCHEMAS[name])


def validate_csv(path, header) -> int:
    """Check the header and that every row has the right width; returns row count."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: header {rows[:1]} != {list(header)}")
    for i, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{i}: {len(row)} fields, expected {len(header)}")
    return len(rows) - 1


def validate_artifact(path) -> str:
    """Validate one emitted file by name; returns the schema key used.

    Binary outputs (``.tscm``, ``.tseg``) are checked by loading them.
    """
    path = Path(path)
    name = path.name
    if name in JSON_SCHEMAS:
        validate_json(name, json.loads(path.read_text()))
        return name
    if name.startswith("waveforms_") and name.endswith(".csv"):
        validate_csv(path, CSV_HEADERS["waveforms_*.csv"])
        return "waveforms_*.csv"
    if name in CSV_HEADERS:
        validate_csv(path, CSV_HEADERS[name])
        return name
    if path.suffix == ".tscm":
        from .model import load
        load(path)
        return ".tscm"
    if path.suffix == ".tseg":
        from .data import read_tseg
        read_tseg(path)
        return ".tseg"
    raise KeyError(f"no schema covers {path}")
