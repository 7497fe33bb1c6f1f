"""Deterministic CSV/JSON rendering. Accuracies and drops are written with
4 decimals; update vectors in scientific notation with 4 mantissa decimals,
since their entries are far below 1e-4."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np


def _fmt(x) -> str:
    return f"{float(x):.4f}"


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def method_table(rows: dict, tasks) -> str:
    """Rows ``{method: {task: [acc per seed]}}``; cells are seed means and the
    last column is the mean over tasks."""
    out = [["method", *tasks, "avg"]]
    for name, per_task in rows.items():
        means = [float(np.mean(per_task[t])) for t in tasks]
        out.append([name, *map(_fmt, means), _fmt(np.mean(means))])
    return _csv(out)


def transfer_table(drops, random_drops, row_means, tasks) -> str:
    out = [["source", *tasks, "avg"]]
    for i, t in enumerate(tasks):
        out.append([t, *map(_fmt, drops[i]), _fmt(row_means[i])])
    out.append(["random", *map(_fmt, random_drops), _fmt(np.mean(random_drops))])
    return _csv(out)


def square_table(m, tasks) -> str:
    out = [["task", *tasks]]
    for i, t in enumerate(tasks):
        out.append([t, *map(_fmt, m[i])])
    return _csv(out)


def update_vector_table(layout, columns: dict) -> str:
    """One row per parameter of the layer: flat index, tensor, position, values."""
    tasks = list(columns)
    out = [["index", "tensor", "position", *tasks]]
    for idx in range(layout.total_len):
        name, pos = layout.locate(idx)
        out.append([idx, name, ":".join(map(str, pos)), *(f"{columns[t][idx]:.4e}" for t in tasks)])
    return _csv(out)


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 4)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    return obj


def json_report(doc) -> str:
    return json.dumps(_round(doc), indent=2, sort_keys=True) + "\n"


def read_table(path) -> tuple[list[str], dict[str, list[float]]]:
    """Parse a table written by this module into ``(header, {row: values})``."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], {r[0]: [float(x) for x in r[1:]] for r in rows[1:]}


def summarize(manifests) -> str:
    """Seed means and population standard deviations of every per-seed metric
    table found in the given manifests."""
    out = [["experiment", "method", "task", "mean", "std", "n"]]
    for man in manifests:
        rows = man.metrics.get("rows") if isinstance(man.metrics, dict) else None
        if rows:
            for method, per_task in rows.items():
                for task, vals in per_task.items():
                    out.append([man.experiment, method, task, _fmt(np.mean(vals)), _fmt(np.std(vals)), len(vals)])
        elif man.experiment == "outliers":
            for task, runs in man.metrics.items():
                for key, label in (("full_accuracy", "Full"), ("random_accuracy", "RandomMask"),
                                   ("outlier_accuracy", "OutlierMask")):
                    vals = [r[key] for r in runs]
                    out.append([man.experiment, label, task, _fmt(np.mean(vals)), _fmt(np.std(vals)), len(vals)])
    return _csv(out)
