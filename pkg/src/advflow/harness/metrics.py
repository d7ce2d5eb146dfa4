"""Append-only metrics files: JSON lines plus a flat CSV mirror."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from ..errors import InputError


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))
    return str(v)


class MetricsWriter:
    def __init__(self, directory, stem, fields):
        self.fields = list(fields)
        directory = Path(directory)
        self.csv_path = directory / f"{stem}.csv"
        self.jsonl_path = directory / f"{stem}.jsonl"
        with open(self.csv_path, "w", newline="") as fh:
            fh.write(",".join(self.fields) + "\n")
        self.jsonl_path.write_text("")

    def __call__(self, row):
        with open(self.csv_path, "a", newline="") as fh:
            fh.write(",".join(_fmt(row[k]) for k in self.fields) + "\n")
        clean = {k: (None if isinstance(row[k], float) and math.isnan(row[k]) else row[k])
                 for k in self.fields}
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(clean) + "\n")


def read_metrics_csv(path):
    """Rows of a metrics CSV as dicts of floats."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing metrics file {path}")
    with open(path, newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    if not rows:
        raise InputError(f"metrics file {path} has no rows")
    return rows
