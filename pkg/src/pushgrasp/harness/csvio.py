"""Versioned CSV tables.

The first row names the schema and its version (``#schema,metrics,1``), the
second row holds the column names.  Floats are written with ``repr`` so a file
is a pure function of the values it holds.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable

import numpy as np

SCHEMAS: dict[str, tuple[int, tuple[str, ...]]] = {
    "metrics": (1, ("step", "success_rate", "mean_return", "zone_rate", "fall_rate", "seed", "cell")),
    "gentest": (1, ("shape", "episodes", "successes", "rate")),
    "vae_loss": (1, ("epoch", "loss")),
    "ablation": (1, ("cell", "seed", "train_success", "beveled_success", "beveled_episodes")),
    "compare": (1, ("arm", "topology", "seed", "steps_to_threshold", "reached")),
}


class SchemaError(ValueError):
    pass


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def header_lines(schema: str) -> str:
    version, columns = SCHEMAS[schema]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["#schema", schema, version])
    w.writerow(columns)
    return buf.getvalue()


def row_lines(schema: str, rows: Iterable[dict]) -> str:
    _, columns = SCHEMAS[schema]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def write(path: str | Path, schema: str, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header_lines(schema) + row_lines(schema, rows))


class Appender:
    """Append-only writer: the header goes out once, rows as they arrive."""

    def __init__(self, path: str | Path, schema: str, existing: Iterable[dict] = ()):
        self.path = Path(path)
        self.schema = schema
        write(self.path, schema, existing)

    def __call__(self, rows: Iterable[dict]) -> None:
        with self.path.open("a") as fh:
            fh.write(row_lines(self.schema, rows))


def read(path: str | Path, schema: str) -> list[dict[str, str]]:
    """Rows as strings keyed by column; the schema row must match."""
    version, columns = SCHEMAS[schema]
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        tag = next(reader, None)
        if tag != ["#schema", schema, str(version)]:
            raise SchemaError(f"{path}: expected schema {schema} v{version}, found {tag}")
        head = next(reader, None)
        if tuple(head or ()) != columns:
            raise SchemaError(f"{path}: columns {head} do not match {list(columns)}")
        return [dict(zip(columns, r)) for r in reader]


def read_numeric(path: str | Path, schema: str) -> list[dict]:
    out = []
    for row in read(path, schema):
        conv = {}
        for k, v in row.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out
