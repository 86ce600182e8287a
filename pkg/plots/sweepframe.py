"""CSV parsing shared by the report-rendering scripts.

The scripts consume harness CSVs (or any CSV with the same columns) and
never import the training/attack code, so they stay usable on bare report
files from anywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path


class MissingColumnsError(ValueError):
    def __init__(self, path, missing):
        super().__init__(f"{path}: missing required columns: {', '.join(sorted(missing))}")
        self.missing = set(missing)


class EmptyReportError(ValueError):
    def __init__(self, path):
        super().__init__(f"{path}: report has no data rows")


@dataclass
class SweepFrame:
    """Rows of a report CSV with verified numeric columns."""

    path: str
    columns: list[str]
    rows: list[dict]

    @classmethod
    def read(cls, path, required: tuple[str, ...], numeric: tuple[str, ...]) -> "SweepFrame":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            columns = reader.fieldnames or []
            missing = set(required) - set(columns)
            if missing:
                raise MissingColumnsError(path, missing)
            rows = []
            for raw in reader:
                row = dict(raw)
                for name in numeric:
                    if name not in row or row[name] in ("", None):
                        continue
                    try:
                        value = float(row[name])
                    except ValueError:
                        raise ValueError(
                            f"{path}: column {name!r} holds non-numeric value {row[name]!r}"
                        ) from None
                    if not math.isfinite(value):
                        raise ValueError(f"{path}: column {name!r} holds non-finite value")
                    row[name] = value
                rows.append(row)
        if not rows:
            raise EmptyReportError(path)
        return cls(str(path), list(columns), rows)
