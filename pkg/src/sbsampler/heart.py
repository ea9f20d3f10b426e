"""Cleveland heart-disease file ingestion and predictor standardization.

Input format: 303 comma-separated rows, 14 columns, '?' marking missing
values. Column schema (in file order):

    age, sex, cp, trestbps, chol, fbs, restecg, thalach, exang,
    oldpeak, slope, ca, thal, num

Processing contract:
  * rows containing '?' are dropped (the canonical file has exactly 6);
  * discrete predictors with more than two observed levels (cp, restecg,
    slope, ca, thal) are expanded to binary indicators, one per level above
    the smallest (the smallest observed level is the reference), appended in
    level order at the original column position;
  * binary columns (sex, fbs, exang and all indicators) are centered, so
    their lower/upper conditions differ by exactly 1;
  * continuous columns (age, trestbps, chol, thalach, oldpeak) are centered
    and scaled to sample standard deviation 0.5 (ddof=1);
  * the response is num > 0 (disease present vs absent).

The canonical file yields (M, d) = (297, 20); anything else raises
DimensionMismatch.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, MalformedRow
from .targets import LogisticModel

COLUMNS = [
    "age", "sex", "cp", "trestbps", "chol", "fbs", "restecg",
    "thalach", "exang", "oldpeak", "slope", "ca", "thal", "num",
]
CATEGORICAL = ("cp", "restecg", "slope", "ca", "thal")
CONTINUOUS = ("age", "trestbps", "chol", "thalach", "oldpeak")
EXPECTED_SHAPE = (297, 20)


def _parse_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != len(COLUMNS):
                raise MalformedRow(index, f"expected {len(COLUMNS)} fields, got {len(fields)}")
            if any(f == "?" for f in fields):
                rows.append(None)
                continue
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise MalformedRow(index, str(exc)) from exc
    return [r for r in rows if r is not None]


def load_heart_dataset(path, expect_shape=EXPECTED_SHAPE) -> LogisticModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = np.asarray(_parse_rows(path), dtype=float)
    frame = {name: data[:, i] for i, name in enumerate(COLUMNS)}
    response = (frame.pop("num") > 0).astype(float)

    columns = []
    for name in COLUMNS[:-1]:
        col = frame[name]
        if name in CATEGORICAL:
            levels = np.unique(col)
            for level in levels[1:]:  # smallest level is the reference
                columns.append((col == level).astype(float))
        else:
            columns.append(col)
    design = np.column_stack(columns)

    continuous_idx = set()
    pos = 0
    for name in COLUMNS[:-1]:
        width = len(np.unique(frame[name])) - 1 if name in CATEGORICAL else 1
        if name in CONTINUOUS:
            continuous_idx.add(pos)
        pos += width

    design = design - design.mean(axis=0)
    for j in continuous_idx:
        sd = design[:, j].std(ddof=1)
        if sd == 0.0:
            raise DimensionMismatch(f"continuous column {j} is constant")
        design[:, j] *= 0.5 / sd

    if expect_shape is not None and design.shape != expect_shape:
        raise DimensionMismatch(
            f"processed design has shape {design.shape}, expected {expect_shape}"
        )
    return LogisticModel(design, response)
