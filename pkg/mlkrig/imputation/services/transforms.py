"""
Per-column log and z-score transforms with recorded inverses.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from django.core.exceptions import ValidationError
from sklearn.preprocessing import StandardScaler

logger = logging.getLogger(__name__)

SUPPORTED_OPS = ("log", "zscore")


@dataclass(frozen=True)
class TransformSpec:
    """Ordered (column, op) steps; op is "log" or "zscore"."""

    steps: tuple = ()

    def __post_init__(self):
        for column, op in self.steps:
            if op not in SUPPORTED_OPS:
                raise ValidationError(
                    "Unknown transform %(op)r for column %(column)r.",
                    code="parameter_domain",
                    params={"op": op, "column": column},
                )

    @property
    def is_identity(self):
        return not self.steps


@dataclass
class TransformRecord:
    """Applied steps with their fitted statistics, enough to invert them."""

    steps: list = field(default_factory=list)
    dropped_rows: list = field(default_factory=list)

    def inverse(self, column, values):
        """Map ``values`` of ``column`` back to original units."""
        out = np.asarray(values, dtype=float).copy()
        for step in reversed(self.steps):
            if step["column"] != column:
                continue
            if step["op"] == "zscore":
                out = out * step["scale"] + step["mean"]
            else:
                out = np.exp(out)
        return out

    def forward(self, column, values):
        out = np.asarray(values, dtype=float).copy()
        for step in self.steps:
            if step["column"] != column:
                continue
            if step["op"] == "zscore":
                out = (out - step["mean"]) / step["scale"]
            else:
                out = np.log(out)
        return out

    def to_dict(self):
        return {"steps": self.steps, "dropped_rows": [int(r) for r in self.dropped_rows]}

    @classmethod
    def from_dict(cls, data):
        if not data:
            return None
        return cls(steps=list(data.get("steps", [])), dropped_rows=list(data.get("dropped_rows", [])))


def transform_pipeline(dataset, spec, train_rows=None):
    """
    Apply ``spec`` to ``dataset`` and return the transformed dataset.

    Rows with a nonpositive value in a log column are dropped (logged, listed
    in the record). z-score statistics come from ``train_rows`` only (all rows
    when None) and are applied to every row. The returned dataset carries the
    TransformRecord used for inverting imputed values.
    """
    if spec is None or spec.is_identity:
        return dataset

    frame = dataset.frame.copy()
    record = TransformRecord()

    log_columns = [column for column, op in spec.steps if op == "log"]
    if log_columns:
        bad = (frame[log_columns] <= 0).any(axis=1)
        if bad.any():
            record.dropped_rows = [int(r) for r in frame.index[bad]]
            logger.warning(
                "Dropped %d rows with nonpositive values in log-transformed columns %s",
                int(bad.sum()),
                log_columns,
            )
            frame = frame.loc[~bad]

    if train_rows is not None:
        train_rows = np.intersect1d(np.asarray(train_rows), frame.index.to_numpy())

    for column, op in spec.steps:
        if op == "log":
            frame[column] = np.log(frame[column])
            record.steps.append({"column": column, "op": "log"})
            continue
        fit_rows = frame if train_rows is None else frame.loc[train_rows]
        values = fit_rows[[column]].dropna().to_numpy()
        if len(values) == 0:
            raise ValidationError(
                "No observed training values to normalize column %(column)r.",
                code="insufficient_data",
                params={"column": column},
            )
        scaler = StandardScaler().fit(values)
        mean, scale = float(scaler.mean_[0]), float(scaler.scale_[0])
        frame[column] = (frame[column] - mean) / scale
        record.steps.append({"column": column, "op": "zscore", "mean": mean, "scale": scale})

    return replace(dataset, frame=frame, transform=record)


def to_original_units(dataset, column, values):
    if dataset.transform is None:
        return np.asarray(values, dtype=float)
    return dataset.transform.inverse(column, values)


def apply_transform_record(dataset, record):
    """Re-apply a stored record (fitted elsewhere) to ``dataset``."""
    if record is None or not record.steps:
        return dataset
    frame = dataset.frame.copy()
    for column in {step["column"] for step in record.steps}:
        frame[column] = record.forward(column, frame[column].to_numpy(dtype=float))
    frame = frame.loc[np.isfinite(frame[[s["column"] for s in record.steps]].fillna(0.0)).all(axis=1)]
    return replace(dataset, frame=frame, transform=record)
