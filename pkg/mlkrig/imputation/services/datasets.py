"""
Tabular datasets: CSV ingestion, imputed-CSV output and train/validation splits.

Rows keep their original position (0-based, header excluded) as the frame
index, so subsets, dropped rows and imputed values always map back to the
input file.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from kriging.services.execution import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsvSchema:
    """
    Expected layout of an input file.

    ``columns`` of None accepts whatever the header names. ``missing_sentinel``
    is a literal cell value read as missing in addition to empty cells.
    """

    response: str = None
    predictors: tuple = ()
    columns: tuple = None
    missing_sentinel: str = None
    truth: str = None

    @property
    def required(self):
        names = list(self.predictors)
        for name in (self.response, self.truth):
            if name:
                names.append(name)
        return names


@dataclass(frozen=True, eq=False)
class TabularDataset:
    frame: pd.DataFrame = field(repr=False)
    response: str = None
    predictors: tuple = ()
    transform: object = field(default=None, repr=False)

    @property
    def n_rows(self):
        return len(self.frame)

    @property
    def columns(self):
        return list(self.frame.columns)

    @property
    def missing_response(self):
        """Boolean Series over rows: response cell is missing."""
        return self.frame[self.response].isna()

    @property
    def n_missing(self):
        return int(self.frame.isna().to_numpy().sum())

    def missing_counts(self):
        return {name: int(count) for name, count in self.frame.isna().sum().items()}

    def observed_rows(self):
        return self.frame.index[~self.missing_response].to_numpy()

    def missing_rows(self):
        return self.frame.index[self.missing_response].to_numpy()

    def predictor_matrix(self, rows=None):
        frame = self.frame if rows is None else self.frame.loc[rows]
        return frame[list(self.predictors)].to_numpy(dtype=float)

    def response_vector(self, rows=None):
        frame = self.frame if rows is None else self.frame.loc[rows]
        return frame[self.response].to_numpy(dtype=float)

    def incomplete_predictor_rows(self, rows=None):
        frame = self.frame if rows is None else self.frame.loc[rows]
        return frame.index[frame[list(self.predictors)].isna().any(axis=1)].to_numpy()

    def with_roles(self, response=None, predictors=None):
        response = response or self.response
        predictors = tuple(predictors) if predictors else self.predictors
        unknown = [name for name in [response, *predictors] if name not in self.frame.columns]
        if unknown:
            raise ValidationError(
                "Unknown columns %(unknown)s; available: %(available)s.",
                code="schema",
                params={"unknown": unknown, "available": self.columns},
            )
        return replace(self, response=response, predictors=predictors)

    def subset(self, rows):
        return replace(self, frame=self.frame.loc[np.sort(np.asarray(rows))])

    def summary(self):
        return {"n_rows": self.n_rows, "n_missing": self.n_missing, "missing_by_column": self.missing_counts()}


def require_complete_predictors(dataset, rows, what="rows"):
    bad = dataset.incomplete_predictor_rows(rows)
    if bad.size:
        shown = ", ".join(str(int(r)) for r in bad[:20])
        more = f" and {bad.size - 20} more" if bad.size > 20 else ""
        raise ValidationError(
            "Predictors have missing cells in %(count)d %(what)s: %(rows)s%(more)s.",
            code="missing_predictors",
            params={"count": int(bad.size), "what": what, "rows": shown, "more": more},
        )


# =============================================================================
# CSV input / output
# =============================================================================

def _parse_column(name, raw, sentinel):
    text = raw.str.strip()
    missing = text.eq("")
    if sentinel is not None:
        missing |= text.eq(sentinel)
    values = pd.to_numeric(text.where(~missing), errors="coerce")
    bad = values.isna() & ~missing
    if bad.any():
        row = int(bad.idxmax())
        raise ValidationError(
            "Cannot parse %(value)r as a number in column %(column)r, data row %(row)d (file line %(line)d).",
            code="parse",
            params={"value": raw[row], "column": name, "row": row, "line": row + 2},
        )
    return values.astype(float)


def load_csv(path, schema=None):
    """
    Read a comma-separated UTF-8 file with a header row into a TabularDataset.

    Empty cells and the schema's sentinel are missing (NaN). Every column must
    be numeric.
    """
    schema = schema or CsvSchema()
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise ValidationError("Input file %(path)s does not exist.", code="parse", params={"path": str(path)}) from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(
            "Cannot read %(path)s as CSV: %(error)s", code="parse", params={"path": str(path), "error": exc}
        ) from exc

    header = [str(c).strip() for c in raw.columns]
    raw.columns = header
    if schema.columns is not None and list(schema.columns) != header:
        raise ValidationError(
            "Header %(header)s does not match the expected columns %(expected)s.",
            code="schema",
            params={"header": header, "expected": list(schema.columns)},
        )
    unknown = [name for name in schema.required if name not in header]
    if unknown:
        raise ValidationError(
            "Unknown columns %(unknown)s; the file has %(header)s.",
            code="schema",
            params={"unknown": unknown, "header": header},
        )

    frame = pd.DataFrame({name: _parse_column(name, raw[name], schema.missing_sentinel) for name in header})
    dataset = TabularDataset(frame=frame, response=schema.response, predictors=tuple(schema.predictors))
    logger.info("Loaded %s: %d rows, %d missing cells", path, dataset.n_rows, dataset.n_missing)
    return dataset


def write_imputed_csv(dataset, imputed, path, source=None):
    """
    Write ``source`` (default: the dataset frame) with missing response cells
    filled from ``imputed`` (a Series indexed by row) and a 0/1 ``imputed`` column.
    """
    frame = (source if source is not None else dataset.frame).copy()
    response = dataset.response
    fill = imputed.reindex(frame.index)
    filled = frame[response].isna() & fill.notna()
    frame.loc[filled, response] = fill[filled]
    frame["imputed"] = filled.astype(int)
    frame.to_csv(path, index=False, float_format="%.10g")
    logger.info("Wrote %d rows (%d imputed) to %s", len(frame), int(filled.sum()), path)
    return frame


# =============================================================================
# Splits
# =============================================================================

def make_split(dataset, train_fraction, seed, min_train=1):
    """
    Seeded shuffle of the rows with an observed response into (train, validation).

    Validation rows keep their responses in the dataset as ground truth; the
    pipeline never reads them when fitting.
    """
    if not (0 < train_fraction < 1):
        raise ValidationError(
            "train_fraction must lie strictly between 0 and 1, got %(fraction)s.",
            code="parameter_domain",
            params={"fraction": train_fraction},
        )
    rows = dataset.observed_rows()
    order = make_rng(seed, 2).permutation(len(rows))
    n_train = int(round(train_fraction * len(rows)))
    if n_train < min_train:
        raise ValidationError(
            "%(n)d training rows are fewer than the %(needed)d required.",
            code="insufficient_data",
            params={"n": n_train, "needed": min_train},
        )
    if n_train >= len(rows):
        raise ValidationError(
            "A training fraction of %(fraction)s leaves no validation rows among %(n)d observed rows.",
            code="insufficient_data",
            params={"fraction": train_fraction, "n": len(rows)},
        )
    train = np.sort(rows[order[:n_train]])
    validation = np.sort(rows[order[n_train:]])
    return train, validation
