"""
Fitted-model files: an .npz archive whose ``header`` entry is a JSON document.

The header carries the format name and version, the scalar fit results and a
schema hash over the stored array names, ranks and dtypes; loading recomputes
the hash and refuses files that do not match.
"""
import hashlib
import json
import logging
from dataclasses import replace

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from kriging.services.design import TrendBasis
from kriging.services.kernels import CovarianceModel
from kriging.services.solver import FittedModel

logger = logging.getLogger(__name__)

FORMAT_NAME = "mlkrig-model"

ARRAY_FIELDS = (
    "beta_hat",
    "gamma_hat",
    "gamma_W",
    "locations",
    "responses",
    "trend_exponents",
    "trend_center",
    "trend_half_range",
)


def schema_hash(arrays):
    parts = [f"{name}:{arrays[name].ndim}:{arrays[name].dtype.str}" for name in ARRAY_FIELDS]
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()


def save_fitted_model(model, path, report=None):
    """Write ``model`` (and an optional solve report) to ``path``."""
    arrays = {
        "beta_hat": np.asarray(model.beta_hat, dtype=float),
        "gamma_hat": np.asarray(model.gamma_hat, dtype=float),
        "gamma_W": np.asarray(model.gamma_W, dtype=float),
        "locations": np.asarray(model.locations, dtype=float),
        "responses": np.asarray(model.responses, dtype=float),
        "trend_exponents": np.asarray(model.trend.exponents, dtype=np.int64),
        "trend_center": np.asarray(model.trend.center, dtype=float),
        "trend_half_range": np.asarray(model.trend.half_range, dtype=float),
    }
    basis_meta = None
    if model.basis is not None:
        basis_meta = {
            "levels": model.basis.levels,
            "leaf_min": model.basis.tree.leaf_min,
            "nnz": model.basis.nnz,
            "rank_mode": model.basis.rank_mode,
        }
    header = {
        "format": FORMAT_NAME,
        "version": settings.MLKRIG["MODEL_FORMAT_VERSION"],
        "schema_hash": schema_hash(arrays),
        "theta": {"nu": model.theta_hat.nu, "rho": model.theta_hat.rho, "sigma2": model.theta_hat.sigma2},
        "theta_source": model.theta_source,
        "sigma2_profiled": model.sigma2_profiled,
        "trend": {"d_loc": model.trend.d_loc, "degree": model.trend.degree},
        "basis": basis_meta,
        "transform": model.transform,
        "report": report.to_dict() if report is not None else None,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)
    logger.info("Saved fitted model (N=%d, p=%d) to %s", model.n, model.p, path)
    return header


def _schema_error(path, reason):
    return ValidationError(
        "%(path)s is not a usable model file: %(reason)s.",
        code="model_schema",
        params={"path": str(path), "reason": reason},
    )


def load_fitted_model(path):
    """Read a model written by ``save_fitted_model``; returns (FittedModel, header)."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise _schema_error(path, str(exc)) from exc

    if "header" not in contents:
        raise _schema_error(path, "missing header")
    header = json.loads(str(contents.pop("header")[()]))
    if header.get("format") != FORMAT_NAME:
        raise _schema_error(path, f"format {header.get('format')!r}")
    if header.get("version", 0) > settings.MLKRIG["MODEL_FORMAT_VERSION"]:
        raise _schema_error(path, f"version {header.get('version')} is newer than this library")
    missing = [name for name in ARRAY_FIELDS if name not in contents]
    if missing:
        raise _schema_error(path, f"missing arrays {missing}")
    if schema_hash(contents) != header.get("schema_hash"):
        raise _schema_error(path, "schema hash mismatch")

    trend = TrendBasis.total_degree(header["trend"]["d_loc"], header["trend"]["degree"])
    if not np.array_equal(trend.exponents, contents["trend_exponents"]):
        raise _schema_error(path, "trend exponent table does not match")
    trend = replace(trend, center=contents["trend_center"], half_range=contents["trend_half_range"])

    theta = header["theta"]
    model = FittedModel(
        theta_hat=CovarianceModel(nu=theta["nu"], rho=theta["rho"], sigma2=theta["sigma2"]),
        beta_hat=contents["beta_hat"],
        gamma_hat=contents["gamma_hat"],
        gamma_W=contents["gamma_W"],
        trend=trend,
        locations=contents["locations"],
        responses=contents["responses"],
        basis=None,
        theta_source=header.get("theta_source", "fixed-theta"),
        sigma2_profiled=header.get("sigma2_profiled", False),
        transform=header.get("transform"),
    )
    return model, header
