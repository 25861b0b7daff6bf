"""
The n-sphere efficiency benchmark.

Points are drawn uniformly on a unit sphere; all but the last coordinate are
the locations and the last coordinate is the response. For every size the
sweep builds the multilevel basis, solves the BLUP system with multilevel PCG
and the untransformed system with plain CG, and estimates both condition
numbers.
"""
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import scipy
from django.conf import settings
from django.core.exceptions import ValidationError

from kriging.services.design import TrendBasis, build_design_matrix, build_kdtree, default_leaf_min
from kriging.services.execution import make_rng, resolve_options
from kriging.services.kernels import CovarianceModel, CovarianceOperator
from kriging.services.mlbasis import build_multilevel_basis
from kriging.services.solver import MultilevelOperator, default_max_iter, estimate_condition_number, pcg, solve_blup

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["N", "kappa_C", "kappa_CW", "itr_C", "itr_CW", "MB_s", "Itr_s", "Total_s", "Eff"]

EXTRAPOLATION_RULE = (
    "Eff = p * (one measured single-level CG solve time) / (multilevel MB + Itr time); "
    "single level = unpreconditioned CG on C"
)


@dataclass(frozen=True)
class SphereBenchSpec:
    """
    One sweep. ``d`` counts the covariates under the "table" convention
    (sphere in R^{d+1}) and the ambient dimension under "literal" (sphere in
    R^d, d - 1 covariates).
    """

    d: int = 20
    sizes: tuple = (1000, 2000, 4000)
    nu: float = 1.25
    rho: float = 10.0
    degree: int = 2
    tol: float = 1e-3
    seed: int = 0
    convention: str = "table"
    label: str = "custom"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
            raise ValidationError(
                "Benchmark sizes must be positive and strictly increasing, got %(sizes)s.",
                code="sizes",
                params={"sizes": sizes},
            )
        if self.d < 3:
            raise ValidationError("The sphere benchmark needs d >= 3.", code="parameter_domain")
        if self.convention not in ("table", "literal"):
            raise ValidationError(
                "Unknown convention %(convention)r.", code="parameter_domain", params={"convention": self.convention}
            )

    @property
    def ambient(self):
        return self.d + 1 if self.convention == "table" else self.d

    @property
    def d_loc(self):
        return self.ambient - 1


PRESETS = {
    "desk": SphereBenchSpec(d=20, degree=2, sizes=(1000, 2000, 4000), label="desk"),
    "table-a": SphereBenchSpec(d=20, degree=3, sizes=(16000, 32000, 64000), label="table-a"),
    "table-b": SphereBenchSpec(d=25, degree=2, sizes=(16000, 32000, 64000, 128000), label="table-b"),
}


@dataclass(frozen=True, eq=False)
class ObservationSet:
    locations: np.ndarray = field(repr=False)
    responses: np.ndarray = field(repr=False)

    @property
    def n(self):
        return len(self.responses)


def generate_sphere_dataset(spec):
    """Nested observation sets, one per size; each is a prefix of the next."""
    rng = make_rng(spec.seed, 0)
    points = rng.standard_normal((spec.sizes[-1], spec.ambient))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return [ObservationSet(locations=points[:n, :-1], responses=points[:n, -1]) for n in spec.sizes]


def efficiency_ratio(single_level_cost, multilevel_cost):
    if multilevel_cost <= 0 or single_level_cost < 0:
        raise ValidationError(
            "Costs must be positive (got %(single)s and %(multi)s).",
            code="parameter_domain",
            params={"single": single_level_cost, "multi": multilevel_cost},
        )
    return single_level_cost / multilevel_cost


def extrapolate_single_level_cost(p, one_solve_time):
    """Cost of p single-level solves from one measured solve."""
    return p * one_solve_time


def cost_exponent(sizes, times):
    """Least-squares slope of log(time) against log(N); None with fewer than two usable rows."""
    pairs = [(n, t) for n, t in zip(sizes, times) if t and t > 0]
    if len(pairs) < 2:
        return None
    logs = np.log(np.array(pairs, dtype=float))
    slope, _ = np.polyfit(logs[:, 0], logs[:, 1], 1)
    return float(slope)


@dataclass
class SweepResult:
    spec: SphereBenchSpec
    rows: list
    manifest: dict

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=SWEEP_COLUMNS)

    def write(self, csv_path, manifest_path=None):
        self.to_frame().to_csv(csv_path, index=False, na_rep="-")
        manifest_path = manifest_path or f"{os.path.splitext(str(csv_path))[0]}.manifest.json"
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2)
            fh.write("\n")
        return csv_path, manifest_path


def _sweep_row(obs, spec, options):
    n = obs.n
    model = CovarianceModel(nu=spec.nu, rho=spec.rho)

    started = time.perf_counter()
    trend = TrendBasis.total_degree(spec.d_loc, spec.degree, obs.locations)
    X = build_design_matrix(trend, obs.locations)
    tree = build_kdtree(obs.locations, default_leaf_min(trend.p))
    basis = build_multilevel_basis(X, tree, options=options)
    mb_s = time.perf_counter() - started

    cov = CovarianceOperator(obs.locations, model, options)
    kappa_c = estimate_condition_number(cov, n)
    kappa_cw = estimate_condition_number(MultilevelOperator(basis, cov), basis.n_w)

    fitted, report = solve_blup(obs.locations, obs.responses, trend, basis, model, tol=spec.tol, options=options)
    itr_s = report.wall_time

    started = time.perf_counter()
    single = pcg(cov.matvec, obs.responses - X @ fitted.beta_hat, spec.tol, max(default_max_iter(n), n))
    single_s = time.perf_counter() - started
    if not single.converged:
        logger.warning("Single-level CG did not reach tol=%g at N=%d in %d iterations", spec.tol, n, single.iterations)

    total_s = mb_s + itr_s
    eff = efficiency_ratio(extrapolate_single_level_cost(trend.p, single_s), total_s) if total_s > 0 else None
    if basis.n_w == 0:
        logger.info("N=%d equals p: the multilevel system is zero-dimensional", n)
    if kappa_c is not None and kappa_cw is not None and kappa_cw > kappa_c:
        logger.warning("kappa(C_W)=%.3g exceeds kappa(C)=%.3g at N=%d", kappa_cw, kappa_c, n)
    if basis.n_w and report.iterations >= single.iterations:
        logger.warning("Multilevel PCG used %d iterations vs %d single-level at N=%d",
                       report.iterations, single.iterations, n)

    return {
        "N": n,
        "kappa_C": kappa_c,
        "kappa_CW": kappa_cw,
        "itr_C": single.iterations,
        "itr_CW": report.iterations,
        "MB_s": mb_s,
        "Itr_s": itr_s,
        "Total_s": total_s,
        "Eff": eff,
    }


def run_conditioning_sweep(spec, options=None):
    """Run every size of ``spec`` sequentially and collect the report rows and manifest."""
    options = resolve_options(options)
    datasets = generate_sphere_dataset(spec)
    rows = []
    for obs in datasets:
        row = _sweep_row(obs, spec, options)
        logger.info(
            "N=%d: kappa_C=%s kappa_CW=%s itr_C=%d itr_CW=%d total %.2fs",
            row["N"],
            row["kappa_C"],
            row["kappa_CW"],
            row["itr_C"],
            row["itr_CW"],
            row["Total_s"],
        )
        rows.append(row)

    manifest = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "version": {"mlkrig": settings.VERSION, "build": settings.APP_VERSION},
        "p": TrendBasis.total_degree(spec.d_loc, spec.degree).p,
        "extrapolation": EXTRAPOLATION_RULE,
        "alpha": cost_exponent([r["N"] for r in rows], [r["Itr_s"] for r in rows]),
        "host": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "cpu_count": os.cpu_count(),
            "threads": options.threads,
            "block_rows": options.block_rows,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    return SweepResult(spec=spec, rows=rows, manifest=manifest)
