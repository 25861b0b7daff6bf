"""
Fit a multilevel kriging model to the rows of a CSV whose response is observed.

Usage:
    python manage.py fit --input table.csv --predictors x1,x2,x3 --response y \
        --output model.npz [--nu 1.5 --rho 0.5] [--config fit.cfg]

This will:
1. Estimate theta by the decoupled likelihood (skipped when --nu and --rho are given)
2. Solve the BLUP system on every observed row
3. Write the model file, a JSON fit report and, when theta was estimated,
   the likelihood trace as CSV next to the model
"""
import os
from dataclasses import replace

import numpy as np

from imputation.services.datasets import require_complete_predictors
from imputation.services.pipeline import fit_config_from, fit_kriging_model, load_task_dataset
from imputation.services.transforms import transform_pipeline
from kriging.management.base import RunConfigCommand
from kriging.services.persistence import save_fitted_model


class Command(RunConfigCommand):
    help = "Fit a multilevel kriging model and save it with a fit report"

    run_options = (
        "config",
        "input",
        "output",
        "metrics",
        "response",
        "predictors",
        "task",
        "missing_sentinel",
        "degree",
        "nu",
        "rho",
        "sigma2",
        "profile_sigma2",
        "tol",
        "max_iter",
        "leaf_min",
        "sparse_tau",
        "seed",
        "threads",
        "max_evals",
        "solve_method",
    )

    def run(self, config, execution):
        self.require(config, "input", "output")
        dataset, transform = load_task_dataset(
            config.input, config.task, config.response, config.predictors, config.missing_sentinel
        )
        train = dataset.observed_rows()
        if not transform.is_identity:
            dataset = transform_pipeline(dataset, transform, train_rows=train)
            train = np.intersect1d(train, dataset.frame.index.to_numpy())
        require_complete_predictors(dataset, train, "training rows")

        self.stdout.write(self.style.MIGRATE_HEADING(
            f"Fitting {dataset.response} ~ {', '.join(dataset.predictors)} on {len(train)} rows"
        ))
        fitted, details = fit_kriging_model(
            dataset.predictor_matrix(train), dataset.response_vector(train), fit_config_from(config), execution
        )
        if dataset.transform is not None:
            fitted = replace(fitted, transform=dataset.transform.to_dict())

        report = details["solve_report"]
        save_fitted_model(fitted, config.output, report)

        stem = os.path.splitext(config.output)[0]
        trace_path = None
        if details["trace"] is not None:
            trace_path = f"{stem}.trace.csv"
            details["trace"].to_csv(trace_path)

        theta = fitted.theta_hat
        payload = {
            "model": config.output,
            "theta_source": details["theta_source"],
            "theta": {"nu": theta.nu, "rho": theta.rho, "sigma2": theta.sigma2},
            "sigma2_profiled": fitted.sigma2_profiled,
            "beta": [float(b) for b in fitted.beta_hat],
            "n": fitted.n,
            "p": fitted.p,
            "n_merged": details["n_merged"],
            "likelihood_evaluations": len(details["trace"]) if details["trace"] is not None else 0,
            "trace": trace_path,
            "solve": report.to_dict(),
        }
        self.write_json(payload, config.metrics or f"{stem}.report.json")

        self.stdout.write(f"  theta ({details['theta_source']}): nu={theta.nu:.4g} rho={theta.rho:.4g} "
                          f"sigma2={theta.sigma2:.4g}")
        self.stdout.write(f"  PCG: {report.iterations} iterations, relative residual "
                          f"{report.final_relative_residual:.3g}")
        self.stdout.write(self.style.SUCCESS(f"Model written to {config.output}"))
