"""
Fill missing response cells of a CSV.

Usage:
    python manage.py impute --input records.csv --task totchg --output filled.csv \
        [--method kriging|gls|knn|knn-reg|all] [--split 0.9] [--truth true_totchg]
        [--model model.npz] [--sizes 2000,5000,10000] [--metrics metrics.json]

With --split, a seeded share of the observed rows is held out and every
method is scored on it. With --truth, imputed rows are scored against that
column. Without either, only the imputed CSV is written. With --sizes, the
split protocol is repeated on seeded subsets of each size and the per-size
metrics are written instead of an imputed file.
"""
import numpy as np
import pandas as pd

from imputation.services.datasets import write_imputed_csv
from imputation.services.metrics import score_imputation
from imputation.services.pipeline import (
    expand_methods,
    fit_config_from,
    impute_size_sweep,
    load_task_dataset,
    run_methods,
    run_split_protocol,
)
from imputation.services.transforms import TransformRecord, apply_transform_record, transform_pipeline
from kriging.exceptions import ConfigError
from kriging.management.base import RunConfigCommand
from kriging.services.persistence import load_fitted_model

DEFAULT_SPLIT = 0.9


class Command(RunConfigCommand):
    help = "Impute missing responses by multilevel kriging or a baseline"

    run_options = (
        "config",
        "input",
        "output",
        "metrics",
        "model",
        "response",
        "predictors",
        "truth",
        "missing_sentinel",
        "task",
        "method",
        "k",
        "split",
        "sizes",
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
        self.require(config, "input")
        if config.model and (config.split or config.sizes):
            raise ConfigError("--model cannot be combined with --split or --sizes, which refit on training rows")
        methods = expand_methods(config.method)
        raw, transform = load_task_dataset(
            config.input, config.task, config.response, config.predictors, config.missing_sentinel, config.truth
        )
        fit_config = fit_config_from(config)

        if config.sizes:
            self.run_sizes(config, raw, transform, methods, fit_config, execution)
            return

        self.require(config, "output")
        self.stdout.write(self.style.MIGRATE_HEADING(
            f"Imputing {raw.response} ({len(raw.missing_rows())} missing of {raw.n_rows} rows) "
            f"with {', '.join(methods)}"
        ))

        if config.split:
            results, train, validation = run_split_protocol(
                raw, methods, config.split, config.seed, fit_config, transform, include_missing=True,
                options=execution,
            )
            self.stdout.write(f"  split: {len(train)} training rows, {len(validation)} validation rows")
            for result in results:
                result.report = self.validation_report(result, validation, raw)
        else:
            dataset, fitted = raw, None
            if config.model:
                fitted, _ = load_fitted_model(config.model)
                if fitted.trend.d_loc != len(raw.predictors):
                    raise ConfigError(
                        f"{config.model} was fitted on {fitted.trend.d_loc} predictors, "
                        f"got {len(raw.predictors)}"
                    )
                dataset = apply_transform_record(raw, TransformRecord.from_dict(fitted.transform))
                self.stdout.write(f"  using model {config.model} (theta {fitted.theta_source})")
            elif not transform.is_identity:
                dataset = transform_pipeline(raw, transform, train_rows=raw.observed_rows())
            observed = np.intersect1d(raw.observed_rows(), dataset.frame.index.to_numpy())
            missing = np.intersect1d(raw.missing_rows(), dataset.frame.index.to_numpy())
            results = run_methods(
                methods, dataset, observed, missing, fit_config, fitted, config.truth, execution
            )

        primary = results[0]
        write_imputed_csv(raw, primary.values, config.output)
        filled = int(primary.values.index.isin(raw.missing_rows()).sum())
        self.stdout.write(f"  {primary.method}: filled {filled} cells")

        reports = [r.report for r in results if r.report is not None]
        if not reports:
            self.stdout.write(self.style.WARNING(
                "No truth column and no split: metrics omitted, only the imputed CSV was written."
            ))
        else:
            payload = reports[0].to_dict() if len(methods) == 1 else [r.to_dict() for r in reports]
            self.write_json(payload, config.metrics)
            for report in reports:
                self.stdout.write(
                    f"  {report.method}: rMSE={report.rmse_rel:.4g} MAPE={report.mape:.4g} lnQ={report.lnq:.4g}"
                )
        self.stdout.write(self.style.SUCCESS(f"Imputed file written to {config.output}"))

    def validation_report(self, result, validation, dataset):
        """Score on the held-out rows only; the result also covers rows with a missing response."""
        values = result.values.loc[result.values.index.isin(validation)]
        if values.empty:
            return None
        return score_imputation(dataset, values, result.method)

    def run_sizes(self, config, raw, transform, methods, fit_config, execution):
        self.stdout.write(self.style.MIGRATE_HEADING(
            f"Imputation size sweep over N={','.join(map(str, config.sizes))} with {', '.join(methods)}"
        ))
        records = impute_size_sweep(
            raw, config.sizes, methods, config.split or DEFAULT_SPLIT, config.seed, fit_config, transform, execution
        )
        if config.output:
            pd.DataFrame(records).to_csv(config.output, index=False)
        self.write_json(records, config.metrics)
        self.stdout.write(self.style.SUCCESS(f"{len(records)} size/method rows"))
