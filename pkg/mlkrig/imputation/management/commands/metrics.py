"""
Score a column of predictions against a column of ground truth.

Usage:
    python manage.py metrics --input scored.csv --truth y_true --predicted y_hat [--metrics out.json]
"""
from imputation.services.datasets import CsvSchema, load_csv
from imputation.services.metrics import compute_metrics
from kriging.management.base import RunConfigCommand


class Command(RunConfigCommand):
    help = "Compute rMSE, MAPE and lnQ between a truth column and a prediction column"

    run_options = ("config", "input", "truth", "predicted", "metrics", "method", "missing_sentinel")

    def run(self, config, execution):
        self.require(config, "input", "truth", "predicted")
        schema = CsvSchema(predictors=(config.predicted,), truth=config.truth, missing_sentinel=config.missing_sentinel)
        frame = load_csv(config.input, schema).frame
        label = config.method if "method" in config.explicit else config.predicted
        report = compute_metrics(frame[config.truth].to_numpy(), frame[config.predicted].to_numpy(), method=label)
        self.write_json(report.to_dict(), config.metrics)
        if config.metrics:
            self.stdout.write(self.style.SUCCESS(
                f"{label}: rMSE={report.rmse_rel:.4g} MAPE={report.mape:.4g} lnQ={report.lnq:.4g} "
                f"over {report.n_validation} rows; written to {config.metrics}"
            ))
