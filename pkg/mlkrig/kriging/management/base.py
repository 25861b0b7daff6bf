"""
Shared plumbing for the mlkrig management commands: flag declarations,
config merging and the mapping of failures to exit codes.

Exit codes: 0 success, 2 data error, 3 numerical failure, 4 config error.
"""
import argparse
import json
import logging

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from kriging.config import build_run_config
from kriging.exceptions import ConfigError, NumericalError
from kriging.services.execution import ExecutionOptions

logger = logging.getLogger(__name__)

EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4

FLAG_HELP = {
    "config": "Flat key = value config file; flags override its values",
    "input": "Input CSV (header row, comma-separated, UTF-8)",
    "output": "Output path",
    "metrics": "Metrics / report JSON path",
    "model": "Fitted model file (.npz) to use instead of fitting",
    "response": "Response column",
    "predictors": "Comma-separated predictor columns (the kriging locations)",
    "truth": "Column holding ground truth for the imputed rows",
    "missing_sentinel": "Cell value read as missing in addition to empty cells",
    "task": "Regression preset: totchg, los or log-totchg",
    "degree": "Total degree w of the polynomial trend",
    "nu": "Matérn shape; with --rho fixes theta and skips estimation",
    "rho": "Matérn correlation length; with --nu fixes theta",
    "sigma2": "Variance scale used when sigma2 is not profiled",
    "profile_sigma2": "Profile sigma2 in closed form (default on)",
    "tol": "Relative residual tolerance of the multilevel solve",
    "max_iter": "PCG iteration limit (default ceil(10 sqrt(N)))",
    "leaf_min": "Minimum kd-tree leaf size (default max(p, LEAF_MIN_FLOOR))",
    "sparse_tau": "Distance criterion for the sparsified C_W, in units of rho (0 or inf: dense)",
    "split": "Training fraction of a seeded train/validation split",
    "seed": "Random seed",
    "threads": "Worker threads (default: MLKRIG_THREADS or host cores)",
    "method": "kriging, gls, knn, knn-reg, a comma list, or all",
    "k": "Neighbours for knn and knn-reg (default 10)",
    "sizes": "Comma-separated, strictly increasing sample sizes",
    "max_evals": "Likelihood evaluations allowed in the theta search",
    "solve_method": "pcg, direct or auto",
    "preset": "Benchmark preset: desk, table-a or table-b",
    "d": "Sphere benchmark dimension",
    "convention": "Sphere convention: table (d covariates) or literal (d - 1 covariates)",
    "predicted": "Column holding predictions",
}


class RunConfigCommand(BaseCommand):
    """
    Base for commands driven by a RunConfig. Subclasses list their flags in
    ``run_options`` and implement ``run(config, execution)``.
    """

    run_options = ()

    @property
    def command_name(self):
        return self.__module__.rsplit(".", 1)[-1]

    def add_arguments(self, parser):
        for name in self.run_options:
            flag = "--" + name.replace("_", "-")
            if name == "profile_sigma2":
                parser.add_argument(
                    flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=FLAG_HELP[name]
                )
            else:
                parser.add_argument(flag, dest=name, default=None, help=FLAG_HELP[name])

    def handle(self, *args, **options):
        try:
            flags = {name: options.get(name) for name in self.run_options}
            config = build_run_config(self.command_name, flags, allowed=self.run_options)
            execution = ExecutionOptions.from_settings(threads=config.threads)
            self.run(config, execution)
        except ConfigError as exc:
            raise CommandError(f"Configuration error: {exc}", returncode=EXIT_CONFIG)
        except ValidationError as exc:
            raise CommandError(f"Data error: {'; '.join(exc.messages)}", returncode=EXIT_DATA)
        except NumericalError as exc:
            raise CommandError(f"Numerical failure: {exc}", returncode=EXIT_NUMERICAL)

    def run(self, config, execution):
        raise NotImplementedError

    def require(self, config, *names):
        missing = ["--" + n.replace("_", "-") for n in names if not getattr(config, n)]
        if missing:
            raise ConfigError(f"'{self.command_name}' needs {', '.join(missing)}")

    def write_json(self, payload, path=None):
        text = json.dumps(payload, indent=2, default=float)
        if path:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        else:
            self.stdout.write(text)
        return text
