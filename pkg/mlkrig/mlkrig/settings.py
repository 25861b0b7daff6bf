"""
Django settings for the mlkrig project.

The project has no web surface: Django provides configuration, logging and
the management-command CLI for the kriging and imputation apps.

For the full list of Django settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "unsafe-dev-secret-key")

DEBUG = os.getenv("DJANGO_DEBUG", "False").lower() == "true"

# Application version
# VERSION: Manually updated semantic version (update when releasing)
# APP_VERSION: build identifier, recorded in benchmark manifests
VERSION = "1.0.0"
APP_VERSION = os.getenv("APP_VERSION", "dev")


# Application definition

INSTALLED_APPS = [
    "kriging",
    "imputation",
]

# Numerical commands never touch a database.
DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"


def _env_int(name, default):
    raw = os.getenv(name)
    return int(raw) if raw else default


def _env_float(name, default):
    raw = os.getenv(name)
    return float(raw) if raw else default


# Library defaults. Every entry can be overridden from the environment;
# command-line flags and config files override these again (see kriging.config).
MLKRIG = {
    # Worker threads for row-block matvecs and leaf factorizations.
    "THREADS": _env_int("MLKRIG_THREADS", os.cpu_count() or 1),
    "MATVEC_BLOCK_ROWS": _env_int("MLKRIG_MATVEC_BLOCK_ROWS", 512),
    # Dense C is cached only when N*N*8 bytes fits in this budget.
    "MATVEC_MEMORY_BUDGET_MB": _env_int("MLKRIG_MATVEC_MEMORY_BUDGET_MB", 512),
    "DENSE_FALLBACK_N": _env_int("MLKRIG_DENSE_FALLBACK_N", 2000),
    "DENSE_EIG_MAX": _env_int("MLKRIG_DENSE_EIG_MAX", 2000),
    "LANCZOS_STEPS": _env_int("MLKRIG_LANCZOS_STEPS", 50),
    # auto | always | never
    "PRECONDITIONER": os.getenv("MLKRIG_PRECONDITIONER", "auto"),
    "PRECONDITIONER_KAPPA_SKIP": 50.0,
    "PRECONDITIONER_PROBE_STEPS": 12,
    "LEAF_MIN_FLOOR": _env_int("MLKRIG_LEAF_MIN_FLOOR", 1),
    # strict | adaptive
    "LOCAL_RANK_MODE": os.getenv("MLKRIG_LOCAL_RANK_MODE", "strict"),
    "PIVOT_RTOL": 1e-12,
    "SPARSE_TAU": _env_float("MLKRIG_SPARSE_TAU", 3.0),
    "MAX_EVALS": _env_int("MLKRIG_MAX_EVALS", 200),
    "ESTIMATION_ROWS": _env_int("MLKRIG_ESTIMATION_ROWS", 2000),
    "KNN_K": 10,
    "MODEL_FORMAT_VERSION": 1,
}


# Logging configuration
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "timestamped": {
            "format": "[{asctime}] {levelname} {name}: {message}",
            "style": "{",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "timestamped",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
    "loggers": {
        "django": {
            "handlers": ["console"],
            "level": "INFO",
            "propagate": False,
        },
        "kriging": {
            "handlers": ["console"],
            "level": os.getenv("MLKRIG_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
        "imputation": {
            "handlers": ["console"],
            "level": os.getenv("MLKRIG_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}
