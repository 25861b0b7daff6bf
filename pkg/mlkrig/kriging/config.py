"""
Run configuration for the management commands.

Values are merged in this order, later winning:
    settings.MLKRIG defaults  <-  config file (--config)  <-  command-line flags

Config file grammar (one entry per line):
    line    := blank | comment | entry
    comment := optional spaces, "#", anything
    entry   := key spaces? "=" spaces? value spaces? comment?
    key     := a flag name with or without the leading "--"; "-" and "_" are
               interchangeable (max-iter, max_iter, --max-iter)
    value   := parsed by the same converter as the flag; lists are
               comma-separated; booleans are true/false/yes/no/on/off/1/0
Unknown keys and unparsable values are configuration errors.
"""
import math
from dataclasses import dataclass, fields, replace

from django.conf import settings

from kriging.exceptions import ConfigError

TRUE_WORDS = {"true", "yes", "on", "1"}
FALSE_WORDS = {"false", "no", "off", "0"}


def to_bool(value):
    if isinstance(value, bool):
        return value
    word = str(value).strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def to_float(value):
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
        return math.inf
    return float(value)


def to_names(value):
    if isinstance(value, (list, tuple)):
        return tuple(str(v).strip() for v in value if str(v).strip())
    return tuple(part.strip() for part in str(value).split(",") if part.strip())


def to_sizes(value):
    parts = value if isinstance(value, (list, tuple)) else str(value).split(",")
    sizes = tuple(int(str(p).strip()) for p in parts if str(p).strip())
    if not sizes or any(n <= 0 for n in sizes):
        raise ValueError("sizes must be positive integers")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly increasing, got {','.join(map(str, sizes))}")
    return sizes


def to_str(value):
    return str(value).strip()


@dataclass(frozen=True)
class RunConfig:
    """Every field a command can take, with its default."""

    command: str = ""
    config: str = None
    input: str = None
    output: str = None
    metrics: str = None
    model: str = None
    response: str = None
    predictors: tuple = ()
    truth: str = None
    missing_sentinel: str = None
    task: str = None
    degree: int = 1
    nu: float = None
    rho: float = None
    sigma2: float = 1.0
    profile_sigma2: bool = True
    tol: float = 1e-6
    max_iter: int = None
    leaf_min: int = None
    sparse_tau: float = None
    split: float = None
    seed: int = 0
    threads: int = None
    method: str = "kriging"
    k: int = None
    sizes: tuple = None
    max_evals: int = None
    solve_method: str = "pcg"
    preset: str = "desk"
    d: int = None
    convention: str = "table"
    predicted: str = None
    explicit: frozenset = frozenset()

    def validate(self):
        problems = []
        if self.split is not None and not (0 < self.split < 1):
            problems.append(f"split must lie strictly between 0 and 1 (got {self.split})")
        if not (0 < self.tol < 1):
            problems.append(f"tol must lie in (0, 1) (got {self.tol})")
        if self.degree < 0:
            problems.append(f"degree must be >= 0 (got {self.degree})")
        if self.threads is not None and self.threads < 1:
            problems.append(f"threads must be >= 1 (got {self.threads})")
        if (self.nu is None) != (self.rho is None):
            problems.append("fixing theta needs both nu and rho")
        if self.sparse_tau is not None and self.sparse_tau < 0:
            problems.append(f"sparse-tau must be >= 0 (got {self.sparse_tau})")
        if self.solve_method not in ("pcg", "direct", "auto"):
            problems.append(f"solve-method must be pcg, direct or auto (got {self.solve_method})")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def effective_threads(self):
        return self.threads or settings.MLKRIG["THREADS"]


CONVERTERS = {
    "config": to_str,
    "input": to_str,
    "output": to_str,
    "metrics": to_str,
    "model": to_str,
    "response": to_str,
    "predictors": to_names,
    "truth": to_str,
    "missing_sentinel": to_str,
    "task": to_str,
    "degree": int,
    "nu": float,
    "rho": float,
    "sigma2": float,
    "profile_sigma2": to_bool,
    "tol": float,
    "max_iter": int,
    "leaf_min": int,
    "sparse_tau": to_float,
    "split": float,
    "seed": int,
    "threads": int,
    "method": to_str,
    "k": int,
    "sizes": to_sizes,
    "max_evals": int,
    "solve_method": to_str,
    "preset": to_str,
    "d": int,
    "convention": to_str,
    "predicted": to_str,
}

assert set(CONVERTERS) == {f.name for f in fields(RunConfig)} - {"command", "explicit"}


def normalize_key(key):
    return key.strip().lstrip("-").replace("-", "_")


def convert(key, value, source):
    try:
        return CONVERTERS[key](value)
    except (TypeError, ValueError) as exc:
        flag = "--" + key.replace("_", "-")
        raise ConfigError(f"{source}: invalid value {value!r} for {flag}: {exc}") from exc


def parse_config_file(path):
    """Read a key=value config file into converted RunConfig values."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc

    values = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        key = normalize_key(key)
        if key not in CONVERTERS or key == "config":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = convert(key, value.strip(), f"{path}:{lineno}")
    return values


def build_run_config(command, flags, allowed=None):
    """
    Merge defaults, the file named by ``flags['config']`` and the flags.

    ``flags`` maps RunConfig field names to raw values; None means "not given".
    ``allowed`` restricts which keys a config file may set for this command.
    """
    flag_values = {}
    for key, value in flags.items():
        if key in CONVERTERS and value is not None:
            flag_values[key] = convert(key, value, "command line")

    file_values = {}
    if flag_values.get("config"):
        file_values = parse_config_file(flag_values["config"])
        if allowed is not None:
            extra = sorted(set(file_values) - set(allowed))
            if extra:
                raise ConfigError(f"{flag_values['config']}: keys {extra} do not apply to '{command}'")

    merged = {**file_values, **flag_values}
    return replace(RunConfig(command=command, explicit=frozenset(merged)), **merged).validate()
