"""
Execution knobs shared by the numerical services, and the seeded generator.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from django.conf import settings


@dataclass(frozen=True)
class ExecutionOptions:
    threads: int = 1
    block_rows: int = 512
    memory_budget_mb: int = 512

    @classmethod
    def from_settings(cls, **overrides):
        """Defaults from settings.MLKRIG; ``None`` overrides are ignored."""
        cfg = settings.MLKRIG
        opts = cls(
            threads=max(1, int(cfg["THREADS"])),
            block_rows=max(1, int(cfg["MATVEC_BLOCK_ROWS"])),
            memory_budget_mb=int(cfg["MATVEC_MEMORY_BUDGET_MB"]),
        )
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(opts, **overrides) if overrides else opts

    def map(self, fn, items):
        """Ordered map over ``items``; threaded when more than one worker."""
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))


def resolve_options(options=None):
    return options if options is not None else ExecutionOptions.from_settings()


def make_rng(seed, *stream):
    """
    Counter-based generator keyed by (seed, stream...).

    Philox draws depend only on the key, so parallel callers that each own a
    stream cannot perturb one another.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))
