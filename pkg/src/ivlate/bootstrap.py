"""Nonparametric bootstrap standard errors.

Rows are resampled i.i.d. with replacement; each replicate draws from its
own RNG substream spawned from the master seed, so results are
bit-identical across runs and across worker counts, and independent of the
order in which replicates execute.  Replicates where the statistic is
undefined (an ivlate error, e.g. a covariate cell losing an instrument
arm, or a non-finite value) are counted as failures and excluded.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BootstrapError, IVLateError
from .sample import Sample


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication count, master seed, resampling unit, worker count."""

    replications: int = 1000
    seed: int = 0
    resample_unit: str = "rows"
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.replications < 2:
            raise ValueError("need at least 2 bootstrap replications")
        if self.resample_unit != "rows":
            raise ValueError(f"unsupported resample unit {self.resample_unit!r}")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    failures: int
    replications: int


@dataclass(frozen=True, eq=False)
class BootstrapVectorResult:
    se: np.ndarray
    failures: int
    replications: int


def _replicate_values(
    sample: Sample,
    statistic: Callable[[Sample], np.ndarray],
    cfg: BootstrapConfig,
    width: int,
) -> np.ndarray:
    """(B, width) statistic values with NaN rows marking failed replicates.

    Replicate r's resample depends only on (seed, r), never on execution
    order or worker count: each r gets its own spawned substream.
    """
    n = sample.n
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    values = np.full((cfg.replications, width), np.nan)

    def run(r: int) -> None:
        rng = np.random.default_rng(children[r])
        idx = rng.integers(0, n, size=n)
        try:
            v = np.asarray(statistic(sample.take(idx)), dtype=float).reshape(-1)
        except IVLateError:
            return
        if v.shape != (width,):
            raise ValueError(
                f"statistic returned shape {v.shape}, expected ({width},)"
            )
        values[r] = v

    if cfg.n_jobs == 1:
        for r in range(cfg.replications):
            run(r)
    else:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            list(pool.map(run, range(cfg.replications)))
    return values


def _reduce(values: np.ndarray, cfg: BootstrapConfig) -> tuple[np.ndarray, int]:
    ok = np.isfinite(values).all(axis=1)
    failures = int((~ok).sum())
    if failures > cfg.replications // 2:
        raise BootstrapError(
            f"{failures} of {cfg.replications} bootstrap replicates failed; "
            "standard errors would be unreliable"
        )
    kept = values[ok]
    if len(kept) < 2:
        raise BootstrapError("fewer than 2 usable bootstrap replicates")
    # per-column 1-D reductions so a component's SE is bit-identical
    # whether it is bootstrapped alone or jointly
    se = np.array([np.ascontiguousarray(kept[:, j]).std(ddof=1)
                   for j in range(kept.shape[1])])
    return se, failures


def bootstrap_se(
    sample: Sample,
    statistic: Callable[[Sample], float],
    cfg: BootstrapConfig,
) -> BootstrapResult:
    """Standard error (denominator B-1) of a scalar statistic over
    row-resampled replicates.

    Deterministic given (seed, replications); see module docstring for the
    failure-handling contract.
    """
    values = _replicate_values(
        sample, lambda s: np.array([statistic(s)]), cfg, width=1
    )
    se, failures = _reduce(values, cfg)
    return BootstrapResult(float(se[0]), failures, cfg.replications)


def bootstrap_se_vector(
    sample: Sample,
    statistic: Callable[[Sample], Sequence[float]],
    cfg: BootstrapConfig,
    width: int,
) -> BootstrapVectorResult:
    """Joint bootstrap of several statistics over the *same* resamples.

    Component i of the result equals ``bootstrap_se`` of the i-th
    component run alone with the same config, except that a replicate
    failing for any component is excluded for all of them.
    """
    values = _replicate_values(
        sample, lambda s: np.asarray(statistic(s), dtype=float), cfg, width
    )
    se, failures = _reduce(values, cfg)
    return BootstrapVectorResult(se, failures, cfg.replications)
