"""Cluster bootstrap intervals and the estimate record every pipeline reports."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

CI_METHOD = "percentile"
DEFAULT_RESAMPLES = 2000


@dataclass(frozen=True)
class EstimateWithCI:
    estimate: float
    ci_low: float
    ci_high: float
    units: str = "nats"
    n_rows: int = 0
    n_clusters: int = 0
    seed: int | None = None
    name: str = ""
    config: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.units:
            raise ValueError("units must be non-empty")

    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0

    def to_row(self) -> dict[str, Any]:
        row = dataclasses.asdict(self)
        return {k: row[k] for k in ("name", "estimate", "ci_low", "ci_high", "units", "n_rows", "n_clusters", "seed", "config")}

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "EstimateWithCI":
        return cls(
            estimate=float(row["estimate"]),
            ci_low=float(row["ci_low"]),
            ci_high=float(row["ci_high"]),
            units=row["units"],
            n_rows=int(row.get("n_rows", 0)),
            n_clusters=int(row.get("n_clusters", 0)),
            seed=row.get("seed"),
            name=row.get("name", ""),
            config=dict(row.get("config") or {}),
        )


def _group_rows(clusters) -> list[np.ndarray]:
    clusters = np.asarray([str(c) for c in clusters])
    keys = sorted(set(clusters.tolist()))
    return [np.flatnonzero(clusters == k) for k in keys]


def cluster_bootstrap(
    values,
    clusters: Sequence,
    statistic: str | Callable[[np.ndarray], float] = "mean",
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    units: str = "nats",
    alpha: float = 0.05,
    name: str = "",
) -> EstimateWithCI:
    """Percentile CI from resampling whole clusters with replacement.

    ``statistic`` is ``"mean"`` or a callable receiving the selected row indices
    (duplicates included) and returning a float; the point estimate is the
    statistic on all rows. Cluster ids are sorted before resampling, so the
    result depends only on (rows, seed, n_resamples).
    """
    values = np.asarray(values, dtype=np.float64) if statistic == "mean" else values
    n = len(values) if statistic == "mean" else len(clusters)
    if n == 0:
        raise ValueError("cannot bootstrap an empty row set")
    if len(clusters) != n:
        raise ValueError("one cluster id per row required")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if statistic == "mean":
        def stat(idx):
            return float(values[idx].mean())
    elif callable(statistic):
        stat = statistic
    else:
        raise ValueError(f"unknown statistic {statistic!r}")

    groups = _group_rows(clusters)
    k = len(groups)
    estimate = stat(np.arange(n))
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, k, size=(n_resamples, k))
    stats = np.empty(n_resamples)
    for i, pick in enumerate(draws):
        stats[i] = stat(np.concatenate([groups[j] for j in pick]))
    ok = np.isfinite(stats)
    if not ok.any():
        raise ValueError("statistic undefined on every resample")
    lo, hi = np.quantile(stats[ok], [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    return EstimateWithCI(
        estimate=estimate,
        ci_low=float(lo),
        ci_high=float(hi),
        units=units,
        n_rows=n,
        n_clusters=k,
        seed=seed,
        name=name,
        config={
            "ci_method": CI_METHOD,
            "n_resamples": n_resamples,
            "alpha": alpha,
            "undefined_resamples": int((~ok).sum()),
        },
    )


def _fixed(x: float, decimals: int) -> str:
    s = f"{x:+.{decimals}f}"
    if float(s) == 0.0:
        s = "+" + s[1:]
    return s


def format_value(x: float, decimals: int = 3) -> str:
    return _fixed(x, decimals)


def format_estimate(e: EstimateWithCI, decimals: int = 3, units: bool = True) -> str:
    """``+0.425 nats [+0.356, +0.493]``."""
    head = _fixed(e.estimate, decimals)
    if units:
        head = f"{head} {e.units}"
    return f"{head} [{_fixed(e.ci_low, decimals)}, {_fixed(e.ci_high, decimals)}]"


def format_count(n: int) -> str:
    return f"{int(n):,}"
