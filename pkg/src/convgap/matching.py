"""Coarsened exact matching of PT and IT token steps on endpoint covariates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from convgap.errors import EmptyMatchError
from convgap.stats import DEFAULT_RESAMPLES, EstimateWithCI, cluster_bootstrap

log = logging.getLogger(__name__)

COVARIATES = ("confidence", "entropy", "margin")
SMD_THRESHOLD = 0.1


@dataclass
class EndpointRows:
    """Columnar token-step rows for one side (PT or IT) of a comparison."""

    confidence: np.ndarray
    entropy: np.ndarray
    margin: np.ndarray
    cluster_id: np.ndarray
    token_step_id: np.ndarray
    metrics: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in COVARIATES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.cluster_id = np.asarray([str(c) for c in self.cluster_id])
        self.token_step_id = np.asarray([str(t) for t in self.token_step_id])
        self.metrics = {k: np.asarray(v, dtype=np.float64) for k, v in self.metrics.items()}
        n = len(self.confidence)
        if any(len(getattr(self, c)) != n for c in COVARIATES) or len(self.cluster_id) != n:
            raise ValueError("endpoint row columns have unequal lengths")

    def __len__(self):
        return len(self.confidence)

    def covariates(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in COVARIATES], axis=1)

    @classmethod
    def from_records(cls, records: Sequence[dict], metric_names: Sequence[str] = ()) -> "EndpointRows":
        return cls(
            confidence=[r["confidence"] for r in records],
            entropy=[r["entropy"] for r in records],
            margin=[r["margin"] for r in records],
            cluster_id=[r["cluster_id"] for r in records],
            token_step_id=[r["token_step_id"] for r in records],
            metrics={m: [r[m] for r in records] for m in metric_names},
        )


@dataclass
class Coarsening:
    cuts: list[np.ndarray]
    n_bins: int
    warnings: list[str]


@dataclass
class Stratum:
    pt_rows: np.ndarray
    it_rows: np.ndarray
    weight: float


@dataclass
class MatchResult:
    strata: dict[tuple[int, ...], Stratum]
    pt_keys: np.ndarray
    it_keys: np.ndarray
    retention_pt: float
    retention_it: float
    smd: dict[str, float]
    smd_pre: dict[str, float]
    n_matched: dict[str, int]
    n_input: dict[str, int]
    n_bins: int
    warnings: list[str] = field(default_factory=list)

    @property
    def retention(self) -> float:
        """Minimum retention over the two sides."""
        return min(self.retention_pt, self.retention_it)

    @property
    def max_smd(self) -> float:
        return max(self.smd.values())

    @property
    def balance_flag(self) -> bool:
        return self.max_smd > SMD_THRESHOLD

    def summary(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "n_strata": len(self.strata),
            "retention_pt": self.retention_pt,
            "retention_it": self.retention_it,
            "min_retention": self.retention,
            "smd": self.smd,
            "smd_pre": self.smd_pre,
            "max_smd": self.max_smd,
            "balance_flag": self.balance_flag,
            "smd_threshold": SMD_THRESHOLD,
            "n_matched": self.n_matched,
            "n_input": self.n_input,
            "weighting": "min-count",
            "binning": "pooled-quantile",
            "warnings": self.warnings,
        }


def fit_coarsening(pooled: np.ndarray, n_bins: int) -> Coarsening:
    """Quantile cut-points per covariate on the pooled rows ``[N, n_covariates]``."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    pooled = np.asarray(pooled, dtype=np.float64)
    if len(pooled) == 0:
        raise ValueError("no rows to coarsen")
    qs = np.arange(1, n_bins) / n_bins
    cuts, warnings = [], []
    for j in range(pooled.shape[1]):
        col = pooled[:, j]
        if np.all(col == col[0]):
            name = COVARIATES[j] if j < len(COVARIATES) else str(j)
            warnings.append(f"covariate {name!r} is constant; using a single bin")
            log.warning(warnings[-1])
            cuts.append(np.array([]))
        else:
            cuts.append(np.quantile(col, qs))
    return Coarsening(cuts, n_bins, warnings)


def apply_coarsening(rows: np.ndarray, coarsening: Coarsening) -> np.ndarray:
    """Bin index per row and covariate; a value equal to a cut goes to the lower bin."""
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros(rows.shape, dtype=np.int64)
    for j, cut in enumerate(coarsening.cuts):
        out[:, j] = np.searchsorted(cut, rows[:, j], side="left")
    return out


def coarsen(rows: np.ndarray, n_bins: int = 5) -> np.ndarray:
    """MatchKey (bin tuple) per row, bins fitted on ``rows`` themselves."""
    return apply_coarsening(rows, fit_coarsening(rows, n_bins))


def _weighted_mean_var(x, w):
    m = np.sum(w * x) / np.sum(w)
    return m, np.sum(w * (x - m) ** 2) / np.sum(w)


def _smd(x_pt, w_pt, x_it, w_it) -> float:
    m1, v1 = _weighted_mean_var(x_pt, w_pt)
    m2, v2 = _weighted_mean_var(x_it, w_it)
    diff = abs(m1 - m2)
    sd = np.sqrt(0.5 * (v1 + v2))
    if sd == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / sd)


def row_weights(strata: dict, n_pt: int, n_it: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row weights: stratum weight spread evenly over that stratum's rows on each side."""
    w_pt, w_it = np.zeros(n_pt), np.zeros(n_it)
    for s in strata.values():
        w_pt[s.pt_rows] = s.weight / len(s.pt_rows)
        w_it[s.it_rows] = s.weight / len(s.it_rows)
    return w_pt, w_it


def _build_strata(pt_keys, it_keys, pt_idx=None, it_idx=None):
    pt_idx = np.arange(len(pt_keys)) if pt_idx is None else pt_idx
    it_idx = np.arange(len(it_keys)) if it_idx is None else it_idx
    pt_map: dict[tuple, list] = {}
    it_map: dict[tuple, list] = {}
    for i in pt_idx:
        pt_map.setdefault(tuple(int(v) for v in pt_keys[i]), []).append(int(i))
    for i in it_idx:
        it_map.setdefault(tuple(int(v) for v in it_keys[i]), []).append(int(i))
    common = sorted(set(pt_map) & set(it_map))
    raw = {k: min(len(pt_map[k]), len(it_map[k])) for k in common}
    total = sum(raw.values())
    return {
        k: Stratum(np.asarray(pt_map[k]), np.asarray(it_map[k]), raw[k] / total) for k in common
    }


def cem_match(pt: EndpointRows, it: EndpointRows, n_bins: int = 5) -> MatchResult:
    if len(pt) == 0 or len(it) == 0:
        raise ValueError("both sides need at least one row")
    xp, xi = pt.covariates(), it.covariates()
    coarsening = fit_coarsening(np.concatenate([xp, xi]), n_bins)
    pt_keys = apply_coarsening(xp, coarsening)
    it_keys = apply_coarsening(xi, coarsening)
    strata = _build_strata(pt_keys, it_keys)
    if not strata:
        raise EmptyMatchError("no stratum holds both PT and IT rows")
    n_pt = sum(len(s.pt_rows) for s in strata.values())
    n_it = sum(len(s.it_rows) for s in strata.values())
    w_pt, w_it = row_weights(strata, len(pt), len(it))
    smd = {c: _smd(xp[:, j], w_pt, xi[:, j], w_it) for j, c in enumerate(COVARIATES)}
    ones_p, ones_i = np.ones(len(pt)), np.ones(len(it))
    smd_pre = {c: _smd(xp[:, j], ones_p, xi[:, j], ones_i) for j, c in enumerate(COVARIATES)}
    return MatchResult(
        strata=strata,
        pt_keys=pt_keys,
        it_keys=it_keys,
        retention_pt=n_pt / len(pt),
        retention_it=n_it / len(it),
        smd=smd,
        smd_pre=smd_pre,
        n_matched={"pt": n_pt, "it": n_it},
        n_input={"pt": len(pt), "it": len(it)},
        n_bins=n_bins,
        warnings=list(coarsening.warnings),
    )


def smd(match: MatchResult, covariate: str) -> float:
    return match.smd[covariate]


def _stratum_codes(match: MatchResult):
    keys = np.concatenate([match.pt_keys, match.it_keys])
    _, codes = np.unique(keys, axis=0, return_inverse=True)
    codes = codes.reshape(-1)
    n_pt = len(match.pt_keys)
    return codes[:n_pt], codes[n_pt:], int(codes.max()) + 1


def _effect_from_codes(cp, ci, pv, iv, k) -> float:
    n_p = np.bincount(cp, minlength=k)
    n_i = np.bincount(ci, minlength=k)
    both = (n_p > 0) & (n_i > 0)
    if not both.any():
        return float("nan")
    s_p = np.bincount(cp, weights=pv, minlength=k)[both]
    s_i = np.bincount(ci, weights=iv, minlength=k)[both]
    w = np.minimum(n_p, n_i)[both].astype(np.float64)
    diff = s_i / n_i[both] - s_p / n_p[both]
    return float(np.sum(w * diff) / np.sum(w))


def matched_effect(
    match: MatchResult,
    pt: EndpointRows,
    it: EndpointRows,
    metric: str,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    units: str = "nats",
    name: str = "",
) -> EstimateWithCI:
    """Weighted mean over strata of (IT stratum mean - PT stratum mean), cluster-bootstrapped.

    Resamples draw whole clusters (shared by both sides); each resample keeps
    the original bin keys and re-forms strata and min-count weights from the
    drawn rows.
    """
    if metric not in pt.metrics or metric not in it.metrics:
        raise KeyError(f"metric {metric!r} missing from rows")
    pv, iv = pt.metrics[metric], it.metrics[metric]
    matched_pt = np.concatenate([s.pt_rows for s in match.strata.values()])
    matched_it = np.concatenate([s.it_rows for s in match.strata.values()])
    if len(pv) != len(pt) or len(iv) != len(it):
        raise ValueError(f"metric {metric!r} does not cover every row")
    if not (np.isfinite(pv[matched_pt]).all() and np.isfinite(iv[matched_it]).all()):
        raise ValueError(f"metric {metric!r} has missing values on matched rows")

    code_p, code_i, k = _stratum_codes(match)
    n_pt = len(pt)
    clusters = np.concatenate([pt.cluster_id, it.cluster_id])

    def stat(idx):
        pidx = idx[idx < n_pt]
        iidx = idx[idx >= n_pt] - n_pt
        return _effect_from_codes(code_p[pidx], code_i[iidx], pv[pidx], iv[iidx], k)

    return cluster_bootstrap(
        np.arange(len(clusters)), clusters, stat, n_resamples=n_resamples, seed=seed, units=units, name=name
    )
