"""Divergences, convergence curves and the summaries built on them.

Distributions live on the last axis. Every divergence is accumulated in
float64; ``kl`` floors its reference at ``EPS`` (then renormalizes) so a
numerically-zero probability never produces an infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-12
LN2 = math.log(2.0)


def _as_dist(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def kl(p, q, floor: float = EPS):
    """KL(p || q) in nats over the last axis (scalar for 1-D inputs)."""
    p = _as_dist(p, "p")
    q = _as_dist(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    low = q < floor
    if low.any():
        rows = low.any(axis=-1, keepdims=True)
        fq = np.maximum(q, floor)
        q = np.where(rows, fq / fq.sum(axis=-1, keepdims=True), q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def _kl_raw(p, m):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0.0, p * (np.log(p) - np.log(m)), 0.0).sum(axis=-1)


def js(p, q):
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    p = _as_dist(p, "p")
    q = _as_dist(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    out = np.clip(0.5 * _kl_raw(p, m) + 0.5 * _kl_raw(q, m), 0.0, LN2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ConvergenceCurve:
    values: np.ndarray
    lens_kind: str = "raw"
    token_step_id: str = ""
    cluster_id: str = ""


def curve_values(decoded: np.ndarray) -> np.ndarray:
    """KL(decode_l || decode_{L-1}) for decoded distributions ``[..., L, V]``."""
    final = decoded[..., -1:, :]
    return kl(decoded, np.broadcast_to(final, decoded.shape))


def convergence_curves(trace, lens) -> np.ndarray:
    """Per-position curves ``[T, L]`` for a fully-captured trace."""
    n = lens.model.config.n_layers
    if tuple(trace.layers) != tuple(range(n)):
        raise ValueError(f"trace captured layers {trace.layers}; convergence curves need all {n}")
    return curve_values(lens.decode_all(trace.residuals))


def convergence_curve(trace, lens, position: int = -1, token_step_id="", cluster_id="") -> ConvergenceCurve:
    values = convergence_curves(trace, lens)[position]
    return ConvergenceCurve(values, lens.kind, token_step_id, cluster_id)


def late_count(n_layers: int, fraction: float = 0.2) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return max(1, math.ceil(round(fraction * n_layers, 9)))


def late_gap(curve, fraction: float = 0.2):
    """Mean of the last ceil(fraction * L) curve values (vectorized over leading axes)."""
    values = curve.values if isinstance(curve, ConvergenceCurve) else np.asarray(curve, dtype=np.float64)
    k = late_count(values.shape[-1], fraction)
    out = values[..., -k:].mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def window_mean(curve, layers) -> np.ndarray:
    values = curve.values if isinstance(curve, ConvergenceCurve) else np.asarray(curve, dtype=np.float64)
    return values[..., list(layers)].mean(axis=-1)


def commitment_depth(curve, tau: float = 0.05) -> int:
    """Smallest layer from which every later value stays below ``tau`` (L if none)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    values = curve.values if isinstance(curve, ConvergenceCurve) else np.asarray(curve, dtype=np.float64)
    depth = len(values)
    for layer in range(len(values) - 1, -1, -1):
        if values[layer] < tau:
            depth = layer
        else:
            break
    return depth


@dataclass(frozen=True)
class EndpointStats:
    confidence: float
    entropy: float
    margin: float


def endpoint_arrays(final: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(confidence, entropy, margin) over the last axis."""
    final = np.asarray(final, dtype=np.float64)
    if final.shape[-1] < 2:
        raise ValueError("margin needs a vocabulary of at least 2")
    top2 = -np.sort(-final, axis=-1, kind="stable")[..., :2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(final > 0, final * np.log(final), 0.0).sum(axis=-1)
    return top2[..., 0], np.maximum(ent, 0.0), top2[..., 0] - top2[..., 1]


def endpoint_stats(final) -> EndpointStats:
    c, h, m = endpoint_arrays(final)
    return EndpointStats(float(c), float(h), float(m))


def adjacent_js(decoded: np.ndarray, region) -> np.ndarray:
    """Mean JS between consecutive decoded layers within ``region`` (``[..., L, V]`` input)."""
    region = list(region)
    if len(region) < 2:
        raise ValueError("adjacent JS needs a region of at least 2 layers")
    a = decoded[..., region[:-1], :]
    b = decoded[..., region[1:], :]
    return js(a, b).mean(axis=-1)


def adjacent_js_profile(trace, lens, region) -> np.ndarray:
    """Per-position endpoint-free layer-to-layer movement over ``region``."""
    return adjacent_js(lens.decode_all(trace.residuals), region)


def top1_flips(decoded: np.ndarray, reference_layer: int, relative_to: str = "adjacent") -> np.ndarray:
    n = decoded.shape[-2]
    if not 0 <= reference_layer < n - 1:
        raise ValueError(f"reference_layer must be in [0, {n - 1})")
    top = np.argmax(decoded, axis=-1)  # first max on ties
    span = top[..., reference_layer : n - 1]
    if relative_to == "adjacent":
        nxt = top[..., reference_layer + 1 : n]
    elif relative_to == "final":
        nxt = top[..., n - 1 : n]
    else:
        raise ValueError(f"unknown flip reference {relative_to!r}")
    return (span != nxt).sum(axis=-1)


def future_top1_flips(trace, lens, reference_layer: int, relative_to: str = "adjacent") -> np.ndarray:
    """Per-position count of top-1 changes between consecutive layers from ``reference_layer`` on."""
    return top1_flips(lens.decode_all(trace.residuals), reference_layer, relative_to)


def default_reference_layer(n_layers: int) -> int:
    return min(int(math.floor(0.8 * n_layers)), n_layers - 2)
