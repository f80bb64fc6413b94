"""Matched-prefix MLP graft/swap experiments, random residual controls and the window audit.

Every arm is compared with its own host on the identical forced token
prefix, and every convergence curve is measured against the arm's *own*
final distribution. Per-prompt deltas (averaged over token steps) are the
bootstrap rows; prompt clusters are the resampling unit.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from convgap.checkpoint import Checkpoint
from convgap.engine import check_window, forward_trace, require_dense, residual_perturbation_hook, substitute_mlp_window
from convgap.errors import UnpairedCheckpointsError, WindowError
from convgap.lens import RawLens
from convgap.metrics import convergence_curves, late_gap, window_mean
from convgap.parallel import pmap
from convgap.stats import DEFAULT_RESAMPLES, EstimateWithCI, cluster_bootstrap

DEFAULT_FORCED_STEPS = 128

AUDIT_ORDER = (
    "pre_late_half",
    "late_full",
    "late_front_half",
    "late_center_half",
    "late_terminal_half",
    "terminal_quarter",
)
AUDIT_TITLES = {
    "pre_late_half": "Pre-late half",
    "late_full": "Late full",
    "late_front_half": "Late front half",
    "late_center_half": "Late center half",
    "late_terminal_half": "Late terminal half",
    "terminal_quarter": "Terminal quarter",
}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class WindowSpec:
    label: str
    start: int
    end: int  # inclusive

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(range(self.start, self.end + 1))

    def __str__(self):
        return f"{self.start}-{self.end}"


def depth_windows(n_layers: int) -> dict[str, WindowSpec]:
    """Overlapping early/mid/late windows of round(0.4 L) layers."""
    if n_layers < 8:
        raise WindowError(f"depth windows need at least 8 layers, got {n_layers}")
    w = _round_half_up(0.4 * n_layers)
    mid = (n_layers - w) // 2
    return {
        "early": WindowSpec("early", 0, w - 1),
        "mid": WindowSpec("mid", mid, mid + w - 1),
        "late": WindowSpec("late", n_layers - w, n_layers - 1),
    }


def audit_windows(n_layers: int) -> dict[str, WindowSpec]:
    """The six width/center audit windows, derived from the late window.

    With W the late width and h = max(1, round(W/2)): pre-late half is the h
    layers just before the late window; front/center/terminal halves are h-layer
    slices of the late window; terminal quarter is the last max(1, round(W/4)).
    """
    late = depth_windows(n_layers)["late"]
    w = late.end - late.start + 1
    h = max(1, _round_half_up(w / 2))
    q = max(1, _round_half_up(w / 4))
    center = late.start + (w - h) // 2
    return {
        "pre_late_half": WindowSpec("pre_late_half", late.start - h, late.start - 1),
        "late_full": WindowSpec("late_full", late.start, late.end),
        "late_front_half": WindowSpec("late_front_half", late.start, late.start + h - 1),
        "late_center_half": WindowSpec("late_center_half", center, center + h - 1),
        "late_terminal_half": WindowSpec("late_terminal_half", late.end - h + 1, late.end),
        "terminal_quarter": WindowSpec("terminal_quarter", late.end - q + 1, late.end),
    }


def window_geometry(n_layers: int) -> dict[str, str]:
    geo = {k: str(v) for k, v in depth_windows(n_layers).items()}
    geo.update({k: str(v) for k, v in audit_windows(n_layers).items()})
    return geo


@dataclass
class InterventionOutcome:
    arm: str
    window: tuple[int, ...]
    rows: list[dict]
    late: EstimateWithCI
    window_delta: EstimateWithCI
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def delta_late_kl(self) -> float:
        return self.late.estimate

    @property
    def delta_window_kl(self) -> float:
        return self.window_delta.estimate

    def summary(self) -> dict:
        return {
            "arm": self.arm,
            "window": list(self.window),
            "delta_late_kl": self.late.to_row(),
            "delta_window_kl": self.window_delta.to_row(),
            "seeds": self.seeds,
            **self.extra,
        }


def _window_tuple(window) -> tuple[int, ...]:
    if isinstance(window, WindowSpec):
        return window.layers
    return tuple(sorted(set(int(l) for l in window)))


def _curves(model: Checkpoint, tokens, hooks=()):
    trace = forward_trace(model, tokens, hooks=hooks)
    return trace, convergence_curves(trace, RawLens(model))


def _summaries(curves, layers, fraction):
    late = float(np.mean(late_gap(curves, fraction)))
    win = float(np.mean(window_mean(curves, layers))) if layers else 0.0
    return late, win


def _substitution_row(prompt, host, arm_model, layers, fraction, forced_steps):
    tokens = prompt.tokens[:forced_steps]
    _, host_c = _curves(host, tokens)
    _, arm_c = _curves(arm_model, tokens)
    h_late, h_win = _summaries(host_c, layers, fraction)
    a_late, a_win = _summaries(arm_c, layers, fraction)
    return {
        "prompt_id": prompt.prompt_id,
        "cluster_id": prompt.cluster_id,
        "n_steps": len(tokens),
        "host_late": h_late,
        "arm_late": a_late,
        "delta_late": a_late - h_late,
        "host_window": h_win,
        "arm_window": a_win,
        "delta_window": a_win - h_win,
    }


def _estimates(rows, key_late, key_win, n_resamples, seed, name):
    clusters = [r["cluster_id"] for r in rows]
    late = cluster_bootstrap([r[key_late] for r in rows], clusters, n_resamples=n_resamples, seed=seed, name=f"{name}.late")
    win = cluster_bootstrap([r[key_win] for r in rows], clusters, n_resamples=n_resamples, seed=seed, name=f"{name}.window")
    return late, win


def _check_pair(a: Checkpoint, b: Checkpoint):
    require_dense(a, b)
    if not a.is_paired_with(b):
        raise UnpairedCheckpointsError("checkpoints are not a PT/IT pair (configs or tensor tables differ)")


def _run_substitution(host, donor, window, prompts, arm, late_fraction, forced_steps, n_resamples, seed, workers):
    _check_pair(host, donor)
    layers = _window_tuple(window)
    if layers:
        check_window(layers, host.config.n_layers)
        arm_model = substitute_mlp_window(host, donor, layers)
    else:
        arm_model = host
    if not prompts:
        raise ValueError("no prompts")
    fn = partial(
        _substitution_row, host=host, arm_model=arm_model, layers=layers, fraction=late_fraction, forced_steps=forced_steps
    )
    rows = pmap(fn, prompts, workers)
    late, win = _estimates(rows, "delta_late", "delta_window", n_resamples, seed, arm)
    return InterventionOutcome(
        arm=arm,
        window=layers,
        rows=rows,
        late=late,
        window_delta=win,
        extra={"late_fraction": late_fraction, "forced_steps": forced_steps},
    )


def _arm_name(prefix, window):
    if isinstance(window, WindowSpec) and window.label in ("early", "mid", "late"):
        return f"{prefix}_{window.label}"
    return "audit_window"


def run_graft_experiment(
    pt: Checkpoint,
    it: Checkpoint,
    window,
    prompts,
    late_fraction: float = 0.2,
    forced_steps: int = DEFAULT_FORCED_STEPS,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> InterventionOutcome:
    """IT MLP window grafted into the PT host."""
    return _run_substitution(
        pt, it, window, prompts, _arm_name("B", window), late_fraction, forced_steps, n_resamples, seed, workers
    )


def run_swap_experiment(
    it: Checkpoint,
    pt: Checkpoint,
    window,
    prompts,
    late_fraction: float = 0.2,
    forced_steps: int = DEFAULT_FORCED_STEPS,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> InterventionOutcome:
    """PT MLP window swapped into the IT host."""
    return _run_substitution(
        it, pt, window, prompts, _arm_name("D", window), late_fraction, forced_steps, n_resamples, seed, workers
    )


def control_seed(master_seed: int, arm: str, prompt_id: str, seed_index: int) -> list[int]:
    """Independent RNG stream key for one (arm, prompt, seed) cell."""
    return [int(master_seed), zlib.crc32(arm.encode()), zlib.crc32(prompt_id.encode()), int(seed_index)]


def graft_delta_norms(host_trace, graft_trace, layers) -> np.ndarray:
    """Per-position, per-window-layer norms of (graft residual - host residual)."""
    diff = graft_trace.residuals[:, list(layers)] - host_trace.residuals[:, list(layers)]
    return np.linalg.norm(diff, axis=-1)


def _random_control_row(prompt, pt, graft, layers, seeds, master_seed, fraction, forced_steps, per_layer_directions):
    tokens = prompt.tokens[:forced_steps]
    host_t, host_c = _curves(pt, tokens)
    graft_t, graft_c = _curves(graft, tokens)
    norms = graft_delta_norms(host_t, graft_t, layers)
    h_late, h_win = _summaries(host_c, layers, fraction)
    g_late, g_win = _summaries(graft_c, layers, fraction)
    per_seed = []
    for k in seeds:
        hook = residual_perturbation_hook(
            layers,
            norms,
            control_seed(master_seed, "random_control", prompt.prompt_id, k),
            base=host_t.residuals,
            per_layer_directions=per_layer_directions,
        )
        _, pert_c = _curves(pt, tokens, hooks=[hook])
        p_late, p_win = _summaries(pert_c, layers, fraction)
        per_seed.append((p_late - h_late, p_win - h_win))
    return {
        "prompt_id": prompt.prompt_id,
        "cluster_id": prompt.cluster_id,
        "n_steps": len(tokens),
        "host_late": h_late,
        "true_delta_late": g_late - h_late,
        "true_delta_window": g_win - h_win,
        "delta_late": float(np.mean([s[0] for s in per_seed])),
        "delta_window": float(np.mean([s[1] for s in per_seed])),
        "per_seed_delta_late": [s[0] for s in per_seed],
        "mean_matched_norm": float(norms.mean()),
    }


def run_random_control(
    pt: Checkpoint,
    it: Checkpoint,
    window,
    prompts,
    seeds: Sequence[int] = (0, 1, 2),
    late_fraction: float = 0.2,
    forced_steps: int = DEFAULT_FORCED_STEPS,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
    per_layer_directions: bool = False,
) -> InterventionOutcome:
    """Magnitude-matched random residual perturbation versus the true IT graft.

    For each prompt the true graft's residual-delta norms are measured per
    layer and position; the PT host is then rerun with its window residuals
    replaced by (host residual + random isotropic direction at that norm).
    """
    if len(seeds) < 1:
        raise ValueError("at least one seed required")
    _check_pair(pt, it)
    layers = _window_tuple(window)
    check_window(layers, pt.config.n_layers)
    graft = substitute_mlp_window(pt, it, layers)
    fn = partial(
        _random_control_row,
        pt=pt,
        graft=graft,
        layers=layers,
        seeds=list(seeds),
        master_seed=seed,
        fraction=late_fraction,
        forced_steps=forced_steps,
        per_layer_directions=per_layer_directions,
    )
    rows = pmap(fn, prompts, workers)
    late, win = _estimates(rows, "delta_late", "delta_window", n_resamples, seed, "random_control")
    true_late, true_win = _estimates(rows, "true_delta_late", "true_delta_window", n_resamples, seed, "true_graft")
    return InterventionOutcome(
        arm="random_control",
        window=layers,
        rows=rows,
        late=late,
        window_delta=win,
        seeds=list(seeds),
        extra={
            "true_graft_late": true_late.to_row(),
            "true_graft_window": true_win.to_row(),
            "late_fraction": late_fraction,
            "forced_steps": forced_steps,
            "control_family": "isotropic-gaussian-unit-direction"
            + ("-per-layer" if per_layer_directions else "-shared-across-window"),
            "control_caveat": "isotropic directions; not a projection onto a learned subspace",
        },
    )


def window_audit(
    pt: Checkpoint,
    it: Checkpoint,
    prompts,
    late_fraction: float = 0.2,
    forced_steps: int = DEFAULT_FORCED_STEPS,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> dict[str, dict[str, InterventionOutcome]]:
    """Graft and swap outcomes over the six audit windows, in audit row order."""
    _check_pair(pt, it)
    windows = audit_windows(pt.config.n_layers)
    out = {}
    for label in AUDIT_ORDER:
        w = windows[label]
        out[label] = {
            "graft": run_graft_experiment(pt, it, w, prompts, late_fraction, forced_steps, n_resamples, seed, workers),
            "swap": run_swap_experiment(it, pt, w, prompts, late_fraction, forced_steps, n_resamples, seed, workers),
        }
    return out
