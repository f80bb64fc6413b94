"""Fixed-history replay: one teacher continuation per prompt forced through several cells.

Steps are counted from the start of the forced continuation, so cells whose
serialized prefixes differ in length (native chat vs raw) still align on the
same (prompt, step) keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from convgap.checkpoint import Checkpoint
from convgap.engine import forward_trace, softmax
from convgap.errors import AlignmentError, TemplateError, TokenRangeError
from convgap.lens import RawLens
from convgap.matching import EndpointRows, cem_match, matched_effect
from convgap.metrics import convergence_curves, endpoint_arrays, late_gap
from convgap.parallel import pmap
from convgap.stats import DEFAULT_RESAMPLES, EstimateWithCI, cluster_bootstrap

CELL_LABELS = ("pt_raw", "it_native", "it_raw")
CONTRASTS = (("it_native", "pt_raw"), ("it_raw", "pt_raw"), ("it_native", "it_raw"))


def serialize_prompt(prompt_tokens: Sequence[int], template: str, checkpoint: Checkpoint) -> list[int]:
    """Raw: tokens unchanged. Native: [system prefix] + user prefix + prompt + assistant prefix."""
    tokens = [int(t) for t in prompt_tokens]
    if template == "raw":
        return tokens
    if template != "native":
        raise ValueError(f"unknown template regime {template!r}")
    user = checkpoint.template("user_prefix")
    assistant = checkpoint.template("assistant_prefix")
    if user is None or assistant is None:
        raise TemplateError("native serialization needs template.user_prefix and template.assistant_prefix metadata")
    system = checkpoint.template("system_prefix") or []
    return system + user + tokens + assistant


@dataclass(frozen=True)
class Cell:
    label: str
    model: Checkpoint
    template: str  # "native" | "raw"

    def __post_init__(self):
        if self.template not in ("native", "raw"):
            raise ValueError(f"unknown template regime {self.template!r}")
        if self.template == "native" and (
            self.model.template("user_prefix") is None or self.model.template("assistant_prefix") is None
        ):
            raise TemplateError(f"cell {self.label!r} is native but the checkpoint carries no template metadata")

    def serialize(self, prompt_tokens) -> list[int]:
        return serialize_prompt(prompt_tokens, self.template, self.model)


def standard_cells(pt: Checkpoint, it: Checkpoint) -> dict[str, Cell]:
    return {
        "pt_raw": Cell("pt_raw", pt, "raw"),
        "it_native": Cell("it_native", it, "native"),
        "it_raw": Cell("it_raw", it, "raw"),
    }


def generate_continuation(
    model: Checkpoint,
    context: Sequence[int],
    max_tokens: int,
    decoding: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> list[int]:
    """Autoregressive decode; greedy takes the lowest-index argmax."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    if decoding not in ("greedy", "temperature"):
        raise ValueError(f"unknown decoding {decoding!r}")
    if decoding == "temperature" and temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    seq = [int(t) for t in context]
    out = []
    for _ in range(max_tokens):
        logits = forward_trace(model, seq, layers=()).final_logits[-1]
        if decoding == "greedy":
            nxt = int(np.argmax(logits))
        else:
            p = softmax(logits / temperature)
            nxt = int(rng.choice(len(p), p=p))
        out.append(nxt)
        seq.append(nxt)
    return out


def _teacher_row(prompt, cell, max_tokens, decoding, temperature, seed):
    cont = generate_continuation(
        cell.model, cell.serialize(prompt.tokens), max_tokens, decoding, temperature, seed=[seed, prompt_index_key(prompt)]
    )
    return prompt.prompt_id, cont


def prompt_index_key(prompt) -> int:
    import zlib

    return zlib.crc32(prompt.prompt_id.encode())


def teacher_histories(
    prompts,
    teacher: Cell,
    max_tokens: int = 32,
    decoding: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    workers: int = 1,
) -> dict[str, list[int]]:
    fn = partial(_teacher_row, cell=teacher, max_tokens=max_tokens, decoding=decoding, temperature=temperature, seed=seed)
    return dict(pmap(fn, prompts, workers))


def _replay_prompt(prompt, history, cells, fraction):
    rows = []
    for cell in cells:
        prefix = cell.serialize(prompt.tokens)
        seq = prefix + list(history[:-1])
        trace = forward_trace(cell.model, seq)
        curves = convergence_curves(trace, RawLens(cell.model))
        positions = np.arange(len(prefix) - 1, len(prefix) - 1 + len(history))
        gaps = late_gap(curves[positions], fraction)
        conf, ent, margin = endpoint_arrays(softmax(trace.final_logits[positions]))
        for step in range(len(history)):
            rows.append(
                {
                    "prompt_id": prompt.prompt_id,
                    "cluster_id": prompt.cluster_id,
                    "step": step,
                    "cell": cell.label,
                    "late_gap": float(gaps[step]),
                    "confidence": float(conf[step]),
                    "entropy": float(ent[step]),
                    "margin": float(margin[step]),
                }
            )
    return rows


@dataclass
class ReplayResult:
    rows: list[dict]
    quality: dict
    meta: dict = field(default_factory=dict)

    def cell_rows(self, label: str) -> list[dict]:
        return [r for r in self.rows if r["cell"] == label]


def replay_cells(
    prompts,
    histories: dict[str, list[int]],
    cells: Sequence[Cell],
    late_fraction: float = 0.2,
    malformed: int = 0,
    workers: int = 1,
) -> ReplayResult:
    """Teacher-force every history through every cell; no sampling happens here."""
    for cell in cells:
        vocab = cell.model.config.vocab_size
        for p in prompts:
            bad = [t for t in list(p.tokens) + list(histories.get(p.prompt_id, [])) if t >= vocab]
            if bad:
                raise TokenRangeError(f"cell {cell.label!r}: token {bad[0]} exceeds vocab {vocab} (prompt {p.prompt_id})")
    usable = [p for p in prompts if histories.get(p.prompt_id)]
    fn = partial(_replay_prompt, cells=list(cells), fraction=late_fraction)
    chunks = pmap(_ReplayTask(fn, histories), usable, workers)
    rows = [r for chunk in chunks for r in chunk]

    expected = {(p.prompt_id, s) for p in prompts for s in range(len(histories.get(p.prompt_id, [])))}
    missing = 0
    for cell in cells:
        have = {(r["prompt_id"], r["step"]) for r in rows if r["cell"] == cell.label}
        missing += len(expected - have)
    missing += sum(1 for p in prompts if not histories.get(p.prompt_id))
    quality = {
        "malformed_records": int(malformed),
        "missing_aligned_steps": int(missing),
        "n_prompts": len(prompts),
        "n_aligned_steps": len(expected),
    }
    return ReplayResult(rows=rows, quality=quality, meta={"cells": [c.label for c in cells], "late_fraction": late_fraction})


class _ReplayTask:
    def __init__(self, fn, histories):
        self.fn = fn
        self.histories = histories

    def __call__(self, prompt):
        return self.fn(prompt, self.histories[prompt.prompt_id])


def _aligned(rows_a, rows_b, key="late_gap"):
    a = {(r["prompt_id"], r["step"]): r for r in rows_a}
    b = {(r["prompt_id"], r["step"]): r for r in rows_b}
    if set(a) != set(b):
        gap = sorted(set(a) ^ set(b))[:3]
        raise AlignmentError(f"rows do not align on (prompt, step); e.g. {gap}")
    keys = sorted(a)
    return keys, a, b


def paired_cell_effect(
    rows_a, rows_b, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0, metric: str = "late_gap", name: str = ""
) -> EstimateWithCI:
    """Mean over aligned (prompt, step) of a - b, prompt-cluster bootstrapped."""
    keys, a, b = _aligned(rows_a, rows_b)
    if not keys:
        raise AlignmentError("no aligned rows")
    diffs = [a[k][metric] - b[k][metric] for k in keys]
    clusters = [a[k]["cluster_id"] for k in keys]
    return cluster_bootstrap(diffs, clusters, n_resamples=n_resamples, seed=seed, name=name)


def _endpoint_rows(rows, keys, metric):
    return EndpointRows(
        confidence=[rows[k]["confidence"] for k in keys],
        entropy=[rows[k]["entropy"] for k in keys],
        margin=[rows[k]["margin"] for k in keys],
        cluster_id=[rows[k]["cluster_id"] for k in keys],
        token_step_id=[f"{k[0]}:{k[1]}" for k in keys],
        metrics={metric: [rows[k][metric] for k in keys]},
    )


def cem_cell_effect(
    rows_a, rows_b, n_bins: int = 5, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0, metric: str = "late_gap", name: str = ""
):
    """Endpoint-matched variant: ``b`` plays the reference side, ``a`` the treated side."""
    keys, a, b = _aligned(rows_a, rows_b)
    ref = _endpoint_rows(b, keys, metric)
    treated = _endpoint_rows(a, keys, metric)
    match = cem_match(ref, treated, n_bins)
    est = matched_effect(match, ref, treated, metric, n_resamples=n_resamples, seed=seed, name=name)
    return est, match


def run_replay(
    pt: Checkpoint,
    it: Checkpoint,
    prompts,
    max_tokens: int = 32,
    teacher: str = "it_native",
    decoding: str = "greedy",
    temperature: float = 1.0,
    late_fraction: float = 0.2,
    n_bins: int = 5,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    malformed: int = 0,
    workers: int = 1,
) -> tuple[ReplayResult, list[EstimateWithCI], dict]:
    """Generate teacher histories, replay them through the three standard cells, estimate contrasts."""
    cells = standard_cells(pt, it)
    if teacher not in cells:
        raise ValueError(f"teacher must be one of {sorted(cells)}")
    histories = teacher_histories(prompts, cells[teacher], max_tokens, decoding, temperature, seed, workers)
    result = replay_cells(prompts, histories, [cells[c] for c in CELL_LABELS], late_fraction, malformed, workers)
    result.meta.update({"teacher": teacher, "decoding": decoding, "temperature": temperature, "max_tokens": max_tokens})
    estimates = []
    quality = dict(result.quality)
    retention, max_smd = [], []
    for a, b in CONTRASTS:
        name = f"{teacher}.paired.{a}-{b}"
        estimates.append(paired_cell_effect(result.cell_rows(a), result.cell_rows(b), n_resamples, seed, name=name))
        est, match = cem_cell_effect(
            result.cell_rows(a), result.cell_rows(b), n_bins, n_resamples, seed, name=f"{teacher}.cem.{a}-{b}"
        )
        estimates.append(est)
        retention.append(match.retention)
        max_smd.append(match.max_smd)
    quality["min_retention"] = min(retention)
    quality["max_smd"] = max(max_smd)
    return result, estimates, quality
