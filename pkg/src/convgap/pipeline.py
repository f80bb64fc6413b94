"""Gap pipeline: per-step curves, endpoint rows, and the four-row summary for one PT/IT pair."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from convgap.checkpoint import Checkpoint
from convgap.engine import forward_trace, require_dense, softmax
from convgap.errors import UnpairedCheckpointsError
from convgap.interventions import depth_windows
from convgap.lens import RawLens
from convgap.matching import EndpointRows, cem_match, matched_effect
from convgap.metrics import (
    adjacent_js,
    commitment_depth,
    curve_values,
    default_reference_layer,
    endpoint_arrays,
    late_count,
    late_gap,
    top1_flips,
)
from convgap.parallel import pmap
from convgap.stats import DEFAULT_RESAMPLES, cluster_bootstrap

CURVE_FIELDS = ("family", "checkpoint_role", "lens_kind", "token_step_id", "cluster_id", "layer", "value_nats")
ROW_FIELDS = ("token_step_id", "cluster_id", "role", "confidence", "entropy", "margin", "late_gap_raw", "late_gap_tuned")


@dataclass
class GapConfig:
    late_fraction: float = 0.2
    n_bins: int = 5
    n_resamples: int = DEFAULT_RESAMPLES
    seed: int = 0
    tau: float = 0.05
    reference_layer: int | None = None
    flip_reference: str = "adjacent"
    js_region: tuple[int, ...] | None = None

    def resolved(self, n_layers: int) -> dict:
        ref = default_reference_layer(n_layers) if self.reference_layer is None else self.reference_layer
        region = self.js_region
        if region is None:
            region = tuple(range(n_layers - max(2, late_count(n_layers, self.late_fraction)), n_layers))
        return {
            "late_fraction": self.late_fraction,
            "n_bins": self.n_bins,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "tau": self.tau,
            "reference_layer": ref,
            "flip_reference": self.flip_reference,
            "js_region": list(region),
            "late_layers": late_count(n_layers, self.late_fraction),
            "kl_floor": 1e-12,
        }


def _prompt_rows(prompt, model, role, lenses, cfg):
    """Everything the pipeline needs from one model on one prompt."""
    trace = forward_trace(model, prompt.tokens)
    final = softmax(trace.final_logits)
    conf, ent, margin = endpoint_arrays(final)
    out = {"curves": {}, "late": {}}
    for kind, lens in lenses.items():
        decoded = lens.decode_all(trace.residuals)
        curves = curve_values(decoded)
        out["curves"][kind] = curves
        out["late"][kind] = late_gap(curves, cfg["late_fraction"])
        if kind == "raw":
            out["js"] = adjacent_js(decoded, cfg["js_region"])
            out["flips"] = top1_flips(decoded, cfg["reference_layer"], cfg["flip_reference"])
            out["depth"] = np.array([commitment_depth(c, cfg["tau"]) for c in curves])
    out.update(confidence=conf, entropy=ent, margin=margin, role=role, prompt=prompt)
    return out


@dataclass
class GapResult:
    config: dict
    pt: list[dict]
    it: list[dict]
    estimates: list
    match: dict
    depth: dict
    family: str

    def summary(self) -> dict:
        return {
            "claim_group": "estimates",
            "family": self.family,
            "rows": [e.to_row() for e in self.estimates],
            "matching": self.match,
            "commitment_depth": self.depth,
            "config": self.config,
        }

    def write_curves(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_FIELDS)
            for side in (self.pt, self.it):
                for rec in side:
                    p = rec["prompt"]
                    for kind, curves in sorted(rec["curves"].items()):
                        for t, curve in enumerate(curves):
                            for layer, v in enumerate(curve):
                                w.writerow((self.family, rec["role"], kind, f"{p.prompt_id}:{t}", p.cluster_id, layer, repr(float(v))))
        return path

    def row_records(self) -> list[dict]:
        out = []
        for side in (self.pt, self.it):
            for rec in side:
                p = rec["prompt"]
                tuned = rec["late"].get("tuned")
                for t in range(len(rec["confidence"])):
                    out.append(
                        {
                            "token_step_id": f"{p.prompt_id}:{t}",
                            "cluster_id": p.cluster_id,
                            "role": rec["role"],
                            "confidence": float(rec["confidence"][t]),
                            "entropy": float(rec["entropy"][t]),
                            "margin": float(rec["margin"][t]),
                            "late_gap_raw": float(rec["late"]["raw"][t]),
                            "late_gap_tuned": float(tuned[t]) if tuned is not None else "",
                        }
                    )
        return out

    def write_rows(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.row_records():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path


def _endpoint_rows(side, metrics):
    conf, ent, mar, clus, ids = [], [], [], [], []
    vals = {m: [] for m in metrics}
    for rec in side:
        p = rec["prompt"]
        n = len(rec["confidence"])
        conf.append(rec["confidence"])
        ent.append(rec["entropy"])
        mar.append(rec["margin"])
        clus += [p.cluster_id] * n
        ids += [f"{p.prompt_id}:{t}" for t in range(n)]
        for m in metrics:
            vals[m].append(rec["late"][m])
    return EndpointRows(
        np.concatenate(conf), np.concatenate(ent), np.concatenate(mar), clus, ids, {m: np.concatenate(v) for m, v in vals.items()}
    )


def _paired_prompt_effect(pt_side, it_side, key, cfg, name, units):
    """IT-minus-PT per-prompt mean of ``key``, bootstrapped over prompt clusters."""
    diffs, clusters = [], []

    def value(rec):
        return float(np.mean(rec["late"]["raw"] if key == "late" else rec[key]))

    for a, b in zip(pt_side, it_side):
        diffs.append(value(b) - value(a))
        clusters.append(a["prompt"].cluster_id)
    return cluster_bootstrap(diffs, clusters, n_resamples=cfg["n_resamples"], seed=cfg["seed"], units=units, name=name)


def run_gap_pipeline(
    pt: Checkpoint,
    it: Checkpoint,
    prompts,
    config: GapConfig | None = None,
    tuned: dict | None = None,
    workers: int = 1,
) -> GapResult:
    """``tuned`` optionally maps role ("pt"/"it") to a fitted TunedLens for that checkpoint."""
    require_dense(pt, it)
    if pt.config != it.config:
        raise UnpairedCheckpointsError("PT and IT configs differ")
    if not prompts:
        raise ValueError("no prompts")
    config = config or GapConfig()
    n = pt.config.n_layers
    cfg = config.resolved(n)
    sides = {}
    for role, model in (("pt", pt), ("it", it)):
        lenses = {"raw": RawLens(model)}
        if tuned and role in tuned:
            lenses["tuned"] = tuned[role]
        fn = partial(_prompt_rows, model=model, role=role, lenses=lenses, cfg=cfg)
        sides[role] = pmap(fn, prompts, workers)

    estimates = [
        _paired_prompt_effect(sides["pt"], sides["it"], "late", cfg, "late_gap.paired", "nats"),
    ]
    metrics = ["raw"] + (["tuned"] if tuned and "pt" in tuned and "it" in tuned else [])
    pt_rows = _endpoint_rows(sides["pt"], metrics)
    it_rows = _endpoint_rows(sides["it"], metrics)
    match = cem_match(pt_rows, it_rows, cfg["n_bins"])
    for m in metrics:
        estimates.append(
            matched_effect(match, pt_rows, it_rows, m, cfg["n_resamples"], cfg["seed"], name=f"late_gap.matched.{m}")
        )
    estimates.append(_paired_prompt_effect(sides["pt"], sides["it"], "js", cfg, "adjacent_js", "JS"))
    estimates.append(_paired_prompt_effect(sides["pt"], sides["it"], "flips", cfg, "future_top1_flips", "flips"))

    depth = {}
    for role in ("pt", "it"):
        d = np.concatenate([r["depth"] for r in sides[role]])
        depth[role] = {"mean": float(d.mean()), "median": float(np.median(d)), "tau": cfg["tau"]}
    windows = {k: list(v.layers) for k, v in depth_windows(n).items()} if n >= 8 else {}
    cfg = {**cfg, "depth_windows": windows, "flip_definition": cfg["flip_reference"], "lens_kinds": metrics}
    return GapResult(
        config=cfg,
        pt=sides["pt"],
        it=sides["it"],
        estimates=estimates,
        match=match.summary(),
        depth=depth,
        family=pt.config.family_id,
    )
