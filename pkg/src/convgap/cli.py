"""Command-line entry point: ``convgap <subcommand> ...``.

Every subcommand that writes an output directory also writes ``config.json``
there with the fully resolved parameters. Failures print one JSON object
``{"error": <type>, "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from convgap import __version__
from convgap.checkpoint import FORMAT_VERSION, load_checkpoint
from convgap.errors import ConfigError, ConvgapError, SchemaError

log = logging.getLogger("convgap")

EXIT_ERROR = 2
EXIT_CLAIMS_FAILED = 1


def _workers(value) -> int:
    return int(value) if value else (os.cpu_count() or 1)


def _parse_windows(spec: str, n_layers: int):
    """``early,mid,late`` names and/or explicit ``a-b`` ranges, comma separated."""
    from convgap.interventions import WindowSpec, depth_windows

    named = depth_windows(n_layers)
    out = []
    for part in [p.strip() for p in spec.split(",") if p.strip()]:
        if part in named:
            out.append(named[part])
        elif "-" in part:
            a, b = part.split("-", 1)
            out.append(WindowSpec(part, int(a), int(b)))
        elif part.isdigit():
            out.append(WindowSpec(part, int(part), int(part)))
        else:
            raise ConfigError(f"unknown window {part!r}; use early/mid/late or a-b")
    return out


def _write_config(out_dir: Path, args, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    resolved.update(extra or {})
    resolved["format_version"] = FORMAT_VERSION
    resolved["package_version"] = __version__
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _load_prompts(path, strict):
    from convgap.corpus import read_prompts

    prompts, malformed = read_prompts(path, strict=strict)
    if not prompts:
        raise ConfigError(f"no usable prompts in {path}")
    return prompts, malformed


def _dump(obj, path: Path) -> None:
    from convgap.report import _clean

    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _write_dict_rows(rows, fields, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    from convgap.corpus import make_synthetic_corpus, write_prompts
    from convgap.synthetic import SynthSpec, default_config, write_pair

    cfg = default_config(n_layers=args.layers) if args.layers else default_config()
    window = None
    if args.window:
        a, b = (int(x) for x in args.window.split("-"))
        window = tuple(range(a, b + 1))
    spec = SynthSpec(
        seed=args.seed,
        config=cfg,
        divergence_strength=args.strength,
        divergence_window=window,
        template_sensitivity=args.template_sensitivity,
    )
    out = Path(args.out)
    write_pair(spec, out)
    write_prompts(out / "corpus.jsonl", make_synthetic_corpus(args.prompts, args.tokens, cfg.vocab_size, seed=args.seed))
    _write_config(out, args, {"synth_spec": spec.to_dict()})
    print(json.dumps({"pt": str(out / "pt"), "it": str(out / "it"), "corpus": str(out / "corpus.jsonl")}))


def cmd_trace(args):
    from convgap.engine import forward_trace, softmax
    from convgap.lens import RawLens, load_tuned_lens
    from convgap.metrics import curve_values, endpoint_arrays

    model = load_checkpoint(args.model)
    prompts, malformed = _load_prompts(args.prompts, strict=not args.lenient)
    lenses = {"raw": RawLens(model)}
    if args.lens:
        lenses["tuned"] = load_tuned_lens(args.lens, model)
    out = Path(args.out)
    _write_config(out, args, {"malformed_records": malformed})
    role = model.role or "unknown"
    with (out / "curves.csv").open("w", newline="") as fh, (out / "endpoints.jsonl").open("w") as ep:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("family", "checkpoint_role", "lens_kind", "token_step_id", "cluster_id", "layer", "value_nats"))
        for p in prompts:
            trace = forward_trace(model, p.tokens)
            final = softmax(trace.final_logits)
            conf, ent, mar = endpoint_arrays(final)
            for kind, lens in lenses.items():
                curves = curve_values(lens.decode_all(trace.residuals))
                for t, curve in enumerate(curves):
                    for layer, v in enumerate(curve):
                        w.writerow((model.config.family_id, role, kind, f"{p.prompt_id}:{t}", p.cluster_id, layer, repr(float(v))))
            for t in range(len(p.tokens)):
                rec = {"token_step_id": f"{p.prompt_id}:{t}", "cluster_id": p.cluster_id, "role": role,
                       "confidence": float(conf[t]), "entropy": float(ent[t]), "margin": float(mar[t])}
                ep.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_fit_lens(args):
    from convgap.lens import fit_tuned_lens, split_corpus

    model = load_checkpoint(args.model)
    prompts, _ = _load_prompts(args.prompts, strict=True)
    train, held = split_corpus([p.tokens for p in prompts], args.holdout)
    lens = fit_tuned_lens(
        model, train, steps=args.steps, step_size=args.step_size, batch=args.batch, seed=args.seed,
        corpus_id=str(args.prompts),
    )
    out = Path(args.out)
    lens.save(out)
    _write_config(out, args, {"n_train": len(train), "n_holdout": len(held)})
    print(json.dumps({"lens": str(out), "initial_loss": lens.meta["initial_loss"], "final_loss": lens.meta["final_loss"]}))


def cmd_gap(args):
    from convgap.lens import load_tuned_lens
    from convgap.pipeline import GapConfig, run_gap_pipeline
    from convgap.report import write_summary

    pt, it = load_checkpoint(args.pt), load_checkpoint(args.it)
    prompts, malformed = _load_prompts(args.corpus, strict=not args.lenient)
    tuned = {}
    if args.pt_lens:
        tuned["pt"] = load_tuned_lens(args.pt_lens, pt)
    if args.it_lens:
        tuned["it"] = load_tuned_lens(args.it_lens, it)
    cfg = GapConfig(
        late_fraction=args.late_fraction, n_bins=args.n_bins, n_resamples=args.n_resamples, seed=args.seed,
        tau=args.tau, reference_layer=args.reference_layer, flip_reference=args.flip_reference,
    )
    result = run_gap_pipeline(pt, it, prompts, cfg, tuned or None, workers=_workers(args.workers))
    out = Path(args.out)
    _write_config(out, args, {"resolved": result.config, "malformed_records": malformed})
    result.write_curves(out / "curves.csv")
    result.write_rows(out / "rows.csv")
    summary = result.summary()
    summary["matching"]["malformed_rate"] = malformed / (malformed + len(prompts))
    write_summary(summary, out / "summary.json")
    print(json.dumps({"summary": str(out / "summary.json")}))


def _read_rows(path):
    path = Path(path)
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    with path.open() as fh:
        return list(csv.DictReader(fh))


def cmd_match(args):
    from convgap.matching import EndpointRows, cem_match, matched_effect
    from convgap.report import write_summary

    records = _read_rows(args.rows)
    metrics = [m for m in ("late_gap_raw", "late_gap_tuned") if records and str(records[0].get(m, "")) != ""]
    sides = {}
    for role in ("pt", "it"):
        rs = [
            {**r, **{k: float(r[k]) for k in ("confidence", "entropy", "margin", *metrics)}}
            for r in records
            if r["role"] == role
        ]
        if not rs:
            raise ConfigError(f"no rows with role {role!r}")
        sides[role] = EndpointRows.from_records(rs, metrics)
    match = cem_match(sides["pt"], sides["it"], args.n_bins)
    ests = [
        matched_effect(match, sides["pt"], sides["it"], m, args.n_resamples, args.seed, name=f"late_gap.matched.{m.split('_')[-1]}")
        for m in metrics
    ]
    out = Path(args.out)
    _write_config(out, args)
    write_summary({"claim_group": "estimates", "rows": [e.to_row() for e in ests], "matching": match.summary()}, out / "summary.json")
    print(json.dumps({"summary": str(out / "summary.json"), "min_retention": match.retention, "max_smd": match.max_smd}))


INTERVENTION_ROW_FIELDS = (
    "arm", "prompt_id", "cluster_id", "n_steps", "host_late", "arm_late", "delta_late", "host_window", "arm_window", "delta_window",
)


def _intervention_settings(args):
    settings = {
        "pt_path": args.pt, "it_path": args.it, "prompts_path": args.prompts, "windows": args.windows,
        "audit": bool(getattr(args, "audit", False)), "forced_steps": args.forced_steps, "seeds": args.seeds,
        "late_fraction": args.late_fraction, "output_dir": args.out,
    }
    if args.config:
        data = json.loads(Path(args.config).read_text())
        unknown = set(data) - set(settings)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        settings.update({k: v for k, v in data.items() if v is not None})
    for key in ("pt_path", "it_path", "prompts_path", "output_dir"):
        if not settings.get(key):
            raise ConfigError(f"missing {key} (flag or experiment config)")
    if isinstance(settings["windows"], list):
        settings["windows"] = ",".join(str(w) for w in settings["windows"])
    if isinstance(settings["seeds"], str):
        settings["seeds"] = [int(s) for s in settings["seeds"].split(",")]
    return settings


def _outcome_rows(outcome):
    return [{"arm": outcome.arm, **r} for r in outcome.rows]


def cmd_intervene(args):
    from convgap.engine import require_dense
    from convgap.interventions import (
        AUDIT_ORDER, run_graft_experiment, run_random_control, run_swap_experiment, window_audit, window_geometry,
    )
    from convgap.report import write_summary
    from convgap.stats import EstimateWithCI

    s = _intervention_settings(args)
    pt, it = load_checkpoint(s["pt_path"]), load_checkpoint(s["it_path"])
    require_dense(pt, it)
    prompts, malformed = _load_prompts(s["prompts_path"], strict=True)
    workers = _workers(args.workers)
    out = Path(s["output_dir"])
    common = dict(late_fraction=s["late_fraction"], forced_steps=s["forced_steps"], n_resamples=args.n_resamples,
                  seed=args.seed, workers=workers)
    _write_config(out, args, {"resolved": s, "geometry": window_geometry(pt.config.n_layers)})
    rows = []
    if s["audit"]:
        audit = window_audit(pt, it, prompts, **common)
        est = []
        for label in AUDIT_ORDER:
            for arm in ("graft", "swap"):
                o = audit[label][arm]
                rows += _outcome_rows(o)
                for col, e in ((f"final20_{arm}", o.late), (f"window_{arm}", o.window_delta)):
                    est.append(_renamed(e, f"{label}.{col}", window=label, column=col, layers=list(o.window)))
        write_summary({"claim_group": "window_audit", "rows": [e.to_row() for e in est],
                       "geometry": window_geometry(pt.config.n_layers)}, out / "summary.json")
    else:
        windows = _parse_windows(s["windows"], pt.config.n_layers)
        est = []
        for w in windows:
            g = run_graft_experiment(pt, it, w, prompts, **common)
            sw = run_swap_experiment(it, pt, w, prompts, **common)
            rows += _outcome_rows(g) + _outcome_rows(sw)
            est.append(_renamed(g.late, f"graft.{w.label}", arm="graft", depth=w.label, layers=list(w.layers)))
            est.append(_renamed(sw.late, f"swap.{w.label}", arm="swap", depth=w.label, layers=list(w.layers)))
            _dump(g.summary(), out / f"{g.arm}.detail.json")
            _dump(sw.summary(), out / f"{sw.arm}.detail.json")
        write_summary({"claim_group": "graft_swap", "rows": [e.to_row() for e in est]}, out / "summary.json")
        if args.random_control:
            target = next((w for w in windows if w.label == "late"), windows[-1])
            rc = run_random_control(pt, it, target, prompts, seeds=s["seeds"], per_layer_directions=args.per_layer_directions, **common)
            rows += _outcome_rows(rc)
            true = EstimateWithCI.from_row(rc.extra["true_graft_late"])
            write_summary(
                {"claim_group": "random_control",
                 "rows": [_renamed(true, "true_graft.late", order=0).to_row(), _renamed(rc.late, "random_control.late", order=1).to_row()],
                 "control_family": rc.extra["control_family"], "seeds": s["seeds"], "window": list(rc.window)},
                out / "random_control_summary.json",
            )
            _dump(rc.summary(), out / "random_control.detail.json")
    _write_dict_rows(rows, INTERVENTION_ROW_FIELDS, out / "rows.csv")
    print(json.dumps({"summary": str(out / "summary.json")}))


def _renamed(e, name, **config):
    from dataclasses import replace

    return replace(e, name=name, config={**e.config, **config})


def cmd_audit(args):
    args.audit = True
    cmd_intervene(args)


def cmd_replay(args):
    from convgap.replay import run_replay
    from convgap.report import write_summary

    pt, it = load_checkpoint(args.pt), load_checkpoint(args.it)
    prompts, malformed = _load_prompts(args.prompts, strict=not args.lenient)
    result, estimates, quality = run_replay(
        pt, it, prompts, max_tokens=args.max_tokens, teacher=args.teacher, decoding=args.decoding,
        temperature=args.temperature, late_fraction=args.late_fraction, n_bins=args.n_bins,
        n_resamples=args.n_resamples, seed=args.seed, malformed=malformed, workers=_workers(args.workers),
    )
    out = Path(args.out)
    _write_config(out, args, {"replay": result.meta})
    _write_dict_rows(result.rows, ("prompt_id", "step", "cell", "late_gap", "confidence", "entropy", "margin"), out / "rows.csv")
    write_summary(
        {"claim_group": "replay", "rows": [e.to_row() for e in estimates], "quality": {args.teacher: quality}},
        out / "summary.json",
    )
    print(json.dumps({"summary": str(out / "summary.json"), "quality": quality}))


def cmd_report_render(args):
    from convgap.report import PUBLISHED_SUMMARIES, render_report, write_report

    args.summaries = args.summaries or PUBLISHED_SUMMARIES
    if args.out:
        paths = write_report(args.summaries, args.out)
        print(json.dumps({"written": [str(p) for p in paths]}))
    else:
        sys.stdout.write(render_report(args.summaries))


def cmd_report_check(args):
    from convgap.report import PUBLISHED_CLAIMS, PUBLISHED_SUMMARIES, claim_check

    results = claim_check(args.summaries or PUBLISHED_SUMMARIES, args.claims or PUBLISHED_CLAIMS)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} claims passed")
    return EXIT_CLAIMS_FAILED if failed else 0


# ---------------------------------------------------------------- parser


def _common(p, resamples=True):
    p.add_argument("--seed", type=int, default=0, help="master seed for bootstrap and sampling (default 0)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: available cores)")
    if resamples:
        p.add_argument("--n-resamples", type=int, default=2000, help="bootstrap resamples (default 2000)")
    p.add_argument("--late-fraction", type=float, default=0.2, help="fraction of final layers in the late gap (default 0.2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convgap", description="Layerwise convergence-gap diagnostics for paired checkpoints.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic PT/IT checkpoint pair and a prompt corpus")
    p.add_argument("--seed", type=int, default=7, help="generation seed (default 7)")
    p.add_argument("--strength", type=float, default=0.5, help="planted divergence strength (default 0.5)")
    p.add_argument("--template-sensitivity", type=float, default=0.0, help="template-conditioned divergence (default 0)")
    p.add_argument("--layers", type=int, default=None, help="number of layers (default 8)")
    p.add_argument("--window", default=None, help="divergence window a-b (default: late depth window)")
    p.add_argument("--prompts", type=int, default=200, help="prompts in the emitted corpus (default 200)")
    p.add_argument("--tokens", type=int, default=32, help="tokens per prompt (default 32)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("trace", help="dump per-layer convergence curves and endpoint stats for one checkpoint")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--prompts", required=True, help="prompt corpus JSONL")
    p.add_argument("--lens", default=None, help="tuned-lens directory (adds tuned curves)")
    p.add_argument("--lenient", action="store_true", help="skip malformed prompt records instead of failing")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("fit-lens", help="fit a tuned lens for one checkpoint")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--prompts", required=True, help="prompt corpus JSONL; the last --holdout fraction is held out")
    p.add_argument("--steps", type=int, default=200, help="gradient steps per layer (default 200)")
    p.add_argument("--step-size", type=float, default=0.1, help="fixed step size (default 0.1)")
    p.add_argument("--batch", type=int, default=None, help="minibatch size (default: full batch)")
    p.add_argument("--holdout", type=float, default=0.2, help="held-out fraction (default 0.2)")
    p.add_argument("--seed", type=int, default=0, help="minibatch shuffle seed (default 0)")
    p.add_argument("--out", required=True, help="output lens directory")
    p.set_defaults(func=cmd_fit_lens)

    p = sub.add_parser("gap", help="IT-minus-PT convergence gap: curves, rows, matched and endpoint-free estimates")
    p.add_argument("--pt", required=True, help="PT checkpoint directory")
    p.add_argument("--it", required=True, help="IT checkpoint directory")
    p.add_argument("--corpus", required=True, help="prompt corpus JSONL")
    p.add_argument("--pt-lens", default=None, help="tuned lens for the PT checkpoint")
    p.add_argument("--it-lens", default=None, help="tuned lens for the IT checkpoint")
    p.add_argument("--n-bins", type=int, default=5, help="CEM bins per covariate (default 5)")
    p.add_argument("--tau", type=float, default=0.05, help="commitment threshold in nats (default 0.05)")
    p.add_argument("--reference-layer", type=int, default=None, help="first layer for top-1 flips (default floor(0.8 L))")
    p.add_argument("--flip-reference", choices=("adjacent", "final"), default="adjacent", help="flip definition (default adjacent)")
    p.add_argument("--lenient", action="store_true", help="skip malformed prompt records instead of failing")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_gap)

    p = sub.add_parser("match", help="CEM-match PT and IT endpoint rows (CSV or JSONL) and estimate matched effects")
    p.add_argument("--rows", required=True, help="rows file with role, confidence, entropy, margin, late_gap_raw[, late_gap_tuned]")
    p.add_argument("--n-bins", type=int, default=5, help="bins per covariate (default 5)")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_match)

    for name, helptext in (("intervene", "matched-prefix MLP graft/swap experiments"), ("audit", "six-window late audit")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default=None, help="experiment config JSON (keys override flags)")
        p.add_argument("--pt", default=None, help="PT checkpoint directory")
        p.add_argument("--it", default=None, help="IT checkpoint directory")
        p.add_argument("--prompts", default=None, help="prompt corpus JSONL")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--windows", default="early,mid,late", help="early/mid/late names or a-b ranges (default early,mid,late)")
        p.add_argument("--forced-steps", type=int, default=128, help="forced prefix length (default 128)")
        p.add_argument("--seeds", default="0,1,2", help="random-control seeds (default 0,1,2)")
        if name == "intervene":
            p.add_argument("--audit", action="store_true", help="run the six-window audit instead of depth windows")
            p.add_argument("--random-control", action="store_true", help="add the magnitude-matched random control")
            p.add_argument("--per-layer-directions", action="store_true", help="fresh random direction per layer")
            p.set_defaults(func=cmd_intervene)
        else:
            p.set_defaults(func=cmd_audit, random_control=False, per_layer_directions=False)
        _common(p)

    p = sub.add_parser("replay", help="fixed-history replay through pt_raw / it_native / it_raw cells")
    p.add_argument("--pt", required=True, help="PT checkpoint directory")
    p.add_argument("--it", required=True, help="IT checkpoint directory")
    p.add_argument("--prompts", required=True, help="prompt corpus JSONL")
    p.add_argument("--teacher", choices=("it_native", "pt_raw", "it_raw"), default="it_native", help="continuation source")
    p.add_argument("--max-tokens", type=int, default=32, help="continuation length (default 32)")
    p.add_argument("--decoding", choices=("greedy", "temperature"), default="greedy", help="teacher decoding (default greedy)")
    p.add_argument("--temperature", type=float, default=1.0, help="sampling temperature (default 1.0)")
    p.add_argument("--n-bins", type=int, default=5, help="CEM bins per covariate (default 5)")
    p.add_argument("--lenient", action="store_true", help="count and skip malformed prompt records")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="render tables or check claims from summary JSON files")
    rsub = p.add_subparsers(dest="report_command", required=True)
    r = rsub.add_parser("render", help="render report tables")
    r.add_argument("--summaries", default=None, help="directory of summary JSON files (default: bundled published fixtures)")
    r.add_argument("--out", default=None, help="write report.txt and CSV tables here (default: print)")
    r.set_defaults(func=cmd_report_render)
    r = rsub.add_parser("check", help="check claims against summaries; exit 1 if any claim fails")
    r.add_argument("--summaries", default=None, help="directory of summary JSON files (default: bundled published fixtures)")
    r.add_argument("--claims", default=None, help="claims JSONL (default: bundled published claims)")
    r.set_defaults(func=cmd_report_check)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (ConvgapError, ValueError, KeyError, FileNotFoundError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc.args[0]) if exc.args else str(exc)}
        if isinstance(exc, SchemaError) and exc.path:
            err["path"] = exc.path
        if isinstance(exc, FileNotFoundError) and exc.filename:
            err["message"] = f"no such file: {exc.filename}"
        print(json.dumps(err), file=sys.stderr)
        return EXIT_ERROR
    return int(status or 0)


def main() -> None:
    sys.exit(run())
