"""Summary files, table rendering and the claim checker.

A summary file is JSON ``{"claim_group": ..., "rows": [EstimateWithCI rows], ...}``.
Extra top-level keys (``matching``, ``quality``) carry diagnostics. Rendering
is keyed on ``claim_group``; rows inside a group are ordered by
``config.order`` then ``name`` so output bytes never depend on input order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import jsonschema

from convgap.errors import SchemaError
from convgap.interventions import AUDIT_ORDER, AUDIT_TITLES
from convgap.stats import EstimateWithCI, format_count, format_estimate, format_value

REPORT_HEADER = "# convergence-gap report"

DATA_DIR = Path(__file__).parent / "data"
PUBLISHED_SUMMARIES = DATA_DIR / "published_summaries"
PUBLISHED_CLAIMS = DATA_DIR / "published_claims.jsonl"

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["claim_group", "rows"],
    "properties": {
        "claim_group": {"type": "string", "minLength": 1},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "estimate", "ci_low", "ci_high", "units"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "estimate": {"type": "number"},
                    "ci_low": {"type": "number"},
                    "ci_high": {"type": "number"},
                    "units": {"type": "string", "minLength": 1},
                    "n_rows": {"type": "integer", "minimum": 0},
                    "n_clusters": {"type": "integer", "minimum": 0},
                    "seed": {"type": ["integer", "null"]},
                    "config": {"type": "object"},
                },
            },
        },
    },
}

CLAIM_SCHEMA = {
    "type": "object",
    "required": ["claim_id", "source"],
    "properties": {
        "claim_id": {"type": "string", "minLength": 1},
        "source": {"type": "string", "minLength": 1},
        "row": {"type": "string"},
        "path": {"type": "string"},
        "expected": {"type": "string"},
        "format": {"enum": ["estimate", "interval", "value3", "value2", "count", "plain3"]},
        "field": {"enum": ["estimate", "ci_low", "ci_high"]},
        "value": {"type": "number"},
        "tolerance": {"type": "number", "minimum": 0},
    },
    "oneOf": [{"required": ["expected"]}, {"required": ["value", "tolerance"]}],
}

ESTIMATE_LABELS = {
    "late_gap.paired": ("IT-minus-PT late KL (paired prompts)", "raw-lens gap before matching"),
    "late_gap.matched.raw": ("Endpoint-matched raw late KL", "raw-lens gap remains"),
    "late_gap.matched.tuned": ("Endpoint-matched tuned late KL", "tuned-lens gap remains"),
    "adjacent_js": ("Endpoint-free adjacent JS", "IT has more remaining layer-to-layer movement"),
    "future_top1_flips": ("Endpoint-free future top-1 flips", "IT changes top-1 later"),
}
ESTIMATE_ORDER = list(ESTIMATE_LABELS)

DEPTHS = ("early", "mid", "late")
DEPTH_TITLES = {"early": "Early", "mid": "Middle", "late": "Late"}
ARM_TITLES = {"graft": "IT MLP graft into PT host", "swap": "PT MLP swap into IT host"}
AUDIT_COLUMNS = (
    ("final20_graft", "Final-20 IT graft into PT"),
    ("final20_swap", "Final-20 PT swap into IT"),
    ("window_graft", "Edited-window IT graft into PT"),
    ("window_swap", "Edited-window PT swap into IT"),
)
REPLAY_CONTRASTS = (
    ("it_native-pt_raw", "IT native - PT raw"),
    ("it_raw-pt_raw", "IT raw - PT raw"),
    ("it_native-it_raw", "IT native - IT raw"),
)
TEACHER_TITLES = {"it_native": "IT-native continuation", "pt_raw": "PT-raw continuation", "it_raw": "IT-raw continuation"}
METHOD_TITLES = {"paired": "paired same prompt/step", "cem": "endpoint-matched CEM"}
GROUP_ORDER = ("estimates", "discovery_counts", "graft_swap", "random_control", "family_late", "window_audit", "replay")


# ---------------------------------------------------------------- summaries


def make_summary(claim_group: str, estimates: Iterable[EstimateWithCI], **extra) -> dict:
    summary = {"claim_group": claim_group, "rows": [e.to_row() for e in estimates]}
    summary.update(extra)
    validate_summary(summary)
    return summary


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    validate_summary(summary)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    return path


def validate_summary(summary: dict) -> None:
    try:
        jsonschema.validate(summary, SUMMARY_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(exc.message, path=loc) from None


def load_summary(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path.name}: not valid JSON ({exc.msg})") from None
    try:
        validate_summary(data)
    except SchemaError as exc:
        raise SchemaError(f"{path.name}: {exc.args[0]}", path=exc.path) from None
    return data


def load_summaries(source) -> list[tuple[str, dict]]:
    """(file name, summary) pairs from a directory or an iterable of paths, sorted by name.

    In a directory, the ``config.json`` echo and ``*.detail.json`` dumps are skipped.
    """
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        paths = sorted(
            p for p in Path(source).glob("*.json") if p.name != "config.json" and not p.name.endswith(".detail.json")
        )
    else:
        paths = sorted(Path(p) for p in source)
    return [(p.name, load_summary(p)) for p in paths]


def _rows(summary) -> list[dict]:
    return sorted(summary["rows"], key=lambda r: ((r.get("config") or {}).get("order", 0), r["name"]))


def _by_name(summary) -> dict[str, EstimateWithCI]:
    return {r["name"]: EstimateWithCI.from_row(r) for r in summary["rows"]}


# ---------------------------------------------------------------- tables


@dataclass
class Table:
    name: str
    header: list[str]
    rows: list[list[str]]
    notes: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [len(h) for h in self.header]
        for row in self.rows:
            widths = [max(w, len(c)) for w, c in zip(widths, row)]

        def line(cells):
            return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

        out = [f"## {self.name}", line(self.header), "-+-".join("-" * w for w in widths)]
        out += [line(r) for r in self.rows]
        out += self.notes
        return "\n".join(out) + "\n"


def _label(row, default):
    return (row.get("config") or {}).get("label", default)


def _estimates_table(summary, source):
    rows = sorted(
        summary["rows"],
        key=lambda r: (ESTIMATE_ORDER.index(r["name"]) if r["name"] in ESTIMATE_ORDER else len(ESTIMATE_ORDER), r["name"]),
    )
    out = []
    for r in rows:
        label, interp = ESTIMATE_LABELS.get(r["name"], (r["name"], ""))
        e = EstimateWithCI.from_row(r)
        out.append([_label(r, label), format_estimate(e), (r.get("config") or {}).get("interpretation", interp)])
    notes = []
    m = summary.get("matching")
    if m:
        parts = [f"minimum matched retention {format_value(m['min_retention'])[1:]}", f"maximum post-match SMD {_smd_text(m['max_smd'])}"]
        if "malformed_rate" in m:
            parts.append(f"malformed rate {format_value(m['malformed_rate'])[1:]}")
        notes.append("matching: " + "; ".join(parts))
    return Table(f"estimates ({source})", ["Quantity", "Estimate", "Interpretation"], out, notes)


def _smd_text(x) -> str:
    x = float(x)
    return "inf" if math.isinf(x) else format_value(x)[1:]


def _grid(summary, row_key, col_key):
    cells: dict[tuple[str, str], dict] = {}
    meta: dict[str, dict] = {}
    for r in summary["rows"]:
        cfg = r.get("config") or {}
        rk, ck = cfg.get(row_key), cfg.get(col_key)
        if rk is None or ck is None:
            rk, _, ck = r["name"].rpartition(".")
        cells[(rk, ck)] = r
        meta.setdefault(rk, cfg)
    return cells, meta


def _discovery_table(summary, source):
    cells, meta = _grid(summary, "family", "column")
    fams = sorted(meta, key=lambda f: (meta[f].get("order", 0), f))
    out = []
    for f in fams:
        row = [meta[f].get("label", f)]
        for col in ("pt_token_steps", "it_token_steps", "layers"):
            r = cells.get((f, col))
            row.append(format_count(int(r["estimate"])) if r else "-")
        out.append(row)
    return Table(f"discovery counts ({source})", ["Family", "PT token steps", "IT token steps", "Layers"], out, [])


def _graft_swap_table(summary, source):
    cells, _ = _grid(summary, "arm", "depth")
    out = []
    for arm in ("graft", "swap"):
        row = [ARM_TITLES[arm]]
        for depth in DEPTHS:
            r = cells.get((arm, depth))
            row.append(format_value(r["estimate"], 2) if r else "-")
        out.append(row)
    return Table(f"graft/swap ({source})", ["Intervention"] + [DEPTH_TITLES[d] for d in DEPTHS], out, [])


def _random_control_table(summary, source):
    out = []
    titles = {"true_graft.late": "True late graft", "random_control.late": "Matched random late perturbation"}
    for r in _rows(summary):
        e = EstimateWithCI.from_row(r)
        interval = format_estimate(e, units=False) if (r.get("config") or {}).get("ci_reported", True) else "-"
        out.append([_label(r, titles.get(r["name"], r["name"])), format_value(e.estimate), interval])
    notes = []
    if "control_family" in summary:
        notes.append(f"control: {summary['control_family']}")
    return Table(f"random control ({source})", ["Arm", "Final-20 KL change", "Interval"], out, notes)


def _family_late_table(summary, source):
    cells, meta = _grid(summary, "family", "arm")
    fams = sorted(meta, key=lambda f: (meta[f].get("order", 0), f))
    out = []
    for f in fams:
        row = [meta[f].get("label", f)]
        for arm in ("graft", "swap"):
            r = cells.get((f, arm))
            row.append(format_value(r["estimate"]) if r else "-")
        row.append(meta[f].get("window", "-"))
        out.append(row)
    header = ["Family", "Late IT graft into PT host", "Late PT swap into IT host", "Late window"]
    return Table(f"per-family late window ({source})", header, out, [])


def _audit_table(summary, source):
    cells, _ = _grid(summary, "window", "column")
    out = []
    for label in AUDIT_ORDER:
        row = [AUDIT_TITLES[label]]
        for col, _ in AUDIT_COLUMNS:
            r = cells.get((label, col))
            row.append(format_value(r["estimate"]) if r else "-")
        out.append(row)
    notes = []
    geo = summary.get("geometry")
    if geo:
        notes.append("windows: " + "; ".join(f"{AUDIT_TITLES[k]} {geo[k]}" for k in AUDIT_ORDER if k in geo))
    return Table(f"window audit ({source})", ["Window"] + [t for _, t in AUDIT_COLUMNS], out, notes)


def _replay_table(summary, source):
    cells = {}
    for r in summary["rows"]:
        teacher, method, contrast = r["name"].split(".", 2)
        cells[(teacher, method, contrast)] = r
    teachers = sorted({k[0] for k in cells}, key=lambda t: (list(TEACHER_TITLES).index(t) if t in TEACHER_TITLES else 99, t))
    quality = summary.get("quality", {})
    out = []
    for teacher in teachers:
        for method in ("paired", "cem"):
            if not any(k[:2] == (teacher, method) for k in cells):
                continue
            row = [TEACHER_TITLES.get(teacher, teacher), METHOD_TITLES[method]]
            for contrast, _ in REPLAY_CONTRASTS:
                r = cells.get((teacher, method, contrast))
                row.append(format_estimate(EstimateWithCI.from_row(r), units=False) if r else "-")
            q = quality.get(teacher, {})
            if method == "cem" and "min_retention" in q:
                text = f"retention {format_value(q['min_retention'])[1:]}; max SMD {_smd_text(q['max_smd'])}"
                if float(q["max_smd"]) > 0.1:
                    text = "balance caveat: " + text
            elif method == "paired" and "malformed_records" in q:
                text = f"malformed {q['malformed_records']}; missing aligned {q['missing_aligned_steps']}"
            else:
                text = ""
            row.append(text)
            out.append(row)
    header = ["Continuation", "Comparison"] + [t for _, t in REPLAY_CONTRASTS] + ["Use/quality"]
    return Table(f"replay ({source})", header, out, [])


def _generic_table(summary, source):
    out = [[r["name"], format_estimate(EstimateWithCI.from_row(r))] for r in _rows(summary)]
    return Table(f"{summary['claim_group']} ({source})", ["Row", "Estimate"], out, [])


RENDERERS = {
    "estimates": _estimates_table,
    "discovery_counts": _discovery_table,
    "graft_swap": _graft_swap_table,
    "random_control": _random_control_table,
    "family_late": _family_late_table,
    "window_audit": _audit_table,
    "replay": _replay_table,
}


def render_tables(source) -> list[Table]:
    """Tables for every summary in ``source`` (directory or file list), in a fixed group order."""
    summaries = load_summaries(source)

    def key(item):
        name, s = item
        g = s["claim_group"]
        return (GROUP_ORDER.index(g) if g in GROUP_ORDER else len(GROUP_ORDER), g, name)

    tables = []
    for name, s in sorted(summaries, key=key):
        tables.append(RENDERERS.get(s["claim_group"], _generic_table)(s, name))
    return tables


def render_report(source) -> str:
    tables = render_tables(source)
    return REPORT_HEADER + "\n" + "".join("\n" + t.to_text() for t in tables)


def write_report(source, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = render_tables(source)
    paths = [out / "report.txt"]
    paths[0].write_text(REPORT_HEADER + "\n" + "".join("\n" + t.to_text() for t in tables))
    for i, t in enumerate(tables):
        slug = "".join(c if c.isalnum() else "_" for c in t.name.split(" (")[0]).strip("_")
        p = out / f"{i:02d}_{slug}.csv"
        p.write_text(t.to_csv())
        paths.append(p)
    return paths


# ---------------------------------------------------------------- claims


@dataclass
class ClaimResult:
    claim_id: str
    passed: bool
    expected: str
    observed: str
    reason: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f" ({self.reason})" if self.reason else ""
        return f"{status} {self.claim_id}: expected {self.expected}, got {self.observed}{tail}"


def read_claims(path) -> list[dict]:
    claims = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            claim = json.loads(line)
            jsonschema.validate(claim, CLAIM_SCHEMA)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            msg = exc.msg if isinstance(exc, json.JSONDecodeError) else exc.message
            raise SchemaError(f"claims line {i}: {msg}") from None
        if "row" not in claim and "path" not in claim:
            raise SchemaError(f"claims line {i}: needs 'row' or 'path'")
        claims.append(claim)
    return claims


def _lookup_path(summary, path):
    node = summary
    for part in path.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise KeyError(path)
    return node


def _render_claim(value, fmt, row=None):
    if fmt == "estimate":
        return format_estimate(row)
    if fmt == "interval":
        return format_estimate(row, units=False)
    if fmt == "value2":
        return format_value(value, 2)
    if fmt == "count":
        return format_count(int(value))
    if fmt == "plain3":
        return f"{float(value):.3f}"
    return format_value(value, 3)


def check_claim(claim: dict, summaries: dict[str, dict]) -> ClaimResult:
    cid = claim["claim_id"]
    expected = claim.get("expected", f"{claim.get('value')} ± {claim.get('tolerance')}")
    summary = summaries.get(claim["source"])
    if summary is None:
        return ClaimResult(cid, False, expected, "-", f"missing summary {claim['source']}")
    row = None
    try:
        if "row" in claim:
            row = _by_name(summary)[claim["row"]]
            value = getattr(row, claim.get("field", "estimate"))
        else:
            value = float(_lookup_path(summary, claim["path"]))
    except KeyError:
        return ClaimResult(cid, False, expected, "-", f"missing {claim.get('row') or claim.get('path')}")
    if "expected" in claim:
        fmt = claim.get("format") or ("estimate" if row is not None else "value3")
        if fmt in ("estimate", "interval") and row is None:
            return ClaimResult(cid, False, expected, "-", f"format {fmt} needs a row claim")
        observed = _render_claim(value, fmt, row)
        return ClaimResult(cid, observed == claim["expected"], expected, observed)
    ok = abs(value - claim["value"]) <= claim["tolerance"]
    return ClaimResult(cid, ok, expected, repr(value))


def claim_check(summaries_source, claims_path) -> list[ClaimResult]:
    summaries = dict(load_summaries(summaries_source))
    return [check_claim(c, summaries) for c in read_claims(claims_path)]
