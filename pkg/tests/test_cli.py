import json
import shutil
import subprocess
import sys

import pytest

from convgap.checkpoint import save_checkpoint
from convgap.cli import run
from convgap.corpus import Prompt, read_prompts, write_prompts
from convgap.report import PUBLISHED_SUMMARIES, load_summary

from _models import random_checkpoint, tiny_config


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", str(out), "--prompts", "12", "--tokens", "10"]) == 0
    return out


def test_synth_writes_pair_and_corpus(synth_dir):
    assert (synth_dir / "pt" / "manifest.json").exists()
    assert (synth_dir / "it" / "weights.bin").exists()
    prompts, malformed = read_prompts(synth_dir / "corpus.jsonl", strict=True)
    assert len(prompts) == 12 and malformed == 0
    assert json.loads((synth_dir / "config.json").read_text())["synth_spec"]["seed"] == 7


def test_gap_then_render(synth_dir, tmp_path, capsys):
    out = tmp_path / "gap"
    args = ["gap", "--pt", str(synth_dir / "pt"), "--it", str(synth_dir / "it"), "--corpus", str(synth_dir / "corpus.jsonl")]
    assert run(args + ["--out", str(out), "--n-resamples", "200", "--workers", "1"]) == 0
    summary = load_summary(out / "summary.json")
    rows = {r["name"]: r for r in summary["rows"]}
    assert rows["late_gap.paired"]["estimate"] > 0
    assert (out / "curves.csv").read_text().startswith("family,checkpoint_role,lens_kind")
    assert json.loads((out / "config.json").read_text())["n_resamples"] == 200
    capsys.readouterr()
    assert run(["report", "render", "--summaries", str(out)]) == 0
    assert "Endpoint-matched raw late KL" in capsys.readouterr().out


def test_intervene_and_audit(synth_dir, tmp_path):
    base = ["--pt", str(synth_dir / "pt"), "--it", str(synth_dir / "it"), "--prompts", str(synth_dir / "corpus.jsonl")]
    out = tmp_path / "iv"
    assert run(["intervene", *base, "--out", str(out), "--windows", "late", "--random-control", "--seeds", "0",
                "--n-resamples", "100", "--workers", "1"]) == 0
    rows = {r["name"]: r for r in load_summary(out / "summary.json")["rows"]}
    assert rows["graft.late"]["estimate"] > 0 > rows["swap.late"]["estimate"]
    rc = {r["name"]: r for r in load_summary(out / "random_control_summary.json")["rows"]}
    assert abs(rc["random_control.late"]["estimate"]) < rc["true_graft.late"]["estimate"]
    config = tmp_path / "exp.json"
    config.write_text(json.dumps({"pt_path": str(synth_dir / "pt"), "it_path": str(synth_dir / "it"),
                                  "prompts_path": str(synth_dir / "corpus.jsonl"), "output_dir": str(tmp_path / "au"),
                                  "forced_steps": 6}))
    assert run(["audit", "--config", str(config), "--n-resamples", "50", "--workers", "1"]) == 0
    audit = load_summary(tmp_path / "au" / "summary.json")
    assert audit["claim_group"] == "window_audit"
    assert len(audit["rows"]) == 24


def test_fit_lens_trace_match_replay(synth_dir, tmp_path):
    pt = str(synth_dir / "pt")
    corpus = str(synth_dir / "corpus.jsonl")
    assert run(["fit-lens", "--model", pt, "--prompts", corpus, "--steps", "3", "--out", str(tmp_path / "lens")]) == 0
    assert run(["trace", "--model", pt, "--prompts", corpus, "--lens", str(tmp_path / "lens"), "--out", str(tmp_path / "tr")]) == 0
    assert "tuned" in (tmp_path / "tr" / "curves.csv").read_text()
    gap = tmp_path / "gap"
    assert run(["gap", "--pt", pt, "--it", str(synth_dir / "it"), "--corpus", corpus, "--out", str(gap),
                "--n-resamples", "50", "--workers", "1"]) == 0
    assert run(["match", "--rows", str(gap / "rows.csv"), "--out", str(tmp_path / "m"), "--n-resamples", "50"]) == 0
    assert run(["replay", "--pt", pt, "--it", str(synth_dir / "it"), "--prompts", corpus, "--max-tokens", "3",
                "--out", str(tmp_path / "rp"), "--n-resamples", "50", "--workers", "1"]) == 0
    quality = load_summary(tmp_path / "rp" / "summary.json")["quality"]["it_native"]
    assert quality["malformed_records"] == 0 and quality["missing_aligned_steps"] == 0


def test_report_check_exit_codes(tmp_path, capsys):
    assert run(["report", "check"]) == 0
    assert "87/87 claims passed" in capsys.readouterr().out
    dest = tmp_path / "s"
    shutil.copytree(PUBLISHED_SUMMARIES, dest)
    data = json.loads((dest / "graft_swap.json").read_text())
    data["rows"][0]["estimate"] += 0.05
    (dest / "graft_swap.json").write_text(json.dumps(data))
    assert run(["report", "check", "--summaries", str(dest)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_moe_intervention_rejected(tmp_path, capsys):
    model = random_checkpoint(tiny_config(n_layers=8, moe_flag=True), seed=0)
    save_checkpoint(model, tmp_path / "a")
    save_checkpoint(model, tmp_path / "b")
    write_prompts(tmp_path / "p.jsonl", [Prompt("p0", "c0", [1, 2, 3])])
    code = run(["intervene", "--pt", str(tmp_path / "a"), "--it", str(tmp_path / "b"), "--prompts", str(tmp_path / "p.jsonl"),
                "--out", str(tmp_path / "o"), "--workers", "1"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "MoERejectedError"


def test_missing_checkpoint_is_structured_error(tmp_path, capsys):
    code = run(["trace", "--model", str(tmp_path / "none"), "--prompts", str(tmp_path / "p"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "error" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_module_help():
    proc = subprocess.run([sys.executable, "-m", "convgap", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "gap", "intervene", "audit", "replay", "report"):
        assert name in proc.stdout
