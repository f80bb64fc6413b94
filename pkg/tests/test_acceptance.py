"""Acceptance gate: one block per criterion, at the stated sizes and tolerances.

Each test carries ``@pytest.mark.criterion(n, title)``; conftest prints one
PASS/FAIL line per criterion at the end of the run.
"""

import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest

from convgap import oracle
from convgap.cli import run as cli_run
from convgap.corpus import make_synthetic_corpus
from convgap.engine import forward_trace, softmax, substitute_mlp_window
from convgap.errors import EmptyMatchError
from convgap.interventions import depth_windows, run_graft_experiment, run_random_control, run_swap_experiment
from convgap.lens import RawLens, TunedLens, fit_tuned_lens, lens_loss_and_grad, log_target, split_corpus
from convgap.matching import COVARIATES, EndpointRows, cem_match, matched_effect
from convgap.metrics import convergence_curves, js, kl, late_gap
from convgap.pipeline import run_gap_pipeline
from convgap.replay import generate_continuation, paired_cell_effect, replay_cells, run_replay, standard_cells, teacher_histories
from convgap.report import PUBLISHED_CLAIMS, PUBLISHED_SUMMARIES, claim_check, render_report
from convgap.stats import cluster_bootstrap
from convgap.synthetic import SynthSpec, make_paired_checkpoints

from _models import config_grid, random_checkpoint, tiny_config

pytestmark = pytest.mark.acceptance

N_PROMPTS = 200
N_TOKENS = 32
N_RESAMPLES = 2000


@pytest.fixture(scope="module")
def pair():
    return make_paired_checkpoints(SynthSpec(seed=7, divergence_strength=0.5))


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_corpus(n_prompts=N_PROMPTS, n_tokens=N_TOKENS)


# 1 ------------------------------------------------------------------ divergences


@pytest.mark.criterion(1, "divergence unit suite")
def test_c1_divergence_unit_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for p in rng.dirichlet(np.ones(10), size=50):
        assert kl(p, p) == 0.0
        assert js(p, p) == 0.0
    assert js([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-9)
    assert kl([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.130812, abs=1e-6)
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-6)
    assert time.perf_counter() - start < 1.0


# 2 ------------------------------------------------------------ oracle equivalence


def _rel(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-12))


def _check_oracle(model, tokens, n_gen=3):
    tokens = [int(t) for t in tokens]
    trace = forward_trace(model, tokens)
    dense = oracle.DenseOracle(model)
    assert _rel(trace.final_logits, dense.final_logits(tokens)) <= 1e-5
    ref_res = np.array(dense.residuals(tokens)).transpose(1, 0, 2)
    assert _rel(trace.residuals, ref_res) <= 1e-5
    curves = convergence_curves(trace, RawLens(model))
    ref_curves = np.array(oracle.convergence_curves(dense, tokens))
    assert _rel(curves, ref_curves) <= 1e-5
    assert generate_continuation(model, tokens[:2], n_gen) == dense.greedy(tokens[:2], n_gen)


@pytest.mark.criterion(2, "oracle equivalence")
def test_c2_oracle_equivalence(pair):
    start = time.perf_counter()
    models = []
    for i, arch in enumerate(config_grid()):
        for seed in range(3):
            cfg = tiny_config(n_layers=1 + (i + seed) % 2, d_model=8 if seed else 4, vocab_size=10, **arch)
            models.append(random_checkpoint(cfg, seed=1000 + 10 * i + seed))
    assert len(models) >= 50
    assert all(m.config.n_layers <= 2 for m in models)
    for k, model in enumerate(models):
        _check_oracle(model, np.random.default_rng(k).integers(0, 10, size=5))
    for model in pair:
        assert model.config.n_layers == 8
        _check_oracle(model, [5, 17, 200, 3, 99, 42, 7])
    assert time.perf_counter() - start < 120


# 3 -------------------------------------------------------------- self-convergence


@pytest.mark.criterion(3, "self-convergence")
def test_c3_self_convergence(pair, corpus):
    worst = 0.0
    for model in pair:
        lens = RawLens(model)
        for p in corpus:
            curves = convergence_curves(forward_trace(model, p.tokens), lens)
            worst = max(worst, float(curves[:, -1].max()))
    assert worst <= 1e-6


# 4 ----------------------------------------------------------- graft/swap algebra


@pytest.mark.criterion(4, "graft/swap algebra")
def test_c4_graft_swap_algebra(pair, corpus):
    pt, it = pair
    prompts = corpus[:20]
    late = depth_windows(8)["late"]
    self_graft = run_graft_experiment(pt, pt, late, prompts, forced_steps=N_TOKENS, n_resamples=100)
    assert all(r["delta_late"] == 0.0 for r in self_graft.rows)
    reverted = substitute_mlp_window(substitute_mlp_window(pt, it, late.layers), pt, late.layers)
    for p in prompts[:5]:
        a, b = forward_trace(pt, p.tokens), forward_trace(reverted, p.tokens)
        assert a.residuals.tobytes() == b.residuals.tobytes()
        assert a.final_logits.tobytes() == b.final_logits.tobytes()
    window = SynthSpec().window
    restored = substitute_mlp_window(it, pt, window)
    for p in prompts:
        ref = late_gap(convergence_curves(forward_trace(pt, p.tokens), RawLens(pt)))
        got = late_gap(convergence_curves(forward_trace(restored, p.tokens), RawLens(restored)))
        assert np.max(np.abs(got - ref)) <= 1e-6


# 5 --------------------------------------------------------------- sign suite


@pytest.mark.criterion(5, "end-to-end sign suite")
def test_c5_sign_suite(pair, corpus):
    start = time.perf_counter()
    pt, it = pair
    gap = run_gap_pipeline(pt, it, corpus)
    paired = next(e for e in gap.estimates if e.name == "late_gap.paired")
    assert paired.n_rows == N_PROMPTS
    assert paired.config["n_resamples"] == N_RESAMPLES
    assert paired.estimate > 0 and paired.ci_low > 0
    late = depth_windows(8)["late"]
    graft = run_graft_experiment(pt, it, late, corpus, forced_steps=N_TOKENS, n_resamples=N_RESAMPLES)
    swap = run_swap_experiment(it, pt, late, corpus, forced_steps=N_TOKENS, n_resamples=N_RESAMPLES)
    assert graft.late.estimate > 0 and graft.late.ci_low > 0
    assert swap.late.estimate < 0 and swap.late.ci_high < 0
    control = run_random_control(
        pt, it, late, corpus, seeds=(0, 1, 2), forced_steps=N_TOKENS, n_resamples=N_RESAMPLES
    )
    true_delta = control.extra["true_graft_late"]["estimate"]
    assert true_delta == pytest.approx(graft.late.estimate, rel=1e-12)
    assert abs(control.late.estimate) < 0.1 * true_delta
    assert time.perf_counter() - start < 600


# 6 ---------------------------------------------------------------- tuned lens


@pytest.mark.criterion(6, "tuned lens")
def test_c6_tuned_lens(pair, corpus):
    pt, _ = pair
    train, held = split_corpus([p.tokens for p in corpus])
    lens = fit_tuned_lens(pt, train, corpus_id="acceptance")
    for trail in lens.meta["history"].values():
        losses = [loss for _, loss in trail]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
    mid = list(depth_windows(8)["mid"].layers)
    raw_kl, tuned_kl = [], []
    for tokens in held:
        trace = forward_trace(pt, tokens)
        raw_kl.append(convergence_curves(trace, RawLens(pt))[:, mid])
        tuned_kl.append(convergence_curves(trace, lens)[:, mid])
    raw_mean, tuned_mean = np.mean(raw_kl), np.mean(tuned_kl)
    assert tuned_mean <= 0.8 * raw_mean

    trace = forward_trace(pt, held[0])
    tv = 0.5 * np.abs(TunedLens.identity(pt).decode_all(trace.residuals) - RawLens(pt).decode_all(trace.residuals)).sum(-1)
    assert tv.max() <= 1e-9

    model = random_checkpoint(tiny_config(d_model=4, vocab_size=8), seed=3)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((12, 4))
    target = log_target(softmax(rng.standard_normal((12, 8))))
    W, b = np.eye(4) + 0.2 * rng.standard_normal((4, 4)), 0.1 * rng.standard_normal(4)
    _, gW, gb = lens_loss_and_grad(W, b, X, target, model)
    h = 1e-6
    num = np.zeros(20)
    for k in range(20):
        Wp, Wm, bp, bm = W.copy(), W.copy(), b.copy(), b.copy()
        if k < 16:
            Wp.flat[k] += h
            Wm.flat[k] -= h
        else:
            bp[k - 16] += h
            bm[k - 16] -= h
        num[k] = (lens_loss_and_grad(Wp, bp, X, target, model)[0] - lens_loss_and_grad(Wm, bm, X, target, model)[0]) / (2 * h)
    ana = np.concatenate([gW.ravel(), gb])
    assert np.max(np.abs(ana - num)) / np.max(np.abs(num)) <= 1e-4


# 7 ------------------------------------------------------------------ matching


def _endpoint_rows(conf, ent, margin, values, prefix):
    n = len(conf)
    return EndpointRows(conf, ent, margin, [f"c{i % 25}" for i in range(n)], [f"{prefix}{i}" for i in range(n)], {"late_gap": values})


def _confounded(rng, n, shift):
    conf = np.clip(rng.beta(2 + 3 * shift, 2, size=n), 1e-3, 1.0)
    ent = np.abs(2.0 - 2.0 * conf + 0.3 * rng.standard_normal(n))
    margin = np.clip(conf - rng.uniform(0, 0.3, size=n) * (1 - conf), 0.0, 1.0)
    return conf, ent, margin


@pytest.mark.criterion(7, "matching suite")
def test_c7_matching_suite():
    rng = np.random.default_rng(0)
    conf, ent, margin = _confounded(rng, 300, 0.0)
    vals = rng.random(300)
    a = _endpoint_rows(conf, ent, margin, vals, "p")
    b = _endpoint_rows(conf, ent, margin, vals, "i")
    match = cem_match(a, b)
    assert match.retention == 1.0
    assert all(match.smd[c] == 0.0 for c in COVARIATES)
    assert matched_effect(match, a, b, "late_gap", n_resamples=200).estimate == 0.0

    low = _endpoint_rows(np.linspace(0.05, 0.3, 20), np.ones(20), np.full(20, 0.5), np.zeros(20), "p")
    high = _endpoint_rows(np.linspace(0.7, 0.95, 30), np.ones(30), np.full(30, 0.5), np.zeros(30), "i")
    with pytest.raises(EmptyMatchError):
        cem_match(low, high)

    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        pt = _endpoint_rows(*_confounded(rng, 400, 0.0), rng.random(400), "p")
        it = _endpoint_rows(*_confounded(rng, 400, 1.0), rng.random(400), "i")
        m = cem_match(pt, it)
        for c in COVARIATES:
            assert m.smd[c] <= m.smd_pre[c], (seed, c)


# 8 ----------------------------------------------------------------- bootstrap


@pytest.mark.criterion(8, "bootstrap")
def test_c8_bootstrap():
    values = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
    clusters = ["a", "a", "b", "b", "c", "c"]
    groups = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5])]
    arr = np.asarray(values)
    enumerated = [arr[np.concatenate([groups[j] for j in pick])].mean() for pick in itertools.product(range(3), repeat=3)]
    assert len(enumerated) == 27
    lo, hi = np.quantile(enumerated, [0.025, 0.975], method="inverted_cdf")
    e = cluster_bootstrap(values, clusters, n_resamples=N_RESAMPLES, seed=0)
    assert (e.ci_low, e.ci_high) == (lo, hi)

    rng = np.random.default_rng(9)
    vals = rng.standard_normal(100)
    cl = [f"k{i % 17}" for i in range(100)]
    a = cluster_bootstrap(vals, cl, n_resamples=N_RESAMPLES, seed=42)
    b = cluster_bootstrap(vals, cl, n_resamples=N_RESAMPLES, seed=42)
    assert json.dumps(a.to_row()) == json.dumps(b.to_row())
    assert np.float64(a.ci_high).tobytes() == np.float64(b.ci_high).tobytes()


# 9 -------------------------------------------------------------------- replay


@pytest.mark.criterion(9, "replay suite")
def test_c9_replay_suite():
    pt, it = make_paired_checkpoints(SynthSpec(seed=7, divergence_strength=0.5, template_sensitivity=1.0))
    prompts = make_synthetic_corpus(n_prompts=30, n_tokens=12, seed=5, n_clusters=10)
    cells = standard_cells(pt, it)
    hist = teacher_histories(prompts[:5], cells["it_native"], max_tokens=6)
    first = replay_cells(prompts[:5], hist, list(cells.values()))
    second = replay_cells(prompts[:5], hist, list(cells.values()))
    assert json.dumps(first.rows) == json.dumps(second.rows)

    result, estimates, quality = run_replay(pt, it, prompts, max_tokens=12, n_resamples=N_RESAMPLES)
    ab = paired_cell_effect(result.cell_rows("it_native"), result.cell_rows("it_raw"), n_resamples=200)
    ba = paired_cell_effect(result.cell_rows("it_raw"), result.cell_rows("it_native"), n_resamples=200)
    assert ab.estimate == -ba.estimate
    assert quality["malformed_records"] == 0 and quality["missing_aligned_steps"] == 0
    by_name = {e.name: e.estimate for e in estimates}
    native = by_name["it_native.paired.it_native-pt_raw"]
    raw = by_name["it_native.paired.it_raw-pt_raw"]
    assert native > raw > 0


# 10 ----------------------------------------------------------- report / claims


@pytest.mark.criterion(10, "report and claim check")
def test_c10_report_and_claims(tmp_path, capsys):
    text = render_report(PUBLISHED_SUMMARIES)
    for quoted in ("+0.425 nats [+0.356, +0.493]", "1,273,606", "+0.762 nats [+0.709, +0.814]"):
        assert quoted in text
    assert all(r.passed for r in claim_check(PUBLISHED_SUMMARIES, PUBLISHED_CLAIMS))
    assert cli_run(["report", "check", "--summaries", str(PUBLISHED_SUMMARIES), "--claims", str(PUBLISHED_CLAIMS)]) == 0

    dest = tmp_path / "perturbed"
    shutil.copytree(PUBLISHED_SUMMARIES, dest)
    data = json.loads((dest / "estimates.json").read_text())
    row = next(r for r in data["rows"] if r["name"] == "late_gap.matched.raw")
    row["estimate"] += 0.002
    (dest / "estimates.json").write_text(json.dumps(data))
    assert cli_run(["report", "check", "--summaries", str(dest), "--claims", str(PUBLISHED_CLAIMS)]) != 0
    capsys.readouterr()
