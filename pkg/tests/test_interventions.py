import numpy as np
import pytest

from convgap.corpus import make_synthetic_corpus
from convgap.engine import substitute_mlp_window
from convgap.errors import MoERejectedError, UnpairedCheckpointsError, WindowError
from convgap.interventions import (
    AUDIT_ORDER,
    audit_windows,
    depth_windows,
    run_graft_experiment,
    run_random_control,
    run_swap_experiment,
    window_audit,
    window_geometry,
)
from convgap.synthetic import SynthSpec, make_paired_checkpoints

from _models import random_checkpoint, tiny_config


@pytest.fixture(scope="module")
def prompts():
    return make_synthetic_corpus(n_prompts=16, n_tokens=12, seed=2, n_clusters=8)


def spans(windows):
    return {k: (w.start, w.end) for k, w in windows.items()}


def test_depth_windows_anchor_geometry():
    assert spans(depth_windows(32)) == {"early": (0, 12), "mid": (9, 21), "late": (19, 31)}
    assert spans(depth_windows(34))["late"] == (20, 33)
    assert spans(depth_windows(36))["late"] == (22, 35)
    assert spans(depth_windows(8)) == {"early": (0, 2), "mid": (2, 4), "late": (5, 7)}
    with pytest.raises(WindowError):
        depth_windows(7)


def test_audit_windows_eight_layers():
    got = spans(audit_windows(8))
    assert got == {
        "pre_late_half": (3, 4),
        "late_full": (5, 7),
        "late_front_half": (5, 6),
        "late_center_half": (5, 6),
        "late_terminal_half": (6, 7),
        "terminal_quarter": (7, 7),
    }
    assert list(audit_windows(8)) == list(AUDIT_ORDER)


@pytest.mark.parametrize("n", [8, 12, 26, 32, 34, 36, 48])
def test_audit_windows_inside_stack(n):
    late = depth_windows(n)["late"]
    for w in audit_windows(n).values():
        assert 0 <= w.start <= w.end < n
    aw = audit_windows(n)
    assert aw["pre_late_half"].end == late.start - 1
    assert aw["late_terminal_half"].end == n - 1
    assert window_geometry(n)["late"] == f"{late.start}-{late.end}"


@pytest.mark.criterion(4, "graft/swap algebra")
def test_self_graft_and_self_swap_zero(synth_pair, prompts):
    pt, it = synth_pair
    late = depth_windows(8)["late"]
    g = run_graft_experiment(pt, pt, late, prompts, n_resamples=100)
    s = run_swap_experiment(it, it, late, prompts, n_resamples=100)
    for out in (g, s):
        assert all(r["delta_late"] == 0.0 and r["delta_window"] == 0.0 for r in out.rows)
        assert out.delta_late_kl == 0.0


@pytest.mark.criterion(4, "graft/swap algebra")
def test_swap_restoration(synth_pair, prompts):
    pt, it = synth_pair
    window = SynthSpec().window
    restored = substitute_mlp_window(it, pt, window)
    for name in pt.tensors:
        assert np.array_equal(restored.tensors[name], pt.tensors[name])
    s = run_swap_experiment(it, pt, window, prompts, n_resamples=100)
    g = run_graft_experiment(pt, pt, window, prompts, n_resamples=100)
    pt_late = np.array([r["host_late"] for r in g.rows])
    swapped = np.array([r["arm_late"] for r in s.rows])
    assert np.max(np.abs(swapped - pt_late)) <= 1e-6


def test_empty_window_is_null(synth_pair, prompts):
    pt, it = synth_pair
    out = run_graft_experiment(pt, it, (), prompts, n_resamples=50)
    assert out.delta_late_kl == 0.0
    assert out.arm == "audit_window"


def test_direction_duality(synth_pair, prompts):
    pt, it = synth_pair
    late = depth_windows(8)["late"]
    g = run_graft_experiment(pt, it, late, prompts, n_resamples=200)
    s = run_swap_experiment(it, pt, late, prompts, n_resamples=200)
    assert np.sign(g.delta_late_kl) == -np.sign(s.delta_late_kl) == 1
    assert g.arm == "B_late" and s.arm == "D_late"


def test_early_and_mid_windows_untouched(synth_pair, prompts):
    pt, it = synth_pair
    w = depth_windows(8)
    assert run_graft_experiment(pt, it, w["early"], prompts, n_resamples=50).delta_late_kl == 0.0
    assert run_swap_experiment(it, pt, w["mid"], prompts, n_resamples=50).delta_late_kl == 0.0


def test_random_control_zero_for_identical_pair(synth_pair, prompts):
    pt, _ = synth_pair
    out = run_random_control(pt, pt, depth_windows(8)["late"], prompts[:4], seeds=(0, 1), n_resamples=50)
    assert out.delta_late_kl == 0.0
    assert all(r["mean_matched_norm"] == 0.0 for r in out.rows)
    with pytest.raises(ValueError):
        run_random_control(pt, pt, depth_windows(8)["late"], prompts[:4], seeds=())


def test_random_control_reports_true_graft(synth_pair, prompts):
    pt, it = synth_pair
    out = run_random_control(pt, it, depth_windows(8)["late"], prompts[:6], seeds=(0,), n_resamples=50)
    assert out.extra["true_graft_late"]["estimate"] > 0
    assert "isotropic" in out.extra["control_caveat"]
    assert out.seeds == [0]


def test_pre_late_swap_smaller_than_late_full(prompts):
    # divergence spread over pre-late and late layers
    pt, it = make_paired_checkpoints(SynthSpec(divergence_window=(3, 4, 5, 6, 7)))
    audit = window_audit(pt, it, prompts, n_resamples=500)
    assert list(audit) == list(AUDIT_ORDER)
    full = audit["late_full"]["swap"].late
    pre = audit["pre_late_half"]["swap"].late
    assert full.estimate < 0 and full.ci_high < 0
    assert pre.estimate < 0 and pre.ci_high < 0
    assert abs(pre.estimate) < abs(full.estimate)


def test_unpaired_and_moe_rejected(synth_pair, prompts):
    pt, _ = synth_pair
    other = random_checkpoint(tiny_config(), seed=0)
    with pytest.raises(UnpairedCheckpointsError):
        run_graft_experiment(pt, other, [7], prompts)
    moe = random_checkpoint(tiny_config(moe_flag=True), seed=0)
    with pytest.raises(MoERejectedError):
        run_graft_experiment(moe, moe, [1], prompts)
    with pytest.raises(WindowError):
        run_graft_experiment(pt, pt, [9], prompts)
