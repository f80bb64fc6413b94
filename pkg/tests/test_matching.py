import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convgap.errors import EmptyMatchError
from convgap.matching import (
    COVARIATES,
    SMD_THRESHOLD,
    EndpointRows,
    _smd,
    cem_match,
    coarsen,
    matched_effect,
)


def make_rows(conf, ent=None, margin=None, values=None, clusters=None, prefix="r"):
    n = len(conf)
    ent = np.full(n, 1.0) if ent is None else ent
    margin = np.full(n, 0.5) if margin is None else margin
    clusters = [f"c{i}" for i in range(n)] if clusters is None else clusters
    metrics = {} if values is None else {"late_gap": values}
    return EndpointRows(conf, ent, margin, clusters, [f"{prefix}{i}" for i in range(n)], metrics)


def population(rng, n, shift):
    conf = np.clip(rng.beta(2 + 3 * shift, 2, size=n), 1e-3, 1.0)
    ent = np.abs(2.0 - 2.0 * conf + 0.3 * rng.standard_normal(n))
    margin = np.clip(conf - rng.uniform(0, 0.3, size=n) * (1 - conf), 0.0, 1.0)
    return conf, ent, margin


def test_coarsen_identical_rows():
    keys = coarsen(np.ones((6, 3)), n_bins=4)
    assert np.all(keys == keys[0])


def test_coarsen_split_at_median():
    rows = np.array([[0.1, 1.0, 0.1], [0.2, 1.0, 0.1], [0.8, 1.0, 0.1], [0.9, 1.0, 0.1]])
    keys = coarsen(rows, n_bins=2)
    assert keys[:, 0].tolist() == [0, 0, 1, 1]
    assert np.all((keys >= 0) & (keys < 2))


def test_coarsen_order_invariant():
    rng = np.random.default_rng(1)
    rows = rng.random((40, 3))
    perm = rng.permutation(40)
    assert np.array_equal(coarsen(rows)[perm], coarsen(rows[perm]))


def test_coarsen_errors():
    with pytest.raises(ValueError):
        coarsen(np.ones((3, 3)), n_bins=1)
    with pytest.raises(ValueError):
        coarsen(np.zeros((0, 3)))


@pytest.mark.criterion(7, "matching suite")
def test_identical_populations():
    rng = np.random.default_rng(0)
    conf, ent, margin = population(rng, 200, 0.0)
    vals = rng.random(200)
    pt = make_rows(conf, ent, margin, vals, prefix="p")
    it = make_rows(conf, ent, margin, vals, prefix="i")
    match = cem_match(pt, it)
    assert match.retention == 1.0
    assert all(match.smd[c] == 0.0 for c in COVARIATES)
    assert matched_effect(match, pt, it, "late_gap", n_resamples=200).estimate == 0.0
    weights = [s.weight for s in match.strata.values()]
    assert min(weights) > 0 and sum(weights) == pytest.approx(1.0)


@pytest.mark.criterion(7, "matching suite")
def test_disjoint_supports_raise():
    # 20 + 30 rows put the pooled 0.4 cut inside the gap between the supports
    pt = make_rows(np.linspace(0.05, 0.3, 20))
    it = make_rows(np.linspace(0.7, 0.95, 30))
    with pytest.raises(EmptyMatchError):
        cem_match(pt, it)
    # with two bins the pooled median separates equal-size supports
    with pytest.raises(EmptyMatchError):
        cem_match(make_rows(np.linspace(0.05, 0.3, 20)), make_rows(np.linspace(0.7, 0.95, 20)), n_bins=2)


@pytest.mark.criterion(7, "matching suite")
@pytest.mark.parametrize("seed", range(10))
def test_confounded_populations_improve_balance(seed):
    rng = np.random.default_rng(seed)
    pt = make_rows(*population(rng, 400, 0.0), prefix="p")
    it = make_rows(*population(rng, 400, 1.0), prefix="i")
    match = cem_match(pt, it)
    for c in COVARIATES:
        assert match.smd[c] <= match.smd_pre[c]
    assert match.n_matched["pt"] <= 400 and match.n_matched["it"] <= 400


def test_smd_direct_formula():
    w = np.ones(2)
    assert _smd(np.array([-1.0, 1.0]), w, np.array([0.0, 2.0]), w) == pytest.approx(1.0)
    assert _smd(np.array([1.0, 1.0]), w, np.array([2.0, 2.0]), w) == float("inf")


def test_balance_flag_threshold():
    rng = np.random.default_rng(3)
    pt = make_rows(*population(rng, 300, 0.0), prefix="p")
    it = make_rows(*population(rng, 300, 1.0), prefix="i")
    match = cem_match(pt, it, n_bins=2)
    assert match.balance_flag == (match.max_smd > SMD_THRESHOLD)
    assert match.summary()["balance_flag"] == match.balance_flag


def test_matched_effect_two_strata():
    pt = make_rows([0.1, 0.9], values=[0.0, 0.0], clusters=["a", "b"], prefix="p")
    it = make_rows([0.1, 0.9], values=[1.0, 3.0], clusters=["a", "b"], prefix="i")
    match = cem_match(pt, it, n_bins=2)
    assert len(match.strata) == 2
    assert [s.weight for s in match.strata.values()] == [0.5, 0.5]
    est = matched_effect(match, pt, it, "late_gap", n_resamples=200)
    assert est.estimate == pytest.approx(2.0)


def test_matched_effect_missing_metric():
    pt = make_rows([0.1, 0.9], values=[0.0, np.nan], prefix="p")
    it = make_rows([0.1, 0.9], values=[1.0, 3.0], prefix="i")
    match = cem_match(pt, it, n_bins=2)
    with pytest.raises(ValueError, match="missing"):
        matched_effect(match, pt, it, "late_gap")
    with pytest.raises(KeyError):
        matched_effect(match, pt, it, "other")


def test_constant_covariate_warning():
    pt = make_rows([0.1, 0.9], prefix="p")
    it = make_rows([0.2, 0.8], prefix="i")
    match = cem_match(pt, it, n_bins=2)
    assert any("entropy" in w for w in match.warnings)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_order_invariance(seed):
    rng = np.random.default_rng(seed)
    conf_p, ent_p, mar_p = population(rng, 60, 0.0)
    conf_i, ent_i, mar_i = population(rng, 60, 0.5)
    vp, vi = rng.random(60), rng.random(60) + 0.5
    clusters = [f"k{i % 7}" for i in range(60)]
    pt = make_rows(conf_p, ent_p, mar_p, vp, clusters, "p")
    it = make_rows(conf_i, ent_i, mar_i, vi, clusters, "i")
    perm = rng.permutation(60)
    pt2 = make_rows(conf_p[perm], ent_p[perm], mar_p[perm], vp[perm], [clusters[j] for j in perm], "p")
    a = cem_match(pt, it)
    b = cem_match(pt2, it)
    assert a.retention_pt == b.retention_pt and a.retention_it == b.retention_it
    for c in COVARIATES:
        assert a.smd[c] == pytest.approx(b.smd[c], abs=1e-12)
    ea = matched_effect(a, pt, it, "late_gap", n_resamples=50).estimate
    eb = matched_effect(b, pt2, it, "late_gap", n_resamples=50).estimate
    assert ea == pytest.approx(eb, abs=1e-12)
