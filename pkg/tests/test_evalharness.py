import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from psfvae.evalharness import (ConfigurationError, MetricConfig, MetricsReport, batch_metrics,
                                evaluate_scores, hir_at_m, model_select, ndcg_at_m, rank_items,
                                recall_at_m, seed_summary)


def brute_recall(order, holdout, m):
    hits = 0
    for item in order[:m]:
        for h in holdout:
            if item == h:
                hits += 1
    return hits / min(m, len(holdout))


def brute_ndcg(order, holdout, m):
    dcg = 0.0
    for pos, item in enumerate(order[:m], start=1):
        if item in holdout:
            dcg += 1.0 / math.log2(pos + 1)
    idcg = 0.0
    for pos in range(1, min(m, len(holdout)) + 1):
        idcg += 1.0 / math.log2(pos + 1)
    return dcg / idcg


def brute_rank(scores):
    # selection sort; ties to the lower index; -inf never ranked
    remaining = [j for j in range(len(scores)) if scores[j] != -np.inf]
    out = []
    while remaining:
        best = remaining[0]
        for j in remaining[1:]:
            if scores[j] > scores[best]:
                best = j
        out.append(best)
        remaining.remove(best)
    return out


def test_recall_examples():
    top = ["a"] + [f"x{i}" for i in range(19)]
    assert recall_at_m(top, {"a", "b"}, 20) == 0.5
    assert recall_at_m(["a", "b", "c"], {"a", "b"}, 20) == 1.0


def test_ndcg_examples():
    assert ndcg_at_m(["a", "b", "c"], {"a", "b"}, 100) == 1.0
    assert ndcg_at_m(["x", "a"], {"a"}, 100) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_m(["x", "a"], {"a"}, 100) == pytest.approx(0.63093, abs=1e-5)


def test_hir_examples():
    assert hir_at_m(list(range(10)), {20, 30}, 10) == 0.0
    assert hir_at_m(list(range(10)), {3, 30}, 10) == 0.5
    assert hir_at_m(list(range(10)), {3, 30}, 10, norm="m") == 0.1


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        recall_at_m([1, 2], set(), 5)
    with pytest.raises(ValueError):
        hir_at_m([1, 2], set(), 5)


def test_rank_items_ties_and_masking():
    scores = np.array([[0.5, 0.9, 0.5, -np.inf, 0.9]])
    assert rank_items(scores, 5).tolist() == [[1, 4, 0, 2, -1]]


@given(st.integers(0, 2 ** 32 - 1))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_items = int(rng.integers(5, 60))
    scores = rng.integers(0, 6, size=n_items).astype(float)   # many ties
    scores[rng.random(n_items) < 0.2] = -np.inf
    holdout = rng.choice(n_items, size=int(rng.integers(1, n_items)), replace=False)
    unfair = rng.choice(n_items, size=int(rng.integers(1, n_items)), replace=False)
    cfg = MetricConfig(int(rng.integers(1, 30)), int(rng.integers(1, 80)), int(rng.integers(1, 20)))
    r, n, h = batch_metrics(scores[None, :], [holdout], [unfair], cfg)
    order = brute_rank(list(scores))
    assert abs(r[0] - brute_recall(order, set(holdout), cfg.recall_cutoff)) <= 1e-12
    assert abs(n[0] - brute_ndcg(order, set(holdout), cfg.ndcg_cutoff)) <= 1e-12
    assert abs(h[0] - brute_recall(order, set(unfair), cfg.hir_cutoff)) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_permuting_below_cutoff_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(40).astype(float)
    holdout = [rng.choice(40, size=5, replace=False)]
    unfair = [rng.choice(40, size=3, replace=False)]
    cfg = MetricConfig(5, 8, 4)
    base = batch_metrics(scores[None], holdout, unfair, cfg)
    low = np.argsort(-scores)[8:]
    shuffled = scores.copy()
    shuffled[low] = rng.permutation(scores[low])
    for a, b in zip(base, batch_metrics(shuffled[None], holdout, unfair, cfg)):
        assert a[0] == b[0]


@given(st.integers(0, 2 ** 32 - 1))
def test_promoting_a_relevant_item_never_hurts(seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(30).astype(float)
    holdout = rng.choice(30, size=4, replace=False)
    cfg = MetricConfig(5, 10, 5)
    before = batch_metrics(scores[None], [holdout], [holdout], cfg)
    promoted = scores.copy()
    promoted[holdout[0]] = scores.max() + 1
    after = batch_metrics(promoted[None], [holdout], [holdout], cfg)
    for a, b in zip(before, after):
        assert b[0] >= a[0]


def test_planted_perfect_ranker():
    rng = np.random.default_rng(0)
    n_users, n_items = 20, 50
    hold = sp.random(n_users, n_items, density=0.1, random_state=1, format="csr")
    hold.data[:] = 1
    for u in range(n_users):
        if hold[u].nnz == 0:
            hold[u, u] = 1
    hold = sp.csr_matrix(hold)
    scores = rng.random((n_users, n_items)) + 10 * hold.toarray()
    rep = evaluate_scores(scores, np.arange(n_users), hold, sp.csr_matrix((n_users, n_items)))
    assert np.all(rep.ndcg == 1.0) and np.all(rep.recall == 1.0)
    assert np.isnan(rep.hir).all() and rep.counts["hir"] == 0


def _report(recall, ndcg, hir):
    return MetricsReport(np.arange(len(recall)), np.array(recall, float), np.array(ndcg, float),
                         np.array(hir, float))


def test_met_hat_population_weighting():
    # two users with unfair items, one without
    rep = _report([0.5, 0.7, 0.9], [0.4, 0.6, 0.8], [0.2, 0.0, np.nan])
    met_rf = ((0.5 + 0.4 - 0.2) + (0.7 + 0.6 - 0.0)) / 2
    met_r = 0.9 + 0.8
    assert rep.met_hat() == pytest.approx((2 * met_rf + 1 * met_r) / 3)


def test_model_select_examples():
    a = _report([0.5, 0.5], [0.5, 0.5], [0.3, np.nan])
    assert model_select([a]) == 0
    b = _report([0.5, 0.5], [0.5, 0.5], [0.1, np.nan])
    assert model_select([a, b]) == 1
    # hand-computed: 0.9, 1.2, 1.2 -> earliest of the tied pair
    c = [_report([0.5, 0.4], [0.3, 0.4], [0.2, np.nan]),        # (0.6 + 0.8) / 2 = 0.7... below
         _report([0.7, 0.6], [0.5, 0.6], [0.2, np.nan]),        # (1.0 + 1.2) / 2 = 1.1
         _report([0.6, 0.6], [0.6, 0.6], [0.2, np.nan])]        # (1.0 + 1.2) / 2 = 1.1
    assert [round(x.met_hat(), 10) for x in c] == [0.7, 1.1, 1.1]
    assert model_select(c) == 1
    with pytest.raises(ConfigurationError):
        model_select([])
    with pytest.raises(ConfigurationError):
        _report([np.nan], [np.nan], [np.nan]).met_hat()


def test_metric_config_validation():
    with pytest.raises(ConfigurationError):
        MetricConfig(hir_norm="other")
    with pytest.raises(ConfigurationError):
        MetricConfig(recall_cutoff=0)


def test_report_file(tmp_path):
    rep = _report([0.5, 1.0], [0.25, 1.0], [np.nan, 0.5])
    text = rep.write(tmp_path / "r.csv", config_hash="abc").read_text()
    lines = text.splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "user,recall@20,ndcg@100,hir@10"
    assert lines[2] == "0,0.5,0.25,"
    assert "# summary Met_hat=" in text


def test_seed_summary():
    assert seed_summary([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert seed_summary([4.0]) == (4.0, 0.0)
