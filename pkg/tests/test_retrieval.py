import itertools

import numpy as np
import pytest

from viewset.model import Prediction
from viewset.retrieval import (
    GroundTruth,
    MetricsReport,
    QueryScore,
    RankList,
    aggregate,
    build_l1,
    format_key_values,
    format_table,
    rerank_l2,
    score_query,
)
from oracles import retrieval_scores_bruteforce


def pred(probs):
    p = np.asarray(probs, dtype=float)
    return Prediction(logits=np.log(np.maximum(p, 1e-12)), probabilities=p)


# ---------------------------------------------------------------- build_l1

def test_l1_empty_when_no_class_match():
    query = pred([0.9, 0.1])
    corpus = [("a", pred([0.2, 0.8])), ("b", pred([0.3, 0.7]))]
    assert build_l1("q", query, corpus).entries == []


def test_l1_sorted_by_probability():
    query = pred([0.9, 0.1])
    corpus = [("a", pred([0.9, 0.1])), ("b", pred([0.7, 0.3])),
              ("c", pred([0.8, 0.2])), ("d", pred([0.2, 0.8]))]
    out = build_l1("q", query, corpus)
    assert out.ids == ["a", "c", "b"]
    assert [s for _, s in out.entries] == [0.9, 0.8, 0.7]


def test_l1_excludes_query_and_breaks_ties_by_id():
    query = pred([0.6, 0.4])
    corpus = [("q", query), ("b", pred([0.6, 0.4])), ("a", pred([0.6, 0.4]))]
    out = build_l1("q", query, corpus)
    assert out.ids == ["a", "b"]


def test_l1_truncates_to_thousand_highest():
    rng = np.random.default_rng(0)
    probs = rng.uniform(0.5, 1.0, size=1500)
    corpus = [(f"s{i:04d}", pred([p, 1.0 - p])) for i, p in enumerate(probs)]
    out = build_l1("q", pred([0.9, 0.1]), corpus)
    assert len(out.entries) == 1000
    # oracle: sort the full list, keep the top 1000
    full = sorted(((f"s{i:04d}", p) for i, p in enumerate(probs)),
                  key=lambda t: (-t[1], t[0]))
    assert out.ids == [sid for sid, _ in full[:1000]]


# --------------------------------------------------------------- rerank_l2

def rank(ids, stage="L1"):
    return RankList("q", [(i, 1.0 - 0.01 * n) for n, i in enumerate(ids)], stage)


def test_l2_identity_when_all_match():
    l1 = rank(list("abcd"))
    subs = {i: 5 for i in "abcd"}
    assert rerank_l2(l1, 5, subs).ids == list("abcd")


def test_l2_stable_partition():
    l1 = rank(list("abcd"))
    subs = {"a": 1, "b": 2, "c": 1, "d": 2}
    assert rerank_l2(l1, 2, subs).ids == ["b", "d", "a", "c"]


def test_l2_missing_prediction_treated_nonmatching():
    l1 = rank(list("abc"))
    subs = {"a": 3, "c": 3}
    assert rerank_l2(l1, 3, subs).ids == ["a", "c", "b"]


def test_l2_matches_two_pass_oracle_on_random_lists():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ids = [f"s{i}" for i in range(50)]
        rng.shuffle(ids)
        l1 = rank(ids)
        subs = {i: int(rng.integers(0, 4)) for i in ids}
        target = int(rng.integers(0, 4))
        got = rerank_l2(l1, target, subs).ids
        want = [i for i in ids if subs[i] == target] + \
               [i for i in ids if subs[i] != target]
        assert got == want


def test_l2_is_permutation_and_idempotent():
    rng = np.random.default_rng(2)
    for _ in range(50):
        ids = [f"s{i}" for i in range(30)]
        rng.shuffle(ids)
        l1 = rank(ids)
        subs = {i: int(rng.integers(0, 3)) for i in ids}
        l2 = rerank_l2(l1, 1, subs)
        assert sorted(l2.entries) == sorted(l1.entries)
        assert rerank_l2(l2, 1, subs).entries == l2.entries


# -------------------------------------------------------------- score_query

def gt_for(cats):
    return GroundTruth(category={f"s{i}": c for i, c in enumerate(cats)})


def test_score_perfect_list():
    # corpus: query s0 plus three same-category shapes, all retrieved
    gt = gt_for([0, 0, 0, 0])
    rl = RankList("s0", [("s1", 0.9), ("s2", 0.8), ("s3", 0.7)])
    s = score_query(rl, gt)
    assert (s.p_at_n, s.r_at_n, s.f1_at_n, s.map, s.ndcg) == (1, 1, 1, 1, 1)


def test_score_ap_five_sixths():
    gt = gt_for([0, 0, 1, 0])
    rl = RankList("s0", [("s1", 0.9), ("s2", 0.8), ("s3", 0.7)])
    s = score_query(rl, gt)
    assert s.map == (1.0 / 1.0 + 2.0 / 3.0) / 2.0  # enumerated AP sum
    assert s.map == pytest.approx(5.0 / 6.0, abs=1e-15)


def test_score_empty_list_all_zero():
    gt = gt_for([0, 0])
    s = score_query(RankList("s0", []), gt)
    assert (s.p_at_n, s.r_at_n, s.f1_at_n, s.map, s.ndcg) == (0, 0, 0, 0, 0)


def test_score_category_absent_from_corpus():
    gt = gt_for([0, 1, 1])
    s = score_query(RankList("s0", [("s1", 0.9)]), gt)
    assert s.p_at_n == 0.0
    assert (s.r_at_n, s.map, s.ndcg) == (0, 0, 0)


def test_scores_bounded_on_random_inputs():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 8))
        cats = rng.integers(0, 3, size=n).tolist()
        gt = gt_for(cats)
        k = int(rng.integers(0, n))
        ids = [f"s{i}" for i in rng.permutation(np.arange(1, n))[:k]]
        s = score_query(RankList("s0", [(i, 0.5) for i in ids]), gt)
        for v in (s.p_at_n, s.r_at_n, s.f1_at_n, s.map, s.ndcg):
            assert 0.0 <= v <= 1.0


def test_swapping_adjacent_equal_relevance_preserves_scores():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = 6
        cats = rng.integers(0, 2, size=n).tolist()
        gt = gt_for(cats)
        ids = [f"s{i}" for i in range(1, n)]
        rng.shuffle(ids)
        base = score_query(RankList("s0", [(i, 0.5) for i in ids]), gt)
        rel = [gt.category[i] == cats[0] for i in ids]
        for j in range(len(ids) - 1):
            if rel[j] == rel[j + 1]:
                swapped = ids.copy()
                swapped[j], swapped[j + 1] = swapped[j + 1], swapped[j]
                s = score_query(RankList("s0", [(i, 0.5) for i in swapped]), gt)
                assert (s.p_at_n, s.r_at_n, s.f1_at_n, s.map, s.ndcg) == \
                    (base.p_at_n, base.r_at_n, base.f1_at_n, base.map, base.ndcg)


def test_score_matches_bruteforce_oracle_small_corpora():
    # trimmed sweep here; the exhaustive enumeration runs in acceptance
    for cats in itertools.product(range(2), repeat=4):
        gt = gt_for(cats)
        others = [f"s{i}" for i in range(1, 4)]
        for k in range(4):
            for subset in itertools.permutations(others, k):
                rl = RankList("s0", [(i, 0.5) for i in subset])
                s = score_query(rl, gt)
                rel = [1 if cats[int(i[1:])] == cats[0] else 0 for i in subset]
                total = sum(1 for c in cats[1:] if c == cats[0])
                p, r, f1, ap, ndcg = retrieval_scores_bruteforce(rel, total)
                assert (s.p_at_n, s.r_at_n, s.f1_at_n, s.map, s.ndcg) == \
                    (p, r, f1, ap, ndcg)


# ---------------------------------------------------------------- aggregate

def qs(cat, value, qid="q"):
    return QueryScore(query_id=qid, category=cat, p_at_n=value, r_at_n=value,
                      f1_at_n=value, map=value, ndcg=value)


def test_aggregate_single_query():
    rep = aggregate([qs(0, 0.625)])
    assert rep.micro == rep.macro
    assert rep.micro["map"] == 0.625


def test_aggregate_macro_balances_categories():
    scores = [qs(0, 0.8, f"a{i}") for i in range(10)] + \
             [qs(1, 0.2, f"b{i}") for i in range(2)]
    rep = aggregate(scores)
    assert rep.macro["map"] == pytest.approx(0.5)
    assert rep.micro["map"] == pytest.approx(0.7)


def test_aggregate_identical_scores():
    rep = aggregate([qs(c, 0.31, f"q{c}{i}") for c in range(3) for i in range(4)])
    for name in ("p_at_n", "r_at_n", "f1_at_n", "map", "ndcg"):
        assert rep.micro[name] == pytest.approx(0.31)
        assert rep.macro[name] == pytest.approx(0.31)


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([])


# ---------------------------------------------------------------- reporting

def test_report_formats():
    rep = MetricsReport(micro={n: 0.5 for n in ("p_at_n", "r_at_n", "f1_at_n",
                                                "map", "ndcg")},
                        macro={n: 0.25 for n in ("p_at_n", "r_at_n", "f1_at_n",
                                                 "map", "ndcg")})
    table = format_table(rep)
    assert "micro" in table and "0.5000" in table
    kv = format_key_values(rep)
    assert "micro.map\t0.500000" in kv
    assert "macro.ndcg\t0.250000" in kv
