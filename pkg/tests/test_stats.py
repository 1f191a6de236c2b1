import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from coattr import stats


def test_mcnemar_examples():
    assert stats.mcnemar_exact(0, 0) == 1.0
    assert stats.mcnemar_exact(1, 1) == 1.0
    assert 4.2e-17 <= stats.mcnemar_exact(7, 81) <= 4.8e-17


def test_mcnemar_one_one_by_enumeration():
    # Binomial(2, 1/2): P(X <= 1) = 3/4, doubled and capped at 1
    assert stats.mcnemar_exact(1, 1) == min(1.0, 2 * 0.75)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 120), st.integers(0, 120))
def test_mcnemar_matches_scipy_and_is_symmetric(a, b):
    p = stats.mcnemar_exact(a, b)
    assert p == stats.mcnemar_exact(b, a)
    assert 0 < p <= 1
    if a + b:
        ref = binomtest(min(a, b), a + b, 0.5).pvalue
        assert p == pytest.approx(ref, rel=1e-9)


def test_mcnemar_rejects_negative():
    with pytest.raises(ValueError):
        stats.mcnemar_exact(-1, 3)


def test_bootstrap_degenerate_cases():
    assert stats.paired_bootstrap_ci([(1, 1), (0, 0), (1, 1)]) == (0.0, 0.0, 0.0)
    assert stats.paired_bootstrap_ci([(1, 0)] * 7) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        stats.paired_bootstrap_ci([])


def test_bootstrap_is_deterministic_given_seed():
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, 2, (40, 2))
    assert stats.paired_bootstrap_ci(pairs, 500, 3) == stats.paired_bootstrap_ci(pairs, 500, 3)


def test_bootstrap_brackets_truth_and_shrinks():
    rng = np.random.default_rng(1)
    widths = []
    for n in (100, 1600):
        a = rng.random(n) < 0.7
        b = rng.random(n) < 0.5
        diff, lo, hi = stats.paired_bootstrap_ci(np.stack([a, b], 1), 2000, 0)
        assert lo <= diff <= hi
        assert lo <= 0.2 <= hi
        widths.append(hi - lo)
    # 16x the cells -> roughly a quarter of the width
    assert 0.15 < widths[1] / widths[0] < 0.4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=15), st.integers(0, 99))
def test_bootstrap_contains_point_estimate(pairs, seed):
    diff, lo, hi = stats.paired_bootstrap_ci(pairs, 200, seed)
    assert lo <= diff <= hi


def test_paired_outcome_convention():
    lp = [True, False, True, False, True]
    proxy = [True, True, False, False, False]
    po = stats.PairedOutcome.from_indicators(lp, proxy)
    assert (po.b01, po.b10, po.both_right, po.both_wrong) == (1, 2, 1, 1)
    assert po.n == 5


def records(per_seed_hits):
    out = []
    for seed, hits in per_seed_hits.items():
        for h in hits:
            out.append({"seed": seed, "cf_status": "certified", "cf_family": "a",
                        "top1_lp": "a" if h else "b", "top1_proxy": "b"})
    return out


def test_summarize_seed_mean_and_population_std():
    rep = stats.summarize(records({0: [1] * 9 + [0], 1: [1] * 10, 2: [1] * 8 + [0] * 2}), ["lp", "proxy"],
                          resamples=200)
    assert rep["backends"]["lp"]["mean"] == pytest.approx(0.9)
    assert rep["backends"]["lp"]["std"] == pytest.approx(np.std([0.9, 1.0, 0.8]))
    assert rep["n_cert"] == 30
    pair = rep["pairs"]["lp_vs_proxy"]
    assert (pair["b01"], pair["b10"]) == (0, 27)
    assert pair["p"] == stats.mcnemar_exact(0, 27)


def test_summarize_single_seed_all_match():
    rep = stats.summarize(records({0: [1, 1, 1]}), ["lp"], resamples=50)
    assert rep["backends"]["lp"] == {"mean": 1.0, "std": 0.0, "pooled": 1.0, "per_seed": {"0": 1.0}}


def test_summarize_ignores_uncertified_and_marks_empty():
    recs = records({0: [1, 0]})
    recs.append({"seed": 0, "cf_status": "arith_only", "cf_family": "", "top1_lp": "a", "top1_proxy": "a"})
    assert stats.summarize(recs, ["lp"], resamples=50)["n_cert"] == 2
    empty = stats.summarize([{**recs[-1]}], ["lp"])
    assert empty["n_cert"] == 0 and empty["empty"] == stats.EMPTY
