import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gavebid.score import (PrefixStats, ScoreConfig, Variant, compute_cpa, penalty, rtg_from_scores,
                           rtg_sequence, score_arrays, score_at)

S2 = ScoreConfig(1.0, Variant.S2)


def test_compute_cpa_cases():
    assert compute_cpa(PrefixStats(10, 5)) == 2.0
    assert compute_cpa(PrefixStats(0, 0)) == 0.0
    assert compute_cpa(PrefixStats(3, 0)) == math.inf


def test_penalty_examples():
    C = 2.0
    assert penalty(C / 2, ScoreConfig(C, Variant.S2)) == 1.0
    assert penalty(2 * C, ScoreConfig(C, Variant.S2)) == 0.25
    assert penalty(2 * C, ScoreConfig(C, Variant.S3)) == 0.03125
    assert penalty(math.inf, S2) == 0.0
    assert penalty(0.0, S2) == 1.0
    assert penalty(100.0, ScoreConfig(1.0, Variant.S1)) == 1.0


def test_score_at_examples():
    cfg = ScoreConfig(2.0, Variant.S2)
    assert score_at(PrefixStats(10, 10), cfg) == 10.0
    assert score_at(PrefixStats(40, 10), cfg) == 2.5
    for v in Variant:
        assert score_at(PrefixStats(0, 0), ScoreConfig.for_variant(v, 2.0)) == 0.0
    assert score_at(PrefixStats(40, 10), ScoreConfig(2.0, Variant.S1)) == 10.0


def test_rtg_examples():
    assert rtg_from_scores([1, 3, 6]).tolist() == [6, 5, 3]
    assert rtg_from_scores([0, 0, 0, 0]).tolist() == [0, 0, 0, 0]
    assert rtg_from_scores([4]).tolist() == [4]
    with pytest.raises(ValueError):
        rtg_sequence([], S2)


def test_config_invariants():
    assert ScoreConfig(1.0, Variant.S2).gamma == 2.0
    assert ScoreConfig(1.0, Variant.S3).gamma == 5.0
    with pytest.raises(ValueError):
        ScoreConfig(0.0)
    with pytest.raises(ValueError):
        ScoreConfig(1.0, Variant.S3, gamma=2.0)
    with pytest.raises(ValueError):
        ScoreConfig(1.0, "S4")


def test_penalty_monotone_on_sorted_samples():
    rng = np.random.default_rng(0)
    cpas = np.sort(rng.exponential(2.0, size=1000))
    for cfg in (ScoreConfig(1.0, Variant.S2), ScoreConfig(1.0, Variant.S3)):
        p = [penalty(c, cfg) for c in cpas]
        assert all(a >= b for a, b in zip(p, p[1:]))
        assert all(x == 1.0 for c, x in zip(cpas, p) if c <= 1.0)


@given(st.floats(1.0001, 1e6))
def test_exponent_ordering(cpa):
    assert penalty(cpa, ScoreConfig(1.0, Variant.S3)) <= penalty(cpa, ScoreConfig(1.0, Variant.S2))


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 20)), min_size=1, max_size=30),
       st.sampled_from(list(Variant)))
def test_telescoping_and_vectorized(steps, variant):
    cfg = ScoreConfig.for_variant(variant, 1.0)
    cost = np.cumsum([c for c, _ in steps])
    value = np.cumsum([v for _, v in steps])
    stats = [PrefixStats(float(c), float(v)) for c, v in zip(cost, value)]
    r = rtg_sequence(stats, cfg)
    s = np.array([score_at(x, cfg) for x in stats])
    np.testing.assert_allclose(score_arrays(cost, value, cfg), s, rtol=1e-12, atol=1e-12)
    prev = np.concatenate(([0.0], s[:-1]))
    np.testing.assert_allclose(r[:-1] - r[1:], (s - prev)[:-1], atol=1e-9)
    assert r[0] == pytest.approx(s[-1], abs=1e-9)
    if variant is Variant.S1:
        rewards = np.array([v for _, v in steps])
        np.testing.assert_allclose(r, rewards[::-1].cumsum()[::-1], atol=1e-9)
        assert np.all(r >= -1e-12)
