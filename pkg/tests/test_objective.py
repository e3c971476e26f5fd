import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrkit.grpo import (
    EmptyStage,
    GroupTooSmall,
    LengthMismatch,
    MissingRef,
    TokenSequence,
    clipped_surrogate,
    dual_stage_loss,
    group_advantages,
    kl_k3,
    select_parents,
)


def mp_advantages(rewards, eps):
    mpmath.mp.dps = 50
    r = [mpmath.mpf(x) for x in rewards]
    mu = sum(r) / len(r)
    sigma = mpmath.sqrt(sum((x - mu) ** 2 for x in r) / len(r))
    return [(x - mu) / (sigma + mpmath.mpf(eps)) for x in r]


def test_advantages_match_high_precision_oracle():
    got = group_advantages([1, 2, 3], 1e-4).values
    want = mp_advantages([1, 2, 3], "1e-4")
    for g, w in zip(got, want):
        assert abs(g - float(w)) <= 1e-12
    assert got[0] == pytest.approx(-1.22459, abs=1e-5)


def test_constant_group_gives_zeros():
    assert group_advantages([2, 2, 2]).values == (0.0, 0.0, 0.0)


def test_group_too_small():
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


reward_lists = st.lists(st.sampled_from([0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, -1.0]), min_size=2, max_size=64)


@given(reward_lists)
def test_advantage_mean_is_zero(rewards):
    adv = group_advantages(rewards)
    if adv.std > 0:
        assert abs(sum(adv.values) / len(adv.values)) <= 1e-9


@given(reward_lists, st.sampled_from([-2.0, -0.5, 0.25, 1.0, 4.0]))
def test_shift_invariance_is_exact(rewards, c):
    assert group_advantages(rewards).values == group_advantages([r + c for r in rewards]).values


@given(reward_lists)
@settings(max_examples=50)
def test_advantages_against_oracle(rewards):
    want = mp_advantages(rewards, "1e-4")
    for g, w in zip(group_advantages(rewards).values, want):
        assert abs(g - float(w)) <= 1e-9


@pytest.mark.parametrize(
    ("flags", "k", "wrong", "right"),
    [
        ([True] * 5 + [False] * 3, 2, 1, 1),
        ([True] * 8, 2, 0, 2),
        ([False] + [True] * 7, 3, 1, 2),
        ([False] * 8, 3, 3, 0),
        ([True, False, True, False], 3, 2, 1),
    ],
)
def test_select_parents_quota(flags, k, wrong, right):
    for seed in range(10):
        picked = select_parents(flags, k, np.random.default_rng(seed))
        assert picked == sorted(set(picked)) and len(picked) == k
        assert sum(not flags[i] for i in picked) == wrong
        assert sum(flags[i] for i in picked) == right


def test_select_parents_bounds():
    with pytest.raises(ValueError):
        select_parents([True, False], 3, np.random.default_rng(0))


def one(new, old, ref=None):
    return TokenSequence(np.array([new]), np.array([old]), None if ref is None else np.array([ref]))


def test_surrogate_hand_cases():
    assert abs(clipped_surrogate(one(0.0, 0.0), 1.0, 0.2) - (-1.0)) <= 1e-12
    assert abs(clipped_surrogate(one(math.log(1.5), 0.0), 1.0, 0.2) - (-1.2)) <= 1e-12
    assert abs(clipped_surrogate(one(math.log(0.5), 0.0), -1.0, 0.2) - 0.8) <= 1e-12


@given(st.lists(st.floats(-0.15, 0.15), min_size=1, max_size=20), st.floats(-3, 3))
def test_inactive_clip_equals_unclipped(deltas, adv):
    old = np.linspace(-2, -1, len(deltas))
    seq = TokenSequence(old + np.array(deltas), old)
    ratio = np.exp(np.array(deltas))
    assert clipped_surrogate(seq, adv, 0.2) == pytest.approx(-float(np.mean(ratio * adv)), abs=1e-12)


def test_kl_zero_at_reference():
    seq = TokenSequence(np.array([-1.0, -2.0]), np.array([-1.0, -2.0]), np.array([-1.0, -2.0]))
    assert np.all(kl_k3(seq) == 0.0)
    assert clipped_surrogate(seq, 1.0, 0.2, 0.02) == clipped_surrogate(seq, 1.0, 0.2, 0.0)


@given(st.floats(-5, 5))
def test_kl_nonnegative(d):
    assert kl_k3(one(0.0, 0.0, d))[0] >= 0.0


def test_surrogate_errors():
    with pytest.raises(MissingRef):
        clipped_surrogate(one(0.0, 0.0), 1.0, 0.2, 0.1)
    with pytest.raises(LengthMismatch):
        TokenSequence(np.zeros(2), np.zeros(3))


def test_dual_stage_loss():
    assert dual_stage_loss([1.0, 3.0], [[0.0, 2.0], [4.0]], 0.5) == pytest.approx(0.5 * 2.0 + 0.5 * 2.5)
    assert dual_stage_loss([1.0], [[9.0]], 0.0) == 1.0
    assert dual_stage_loss([1.0], [[9.0]], 1.0) == 9.0
    with pytest.raises(EmptyStage):
        dual_stage_loss([1.0], [[]], 0.5)
    with pytest.raises(ValueError):
        dual_stage_loss([1.0], [[1.0]], 1.5)
