import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from moetts import alignment as al


def brute_force_best(ll):
    """Exhaustive search over monotone surjective alignments (compositions of frames)."""
    n_text, n_frames = ll.shape
    best = -np.inf
    for cuts in itertools.combinations(range(1, n_frames), n_text - 1):
        bounds = (0, *cuts, n_frames)
        score = sum(ll[i, bounds[i]:bounds[i + 1]].sum() for i in range(n_text))
        best = max(best, score)
    return best


def test_single_phoneme_takes_all_frames():
    a = al.mas_align(np.random.default_rng(0).standard_normal((1, 6)))
    assert a.tolist() == [[1] * 6]
    assert al.durations_from_alignment(a).tolist() == [6]


def test_hand_example():
    ll = np.array([[0, -0.5, -5], [-3, -1, 0]])
    a = al.mas_align(ll)
    assert al.durations_from_alignment(a).tolist() == [2, 1]
    assert al.alignment_score(ll, a) == -0.5


def test_ties_go_to_later_phoneme():
    a = al.mas_align(np.zeros((2, 3)))
    assert al.durations_from_alignment(a).tolist() == [1, 2]


def test_too_few_frames():
    with pytest.raises(ValueError, match="no monotonic alignment"):
        al.mas_align(np.zeros((4, 3)))


def test_matches_brute_force_random():
    rng = np.random.default_rng(123)
    for _ in range(200):
        n_text = int(rng.integers(1, 6))
        n_frames = int(rng.integers(n_text, 9))
        ll = rng.standard_normal((n_text, n_frames))
        a = al.mas_align(ll)
        al.check_alignment(a)
        assert al.alignment_score(ll, a) == pytest.approx(brute_force_best(ll), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 10_000))
def test_alignment_validity_property(n_text, extra, seed):
    ll = np.random.default_rng(seed).normal(size=(n_text, n_text + extra))
    a = al.mas_align(ll)
    al.check_alignment(a)
    assert al.durations_from_alignment(a).sum() == n_text + extra


def test_durations_from_alignment_examples():
    assert al.durations_from_alignment([[1, 1, 0], [0, 0, 1]]).tolist() == [2, 1]
    assert al.durations_from_alignment(np.eye(4, dtype=int)).tolist() == [1, 1, 1, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8))
def test_duration_alignment_round_trip(d):
    a = al.alignment_from_durations(d)
    al.check_alignment(a)
    assert al.durations_from_alignment(a).tolist() == d


def test_check_alignment_rejects_bad():
    with pytest.raises(ValueError):
        al.check_alignment([[1, 0, 1], [0, 1, 0]])
    with pytest.raises(ValueError):
        al.check_alignment([[1, 1, 1], [0, 0, 0]])


def test_expand_by_durations():
    h = torch.tensor([[1.0, 2.0]])
    assert al.expand_by_durations(h, [2, 1]).tolist() == [[1.0, 1.0, 2.0]]
    x = torch.randn(3, 5)
    assert torch.equal(al.expand_by_durations(x, [1] * 5), x)
    with pytest.raises(ValueError):
        al.expand_by_durations(h, [2, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=6))
def test_expand_matches_alignment_product(d):
    h = torch.randn(2, len(d), dtype=torch.float64)
    a = torch.from_numpy(al.alignment_from_durations(d)).double()
    torch.testing.assert_close(al.expand_by_durations(h, d), h @ a)
    assert al.durations_from_alignment(a.numpy()).tolist() == d


def test_inference_conversion():
    log_d = torch.tensor([0.0, np.log(2.0), np.log(3.2)])
    assert al.durations_to_frames(log_d).tolist() == [1, 2, 4]
    assert al.durations_to_frames(torch.tensor([-5.0])).tolist() == [1]
