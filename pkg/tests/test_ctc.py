import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toneunit.ctc import (
    PhoneAlphabet,
    brute_force_ctc,
    collapse,
    ctc_greedy_decode,
    ctc_loss,
    edit_distance,
    min_frames,
    per,
)
from toneunit.errors import ConfigError, InfeasibleTargetError, RangeError, UndefinedMetricError
from toneunit.numcore import grad_check, log_softmax


def random_instance(rng, max_T=6, max_S=5, max_L=3):
    while True:
        T = int(rng.integers(1, max_T + 1))
        S = int(rng.integers(2, max_S + 1))
        L = int(rng.integers(0, max_L + 1))
        target = [int(x) for x in rng.integers(1, S, size=L)]
        if min_frames(target) <= T:
            return log_softmax(rng.standard_normal((T, S)) * 2), target


def test_single_frame():
    lp = log_softmax(np.array([[0.3, 1.2, -0.4]]))
    assert ctc_loss(lp, [1])[0] == pytest.approx(-lp[0, 1])


def test_two_frames_three_alignments():
    lp = log_softmax(np.random.default_rng(0).standard_normal((2, 3)))
    p = np.exp(lp)
    expected = -np.log(p[0, 1] * p[1, 1] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0])
    assert ctc_loss(lp, [1])[0] == pytest.approx(expected, abs=1e-12)
    assert brute_force_ctc(lp, [1]) == pytest.approx(expected, abs=1e-12)


def test_empty_target_is_all_blank():
    lp = log_softmax(np.random.default_rng(1).standard_normal((5, 4)))
    assert ctc_loss(lp, [])[0] == pytest.approx(-lp[:, 0].sum())


def test_uniform_two_by_two():
    lp = np.log(np.full((2, 2), 0.5))
    assert brute_force_ctc(lp, [1]) == pytest.approx(-math.log(3 / 4))
    assert ctc_loss(lp, [1])[0] == pytest.approx(-math.log(3 / 4))


def test_infeasible_target():
    lp = log_softmax(np.zeros((2, 3)))
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 1])  # needs a blank between the repeats: 3 frames
    with pytest.raises(InfeasibleTargetError):
        brute_force_ctc(lp, [1, 1])
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 2, 1])


def test_target_must_not_contain_blank():
    with pytest.raises(RangeError):
        ctc_loss(log_softmax(np.zeros((3, 3))), [0])


def test_brute_force_refuses_large_instances():
    with pytest.raises(ConfigError):
        brute_force_ctc(np.zeros((12, 5)), [1])


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(200):
        lp, target = random_instance(rng)
        assert abs(ctc_loss(lp, target)[0] - brute_force_ctc(lp, target)) <= 1e-6


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp, target = random_instance(rng, max_T=8, max_S=5, max_L=3)
        assert grad_check(lambda x: ctc_loss(x, target), lp, 1e-4) < 1e-4


def test_gradient_composed_with_log_softmax():
    from toneunit.numcore import log_softmax_backward

    rng = np.random.default_rng(8)
    logits = rng.standard_normal((7, 4))

    def fn(x):
        lp = log_softmax(x)
        loss, g = ctc_loss(lp, [1, 2, 2])
        return loss, log_softmax_backward(g, lp)

    assert grad_check(fn, logits) < 1e-4


def test_long_sequences_do_not_underflow():
    rng = np.random.default_rng(9)
    lp = log_softmax(rng.standard_normal((400, 16)) * 3)
    target = [int(x) for x in rng.integers(1, 16, size=60)]
    loss, grad = ctc_loss(lp, target)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_non_negative(seed):
    lp, target = random_instance(np.random.default_rng(seed))
    assert ctc_loss(lp, target)[0] >= -1e-12


def test_zero_loss_only_for_certain_path():
    lp = np.log(np.array([[1e-300, 1.0, 1e-300], [1.0, 1e-300, 1e-300], [1e-300, 1e-300, 1.0]]))
    assert ctc_loss(lp, [1, 2])[0] == pytest.approx(0.0, abs=1e-12)
    lp2 = log_softmax(np.array([[0.0, 5.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 5.0]]))
    assert ctc_loss(lp2, [1, 2])[0] > 0


# -- decoding ---------------------------------------------------------------------


def onehot_logprobs(path, S=4):
    lp = np.full((len(path), S), -10.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


@pytest.mark.parametrize("path,expected", [
    ([0, 1, 1, 0, 2], [1, 2]),
    ([0, 0, 0], []),
    ([1, 0, 1], [1, 1]),
])
def test_greedy_decode_rules(path, expected):
    assert ctc_greedy_decode(onehot_logprobs(path)) == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=20))
def test_collapse_blank_free_and_stable_under_frame_repetition(path):
    out = collapse(path)
    assert 0 not in out
    for i in range(len(path)):
        assert collapse(path[:i + 1] + path[i:]) == out


def test_alphabet():
    a = PhoneAlphabet(("b", "a1"))
    assert a.labels[0] == "<b>" and len(a) == 3
    assert a.encode(["a1", "b"]) == [2, 1]
    with pytest.raises(RangeError):
        a.encode(["<b>"])
    with pytest.raises(ConfigError):
        PhoneAlphabet(("b", "b"))


# -- edit distance ----------------------------------------------------------------


def brute_edit_distance(ref, hyp):
    """Shortest edit script found by breadth-first search over all intermediate strings."""
    alphabet = sorted(set(ref) | set(hyp)) or [0]
    start, goal = tuple(ref), tuple(hyp)
    frontier, seen, dist = {start}, {start}, 0
    max_len = max(len(ref), len(hyp))
    while goal not in frontier:
        nxt = set()
        for s in frontier:
            for i in range(len(s) + 1):
                if len(s) < max_len:
                    for c in alphabet:
                        nxt.add(s[:i] + (c,) + s[i:])
                if i < len(s):
                    nxt.add(s[:i] + s[i + 1:])
                    for c in alphabet:
                        nxt.add(s[:i] + (c,) + s[i + 1:])
        frontier = nxt - seen
        seen |= frontier
        dist += 1
    return dist


def test_edit_distance_examples():
    assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert edit_distance([1, 2, 3], [1, 5, 3]) == 1
    assert edit_distance([], [1, 2]) == 2


def test_edit_distance_matches_exhaustive_search():
    rng = np.random.default_rng(3)
    for _ in range(60):
        a = [int(x) for x in rng.integers(0, 3, size=rng.integers(0, 5))]
        b = [int(x) for x in rng.integers(0, 3, size=rng.integers(0, 5))]
        assert edit_distance(a, b) == brute_edit_distance(a, b)


def test_edit_distance_metric_properties():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a, b, c = ([int(x) for x in rng.integers(0, 4, size=rng.integers(0, 7))] for _ in range(3))
        assert edit_distance(a, b) == edit_distance(b, a)
        assert (edit_distance(a, b) == 0) == (a == b)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_per():
    assert per([[1, 2, 3], [4]], [[1, 2, 3], []]) == pytest.approx(0.25)
    with pytest.raises(UndefinedMetricError):
        per([], [])


def test_nan_input_gives_nan_loss():
    lp = log_softmax(np.zeros((4, 3)))
    lp[2, 1] = np.nan
    loss, grad = ctc_loss(lp, [1])
    assert np.isnan(loss) and np.all(np.isnan(grad))
