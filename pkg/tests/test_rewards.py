import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import make_trace, random_trace, raw, visual_reward_bruteforce
from visreflect.errors import DegenerateAttention, DegenerateHalf, RewardInputError
from visreflect.rewards import (
    LAMBDA_F,
    LAMBDA_V,
    accuracy_reward,
    extract_boxed,
    format_reward,
    overall_reward,
    score_rollout,
    visual_attention_reward,
)
from visreflect.trace import AttentionStep, AttentionTrace


def test_default_coefficients():
    assert (LAMBDA_V, LAMBDA_F) == (0.5, 0.1)


@pytest.mark.parametrize(
    "response, gt, expected",
    [
        ("<think>...</think> so \\boxed{A}", "A", 1),
        ("answer: \\boxed{ b }", "B", 1),
        ("\\boxed{B.}", "b", 1),
        ("no box here, the answer is A", "A", 0),
        ("\\boxed{A} then \\boxed{C}", "C", 1),
        ("\\boxed{A} then \\boxed{C}", "A", 0),
        ("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}", 1),
        ("\\boxed{A", "A", 0),
    ],
)
def test_accuracy_reward(response, gt, expected):
    assert accuracy_reward(response, gt) == expected


def test_accuracy_requires_ground_truth():
    with pytest.raises(RewardInputError):
        accuracy_reward("\\boxed{A}", "  ")


def test_extract_boxed_skips_unterminated_tail():
    assert extract_boxed("\\boxed{A} and \\boxed{B") == "A"


@pytest.mark.parametrize(
    "response, expected",
    [
        ("<think>x</think> \\boxed{A}", 1),
        ("\\boxed{A}", 0),
        ("<think>x</think>", 0),
        ("<think>x</think><think>y</think> \\boxed{A}", 0),
        ("</think>x<think> \\boxed{A}", 0),
        ("<think>\\boxed{A}</think> done", 0),
        ("preamble <think>x</think>\nThe answer is \\boxed{C}.", 1),
    ],
)
def test_format_reward(response, expected):
    assert format_reward(response) == expected


# --- visual attention reward ------------------------------------------------------


def test_zero_accuracy_gives_zero():
    assert visual_attention_reward(make_trace([0.0, 0.0]), 0) == 0.0


def test_midpoint_excluded_flat_halves():
    # first half n=1 (0.4); n=2 is the midpoint; second half n=3,4 (0.2 + 0.2)
    assert visual_attention_reward(make_trace([0.4, 0.4, 0.2, 0.2]), 1) == pytest.approx(1.0, abs=1e-15)


def test_midpoint_excluded_decaying():
    assert visual_attention_reward(make_trace([0.4, 0.4, 0.1, 0.1]), 1) == pytest.approx(0.5, abs=1e-15)


def test_odd_length_has_no_midpoint():
    # n < 2.5: n=1,2 ; n > 2.5: n=3,4,5
    assert visual_attention_reward(make_trace([0.1, 0.3, 0.2, 0.2, 0.4]), 1) == pytest.approx(2.0)


def test_uses_last_layer_only():
    t = make_trace([0.4, 0.4, 0.1, 0.1], layers=3)
    assert visual_attention_reward(t, 1) == pytest.approx(0.5)


def test_degenerate_half():
    with pytest.raises(DegenerateHalf):
        visual_attention_reward(make_trace([0.4, 0.4, None, None]), 1)
    with pytest.raises(DegenerateHalf):
        visual_attention_reward(make_trace([None, 0.4, 0.3, 0.3]), 1)


def test_degenerate_attention_in_a_step():
    with pytest.raises(DegenerateAttention):
        visual_attention_reward(make_trace([0.0, 0.4, 0.3, 0.3]), 1)


def test_not_clamped_but_cap_available():
    t = make_trace([0.1, 0.1, 0.6, 0.6])
    assert visual_attention_reward(t, 1) == pytest.approx(12.0)
    assert visual_attention_reward(t, 1, cap=3.0) == 3.0


def _scaled(trace: AttentionTrace, c: float) -> AttentionTrace:
    steps = tuple(
        AttentionStep(s.n, tuple(tuple(w * c for w in row) for row in s.attn), s.dist_pair) for s in trace.steps
    )
    return AttentionTrace(trace.sample_id, trace.layer_ids, trace.partition, steps)


def _reward_trace(seed: int) -> AttentionTrace:
    rng = np.random.default_rng(seed)
    return random_trace(rng, min_len=4, max_len=50, zero_prob=0.2, dist_prob=0.0)


def _try_reward(trace):
    try:
        return visual_attention_reward(trace, 1)
    except (DegenerateHalf, DegenerateAttention):
        return None


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_bruteforce(seed):
    trace = _reward_trace(seed)
    expected = visual_reward_bruteforce(raw(trace), 1)
    got = _try_reward(trace)
    if expected is None:
        assert got is None
    else:
        assert got == pytest.approx(expected, rel=1e-12)
    assert visual_attention_reward(trace, 0) == visual_reward_bruteforce(raw(trace), 0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_scale_invariance(seed, c):
    trace = _reward_trace(seed)
    base = _try_reward(trace)
    if base is None:
        return
    assert _try_reward(_scaled(trace, c)) == pytest.approx(base, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 0.5))
def test_monotone_in_second_half(seed, bump):
    trace = _reward_trace(seed)
    base = _try_reward(trace)
    if base is None:
        return
    length = trace.partition.response_len
    late = [s for s in trace.steps if 2 * s.n > length]
    target = late[len(late) // 2]
    last_row = target.attn[-1]
    j = int(np.argmax(last_row))
    raised = list(last_row)
    raised[j] = min(1.0, raised[j] + bump)
    if raised[j] == last_row[j]:
        return
    steps = tuple(
        AttentionStep(s.n, s.attn[:-1] + (tuple(raised),), s.dist_pair) if s is target else s for s in trace.steps
    )
    bumped = AttentionTrace(trace.sample_id, trace.layer_ids, trace.partition, steps)
    assert _try_reward(bumped) > base


# --- overall reward -------------------------------------------------------------


@pytest.mark.parametrize(
    "args, r_o",
    [((1, 1.0, 1, 0.5, 0.1), 1.6), ((0, 0.0, 1, 0.5, 0.1), 0.1), ((1, 0.5, 0, 0.5, 0.1), 1.25)],
)
def test_overall_examples(args, r_o):
    assert overall_reward(*args).r_o == pytest.approx(r_o, abs=1e-15)


def test_overall_identity_on_grid():
    for r_a, r_f, r_v in itertools.product((0, 1), (0, 1), (0.0, 0.25, 1.0, 1.7, 12.5)):
        if r_a == 0 and r_v:
            continue
        b = overall_reward(r_a, r_v, r_f)
        assert b.r_o == r_a + 0.5 * r_v + 0.1 * r_f
        assert (b.lambda_v, b.lambda_f) == (0.5, 0.1)


def test_overall_is_affine_in_each_input():
    h = 0.25
    base = overall_reward(1, 1.0, 0)
    assert (overall_reward(1, 1.0 + h, 0).r_o - base.r_o) / h == pytest.approx(0.5)
    assert overall_reward(1, 1.0, 1).r_o - base.r_o == pytest.approx(0.1)
    assert overall_reward(1, 0.0, 0).r_o - overall_reward(0, 0.0, 0).r_o == pytest.approx(1.0)


@pytest.mark.parametrize(
    "args",
    [(2, 0.0, 0), (1, 0.0, 2), (1, -0.1, 1), (0, 0.3, 1), (1, float("nan"), 1), (1, 1.0, 1, float("inf"))],
)
def test_overall_rejects_bad_inputs(args):
    with pytest.raises(RewardInputError):
        overall_reward(*args)


# --- score_rollout ------------------------------------------------------------------


def constant_fixture():
    # halves hold equal step counts (n=1..4 and n=7..10), so constant attention gives r_v = 1
    return make_trace([0.3] * 4 + [None, None] + [0.3] * 4)


def test_full_constant_trace_has_unequal_halves():
    # n < 5 has 4 steps, n > 5 has 5, so r_v = 5/4 with every step recorded
    assert visual_attention_reward(make_trace([0.3] * 10), 1) == pytest.approx(1.25)


def test_score_correct_constant_attention():
    b = score_rollout("<think>look</think> \\boxed{A}", "A", constant_fixture())
    assert (b.r_a, b.r_f) == (1, 1)
    assert b.r_v == pytest.approx(1.0, abs=1e-15)
    assert b.r_o == pytest.approx(1.6, abs=1e-15)


@pytest.mark.parametrize("response", ["<think>x</think> \\boxed{B}", "\\boxed{B}"])
def test_score_incorrect(response):
    b = score_rollout(response, "A", make_trace([0.0] * 4))
    assert b.r_v == 0.0
    assert b.r_o in (0.0, 0.1)


def test_score_rising_attention_exceeds_one():
    values = [0.1] * 5 + [0.3] * 5
    b = score_rollout("<think>x</think> \\boxed{A}", "a", make_trace(values))
    # (5 * 0.3) / (4 * 0.1), midpoint n=5 excluded
    assert b.r_v == pytest.approx(3.75)
    assert b.r_o > 1.6
    assert b.r_o == 1 + 0.5 * b.r_v + 0.1


def test_score_propagates_degenerate_when_correct():
    with pytest.raises(DegenerateAttention):
        score_rollout("\\boxed{A}", "A", make_trace([0.0] * 4))
