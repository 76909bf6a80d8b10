"""Per-rollout GRPO rewards: accuracy, format, visual attention, and their weighted sum."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from .errors import DegenerateAttention, DegenerateHalf, RewardInputError
from .metrics import step_attention
from .trace import AttentionTrace

LAMBDA_V = 0.5
LAMBDA_F = 0.1

BOXED = "\\boxed{"


def extract_boxed(text: str) -> str | None:
    """Contents of the last ``\\boxed{...}`` span, with nested braces balanced."""
    start = text.rfind(BOXED)
    while start != -1:
        depth = 1
        i = start + len(BOXED)
        while i < len(text):
            c = text[i]
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    return text[start + len(BOXED) : i]
            i += 1
        # unterminated; fall back to an earlier complete span
        start = text.rfind(BOXED, 0, start)
    return None


def normalize_answer(answer: str) -> str:
    s = answer.strip().casefold()
    while s.endswith("."):
        s = s[:-1].rstrip()
    return s


def answers_match(candidate: str, ground_truth: str) -> bool:
    return normalize_answer(candidate) == normalize_answer(ground_truth)


def accuracy_reward(response: str, ground_truth: str) -> int:
    if not ground_truth.strip():
        raise RewardInputError("ground_truth must be non-empty")
    boxed = extract_boxed(response)
    if boxed is None:
        return 0
    return int(answers_match(boxed, ground_truth))


def format_reward(response: str) -> int:
    """1 iff there is exactly one ``<think>...</think>`` block and a boxed answer after it."""
    if response.count("<think>") != 1 or response.count("</think>") != 1:
        return 0
    open_at = response.index("<think>")
    close_at = response.index("</think>")
    if close_at < open_at:
        return 0
    tail = response[close_at + len("</think>") :]
    return int(extract_boxed(tail) is not None)


def visual_attention_reward(trace: AttentionTrace, r_a: int, cap: float | None = None) -> float:
    """Second-half over first-half sum of last-layer visual attention.

    Only recorded steps count. With an even response length the midpoint
    position belongs to neither half. The ratio is not clamped unless ``cap``
    is given.
    """
    if r_a not in (0, 1):
        raise RewardInputError(f"r_a must be 0 or 1, got {r_a!r}")
    if r_a == 0:
        return 0.0
    length = trace.partition.response_len
    last = [trace.num_layers_recorded - 1]
    early, late = [], []
    for step in trace.steps:
        # 2n vs length keeps the comparison with length / 2 exact
        if 2 * step.n < length:
            early.append(step_attention(step, last))
        elif 2 * step.n > length:
            late.append(step_attention(step, last))
    if not early or not late:
        which = "first" if not early else "second"
        raise DegenerateHalf(f"trace {trace.sample_id!r}: no recorded steps in the {which} half of {length} tokens")
    denom = math.fsum(early)
    if denom == 0.0:
        raise DegenerateAttention(f"trace {trace.sample_id!r}: first-half attention sums to zero")
    r_v = math.fsum(late) / denom
    if cap is not None:
        r_v = min(r_v, cap)
    return r_v


@dataclass(frozen=True)
class RewardBreakdown:
    r_a: int
    r_v: float
    r_f: int
    lambda_v: float
    lambda_f: float
    r_o: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False)


def overall_reward(
    r_a: int,
    r_v: float,
    r_f: int,
    lambda_v: float = LAMBDA_V,
    lambda_f: float = LAMBDA_F,
) -> RewardBreakdown:
    if r_a not in (0, 1) or isinstance(r_a, bool):
        raise RewardInputError(f"r_a must be 0 or 1, got {r_a!r}")
    if r_f not in (0, 1) or isinstance(r_f, bool):
        raise RewardInputError(f"r_f must be 0 or 1, got {r_f!r}")
    for name, value in (("r_v", r_v), ("lambda_v", lambda_v), ("lambda_f", lambda_f)):
        if not math.isfinite(value):
            raise RewardInputError(f"{name} must be finite")
    if r_v < 0:
        raise RewardInputError("r_v must be non-negative")
    if r_a == 0 and r_v != 0:
        raise RewardInputError("r_v must be 0 when r_a is 0")
    r_o = r_a + lambda_v * r_v + lambda_f * r_f
    return RewardBreakdown(int(r_a), float(r_v), int(r_f), float(lambda_v), float(lambda_f), r_o)


def score_rollout(
    response: str,
    ground_truth: str,
    trace: AttentionTrace,
    lambda_v: float = LAMBDA_V,
    lambda_f: float = LAMBDA_F,
    cap: float | None = None,
) -> RewardBreakdown:
    r_a = accuracy_reward(response, ground_truth)
    r_f = format_reward(response)
    r_v = visual_attention_reward(trace, r_a, cap=cap)
    return overall_reward(r_a, r_v, r_f, lambda_v, lambda_f)
