"""Synthetic attention traces whose metrics have closed forms.

The target value at position n (the visual attention of the last recorded
layer, and optionally the Hellinger distance of the step's distribution pair)
follows a decay profile. Weights are built so the mean over positive entries
hits the target exactly: positive entries come in pairs ``v + e`` and ``v - e``,
plus one entry of exactly ``v`` when the count is odd.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import GenerationError
from .trace import OTHER_ID, AttentionStep, AttentionTrace, DistributionPair, TokenPartition


@dataclass(frozen=True)
class DecayProfile:
    kind: Literal["constant", "exponential", "reflective"]
    initial: float
    rate: float = 0.0
    spike_positions: tuple[int, ...] = ()
    spike_height: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "exponential", "reflective"):
            raise GenerationError(f"unknown profile kind {self.kind!r}")
        if not 0.0 < self.initial <= 1.0:
            raise GenerationError("initial must be in (0, 1]")
        if self.rate < 0.0 or not math.isfinite(self.rate):
            raise GenerationError("rate must be a finite value >= 0")
        object.__setattr__(self, "spike_positions", tuple(sorted(set(self.spike_positions))))
        if self.kind == "reflective":
            if not 0.0 < self.spike_height <= 1.0:
                raise GenerationError("spike_height must be in (0, 1]")
            if any(p < 1 for p in self.spike_positions):
                raise GenerationError("spike positions are 1-based")

    @classmethod
    def exponential_to(cls, initial: float, at: int, fraction: float, **kw) -> "DecayProfile":
        """Exponential profile whose value at position ``at`` is ``fraction * initial``."""
        if not 0.0 < fraction <= 1.0 or at < 2:
            raise GenerationError("need 0 < fraction <= 1 and at >= 2")
        return cls(kw.pop("kind", "exponential"), initial, -math.log(fraction) / (at - 1), **kw)

    def value(self, n: int) -> float:
        if self.kind == "reflective" and n in self.spike_positions:
            return self.spike_height
        if self.kind == "constant":
            return self.initial
        return self.initial * math.exp(-self.rate * (n - 1))


def _symmetric_row(target: float, k: int, positive: np.ndarray, rng: np.random.Generator, spread: float) -> list[float]:
    row = [0.0] * k
    idx = list(positive)
    rng.shuffle(idx)
    room = spread * min(target, 1.0 - target)
    for a, b in zip(idx[0::2], idx[1::2]):
        e = float(rng.uniform(0.0, room))
        row[a], row[b] = target + e, target - e
    if len(idx) % 2:
        row[idx[-1]] = target
    return row


def _dist_pair(h: float, rng: np.random.Generator, vocab: int, other_mass: float) -> DistributionPair:
    """Two-point-plus-OTHER pair with Hellinger distance exactly ``h``.

    with = (1-m)[1, 0] + m OTHER, without = (1-m)[c, 1-c] + m OTHER gives
    H^2 = (1-m)(1 - sqrt(c)), solved for c.
    """
    m = min(other_mass, 1.0 - h * h)
    root_c = 1.0 - h * h / (1.0 - m) if m < 1.0 else 1.0
    c = root_c * root_c
    a, b = (int(x) for x in rng.choice(vocab, size=2, replace=False))
    keep = 1.0 - m
    return DistributionPair(
        support_ids=(a, b, OTHER_ID),
        with_visual=(keep, 0.0, m),
        without_visual=(keep * c, keep * (1.0 - c), m),
    )


def generate_trace(
    profile: DecayProfile,
    response_len: int,
    num_layers: int = 2,
    num_visual_tokens: int = 8,
    seed: int = 0,
    *,
    noise: float = 0.0,
    zero_fraction: float = 0.25,
    positions: list[int] | None = None,
    with_dist: bool = True,
    other_mass: float = 0.05,
    vocab_size: int = 151_000,
    sample_id: str | None = None,
    layer_ids: list[int] | None = None,
) -> AttentionTrace:
    """Build one trace. Without noise, last-layer attention at n equals ``profile.value(n)``.

    Lower layers carry the same shape scaled by ``(i + 1) / num_layers``.
    ``noise`` applies a symmetric multiplicative factor in ``[1 - noise, 1 + noise]``
    to the per-step target; clamps to [0, 1] are counted in ``metadata``.
    """
    if response_len < 1 or num_layers < 1 or num_visual_tokens < 1:
        raise GenerationError("dimensions must be positive")
    if not 0.0 <= noise < 1.0:
        raise GenerationError("noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    layer_ids = list(layer_ids) if layer_ids is not None else list(range(num_layers))
    if len(layer_ids) != num_layers:
        raise GenerationError("layer_ids must have num_layers entries")
    positions = list(range(1, response_len + 1)) if positions is None else sorted(set(positions))

    question_len = 16
    partition = TokenPartition(
        visual_span=(1, 1 + num_visual_tokens),
        question_span=(1 + num_visual_tokens, 1 + num_visual_tokens + question_len),
        response_start=1 + num_visual_tokens + question_len,
        response_len=response_len,
    )
    clamps = 0
    steps = []
    for n in positions:
        target = profile.value(n)
        if not 0.0 < target <= 1.0:
            raise GenerationError(f"profile value {target} at n={n} outside (0, 1]")
        if noise:
            target *= 1.0 + float(rng.uniform(-noise, noise))
            if target > 1.0:
                target, clamps = 1.0, clamps + 1
        n_pos = max(1, int(round(num_visual_tokens * (1.0 - zero_fraction))))
        positive = rng.choice(num_visual_tokens, size=n_pos, replace=False)
        rows = []
        for i in range(num_layers):
            scale = (i + 1) / num_layers
            rows.append(_symmetric_row(target * scale, num_visual_tokens, positive, rng, spread=0.9))
        dist = _dist_pair(target, rng, vocab_size, other_mass) if with_dist else None
        steps.append(AttentionStep(n=n, attn=tuple(tuple(r) for r in rows), dist_pair=dist))

    profile_doc = asdict(profile)
    profile_doc["spike_positions"] = list(profile.spike_positions)
    metadata = {
        "generator": "visreflect.synth",
        "profile": profile_doc,
        "seed": seed,
        "noise": noise,
        "clamp_events": clamps,
    }
    return AttentionTrace(
        sample_id=sample_id or f"synth-{seed}",
        layer_ids=tuple(layer_ids),
        partition=partition,
        steps=tuple(steps),
        metadata=metadata,
    )


@dataclass(frozen=True)
class LengthDistribution:
    """Uniform integer response lengths in [low, high]; ``low == high`` means fixed."""

    low: int
    high: int | None = None

    def __post_init__(self) -> None:
        if self.high is None:
            object.__setattr__(self, "high", self.low)
        if self.low < 1 or self.high < self.low:
            raise GenerationError("need 1 <= low <= high")

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class FleetSpec:
    num_layers: int = 2
    num_visual_tokens: int = 8
    noise: float = 0.0
    with_dist: bool = True
    extra: dict = field(default_factory=dict)


def generate_fleet(
    profile: DecayProfile,
    count: int,
    lengths: LengthDistribution | int,
    seed: int = 0,
    spec: FleetSpec = FleetSpec(),
) -> list[AttentionTrace]:
    if count < 1:
        raise GenerationError("count must be >= 1")
    if isinstance(lengths, int):
        lengths = LengthDistribution(lengths)
    children = np.random.SeedSequence(seed).spawn(count)
    fleet = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        length = lengths.draw(rng)
        trace_seed = int(rng.integers(0, 2**63 - 1))
        fleet.append(
            generate_trace(
                profile,
                length,
                spec.num_layers,
                spec.num_visual_tokens,
                trace_seed,
                noise=spec.noise,
                with_dist=spec.with_dist,
                sample_id=f"synth-{seed}-{i:05d}",
                **spec.extra,
            )
        )
    return fleet
