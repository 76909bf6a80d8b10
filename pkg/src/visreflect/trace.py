"""Attention trace data model and its JSON file format.

A trace records, for one generation, which token positions hold the image and
the question, how long the response was, and for a (possibly sparse) set of
response positions the head-averaged attention of that token to every visual
token in each recorded layer. Steps may also carry a truncated pair of
next-token distributions, computed with and without the visual tokens.

Every constructor validates its invariants, so a value of any of these types
is always well formed. ``read_trace`` never returns a partially built trace.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Iterable, Mapping, Union

from .errors import TraceParseError, TraceValidationError

OTHER_ID = -1
"""Reserved support id for the bucket holding all truncated probability mass."""

PROB_SUM_TOL = 1e-6


def _real(value: Any, field_name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TraceValidationError(field_name, "expected a number")
    value = float(value)
    if not math.isfinite(value):
        raise TraceValidationError(field_name, "expected a finite number")
    return value


def _int(value: Any, field_name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceValidationError(field_name, "expected an integer")
    return value


def _span(value: Any, field_name: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise TraceValidationError(field_name, "expected [start, end]")
    start, end = _int(value[0], field_name), _int(value[1], field_name)
    if start < 0 or end < 0:
        raise TraceValidationError(field_name, "span indices must be non-negative")
    if start > end:
        raise TraceValidationError(field_name, "span start must not exceed end")
    return start, end


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < a[1] and b[0] < b[1] and a[0] < b[1] and b[0] < a[1]


@dataclass(frozen=True)
class TokenPartition:
    """Half-open index spans of the visual and question tokens, plus the response extent."""

    visual_span: tuple[int, int]
    question_span: tuple[int, int]
    response_start: int
    response_len: int

    def __post_init__(self) -> None:
        visual = _span(self.visual_span, "partition.visual_span")
        question = _span(self.question_span, "partition.question_span")
        start = _int(self.response_start, "partition.response_start")
        length = _int(self.response_len, "partition.response_len")
        object.__setattr__(self, "visual_span", visual)
        object.__setattr__(self, "question_span", question)
        if start < 0:
            raise TraceValidationError("partition.response_start", "must be non-negative")
        if length < 1:
            raise TraceValidationError("partition.response_len", "must be >= 1")
        if _overlaps(visual, question):
            raise TraceValidationError("partition", "visual_span and question_span overlap")
        if visual[1] > start:
            raise TraceValidationError("partition.visual_span", "must end at or before response_start")
        if question[1] > start:
            raise TraceValidationError("partition.question_span", "must end at or before response_start")

    @property
    def num_visual(self) -> int:
        return self.visual_span[1] - self.visual_span[0]


@dataclass(frozen=True)
class DistributionPair:
    """Truncated next-token distributions over a shared support, with and without the image.

    ``support_ids`` is the union of the top-K ids from each side plus ``OTHER_ID``,
    whose coordinate absorbs the truncated mass so both vectors sum to one.
    """

    support_ids: tuple[int, ...]
    with_visual: tuple[float, ...]
    without_visual: tuple[float, ...]

    def __post_init__(self) -> None:
        where = "dist_pair"
        ids = tuple(_int(i, f"{where}.support_ids") for i in self.support_ids)
        if len(set(ids)) != len(ids):
            raise TraceValidationError(f"{where}.support_ids", "ids must be unique")
        if ids.count(OTHER_ID) != 1:
            raise TraceValidationError(f"{where}.support_ids", f"OTHER id {OTHER_ID} must appear exactly once")
        object.__setattr__(self, "support_ids", ids)
        for name in ("with_visual", "without_visual"):
            probs = tuple(_real(p, f"{where}.{name}") for p in getattr(self, name))
            if len(probs) != len(ids):
                raise TraceValidationError(f"{where}.{name}", "length must match support_ids")
            if any(p < 0.0 for p in probs):
                raise TraceValidationError(f"{where}.{name}", "probabilities must be non-negative")
            if abs(math.fsum(probs) - 1.0) > PROB_SUM_TOL:
                raise TraceValidationError(f"{where}.{name}", "probabilities must sum to 1 within 1e-6")
            object.__setattr__(self, name, probs)

    @property
    def other_index(self) -> int:
        return self.support_ids.index(OTHER_ID)


@dataclass(frozen=True)
class AttentionStep:
    """One response position: per recorded layer, attention to each visual token."""

    n: int
    attn: tuple[tuple[float, ...], ...]
    dist_pair: DistributionPair | None = None

    def __post_init__(self) -> None:
        n = _int(self.n, "step.n")
        if n < 1:
            raise TraceValidationError("step.n", "response positions are 1-based")
        if not isinstance(self.attn, (list, tuple)):
            raise TraceValidationError("step.attn", "expected a list of per-layer vectors")
        rows = []
        for i, row in enumerate(self.attn):
            if not isinstance(row, (list, tuple)):
                raise TraceValidationError(f"step.attn[{i}]", "expected a list of weights")
            values = tuple(_real(w, f"step.attn[{i}]") for w in row)
            if any(w < 0.0 or w > 1.0 for w in values):
                raise TraceValidationError(f"step.attn[{i}]", "weight out of [0,1]")
            rows.append(values)
        if self.dist_pair is not None and not isinstance(self.dist_pair, DistributionPair):
            raise TraceValidationError("step.dist_pair", "expected a DistributionPair or null")
        object.__setattr__(self, "attn", tuple(rows))


@dataclass(frozen=True)
class AttentionTrace:
    """All recorded steps of one generation.

    ``metadata`` is free-form JSON (generator parameters, capture notes). It is
    carried through read/write untouched and takes no part in any metric.
    """

    sample_id: str
    layer_ids: tuple[int, ...]
    partition: TokenPartition
    steps: tuple[AttentionStep, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.sample_id, str):
            raise TraceValidationError("sample_id", "expected a string")
        layer_ids = tuple(_int(i, "layer_ids") for i in self.layer_ids)
        if not layer_ids:
            raise TraceValidationError("layer_ids", "at least one layer must be recorded")
        if any(b <= a for a, b in zip(layer_ids, layer_ids[1:])):
            raise TraceValidationError("layer_ids", "layer ids not strictly increasing")
        object.__setattr__(self, "layer_ids", layer_ids)
        if not isinstance(self.partition, TokenPartition):
            raise TraceValidationError("partition", "expected a TokenPartition")
        if not isinstance(self.metadata, dict):
            raise TraceValidationError("metadata", "expected an object")
        steps = tuple(self.steps)
        num_visual = self.partition.num_visual
        prev = 0
        for i, step in enumerate(steps):
            if not isinstance(step, AttentionStep):
                raise TraceValidationError(f"steps[{i}]", "expected an AttentionStep")
            if step.n <= prev:
                raise TraceValidationError(f"steps[{i}].n", "steps not strictly increasing")
            if step.n > self.partition.response_len:
                raise TraceValidationError(f"steps[{i}].n", "position exceeds response_len")
            if len(step.attn) != len(layer_ids):
                raise TraceValidationError(f"steps[{i}].attn", "one vector per recorded layer required")
            for j, row in enumerate(step.attn):
                if len(row) != num_visual:
                    raise TraceValidationError(f"steps[{i}].attn[{j}]", "length must equal the visual span size")
            prev = step.n
        object.__setattr__(self, "steps", steps)

    @property
    def num_layers_recorded(self) -> int:
        return len(self.layer_ids)

    @property
    def response_len(self) -> int:
        return self.partition.response_len

    @property
    def last_layer(self) -> int:
        return self.layer_ids[-1]

    def layer_index(self, layer_id: int) -> int:
        try:
            return self.layer_ids.index(layer_id)
        except ValueError:
            raise TraceValidationError("layers", f"layer {layer_id} not recorded in trace {self.sample_id!r}") from None

    def step_at(self, n: int) -> AttentionStep | None:
        # steps are sorted by n; traces are small enough that bisect is not worth a cache
        lo, hi = 0, len(self.steps)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.steps[mid].n < n:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(self.steps) and self.steps[lo].n == n:
            return self.steps[lo]
        return None


# --- JSON mapping ---------------------------------------------------------


def _require(doc: Mapping, key: str, where: str) -> Any:
    if key not in doc:
        raise TraceValidationError(f"{where}{key}", "missing required field")
    return doc[key]


def _as_list(value: Any, field_name: str) -> list:
    if not isinstance(value, list):
        raise TraceValidationError(field_name, "expected a list")
    return value


def _dist_from_dict(doc: Any, where: str) -> DistributionPair | None:
    if doc is None:
        return None
    if not isinstance(doc, dict):
        raise TraceValidationError(where, "expected an object or null")
    try:
        return DistributionPair(
            support_ids=tuple(_as_list(_require(doc, "support_ids", where + "."), where + ".support_ids")),
            with_visual=tuple(_as_list(_require(doc, "with_visual", where + "."), where + ".with_visual")),
            without_visual=tuple(_as_list(_require(doc, "without_visual", where + "."), where + ".without_visual")),
        )
    except TraceValidationError as exc:
        if exc.field.startswith("dist_pair"):
            raise TraceValidationError(where + exc.field[len("dist_pair"):], exc.constraint) from None
        raise


def trace_from_dict(doc: Any) -> AttentionTrace:
    """Build a validated trace from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise TraceValidationError("<root>", "expected a JSON object")
    part = _require(doc, "partition", "")
    if not isinstance(part, dict):
        raise TraceValidationError("partition", "expected an object")
    partition = TokenPartition(
        visual_span=_require(part, "visual_span", "partition."),
        question_span=_require(part, "question_span", "partition."),
        response_start=_require(part, "response_start", "partition."),
        response_len=_require(part, "response_len", "partition."),
    )
    steps = []
    for i, raw in enumerate(_as_list(_require(doc, "steps", ""), "steps")):
        where = f"steps[{i}]"
        if not isinstance(raw, dict):
            raise TraceValidationError(where, "expected an object")
        try:
            step = AttentionStep(
                n=_require(raw, "n", where + "."),
                attn=_as_list(_require(raw, "attn", where + "."), where + ".attn"),
                dist_pair=_dist_from_dict(raw.get("dist_pair"), where + ".dist_pair"),
            )
        except TraceValidationError as exc:
            if exc.field.startswith("step."):
                raise TraceValidationError(where + exc.field[4:], exc.constraint) from None
            raise
        steps.append(step)
    metadata = doc.get("metadata", {})
    return AttentionTrace(
        sample_id=_require(doc, "sample_id", ""),
        layer_ids=tuple(_as_list(_require(doc, "layer_ids", ""), "layer_ids")),
        partition=partition,
        steps=tuple(steps),
        metadata=metadata if metadata is not None else {},
    )


def trace_to_dict(trace: AttentionTrace) -> dict:
    p = trace.partition
    doc = {
        "sample_id": trace.sample_id,
        "layer_ids": list(trace.layer_ids),
        "partition": {
            "visual_span": list(p.visual_span),
            "question_span": list(p.question_span),
            "response_start": p.response_start,
            "response_len": p.response_len,
        },
        "steps": [
            {
                "n": s.n,
                "attn": [list(row) for row in s.attn],
                "dist_pair": None
                if s.dist_pair is None
                else {
                    "support_ids": list(s.dist_pair.support_ids),
                    "with_visual": list(s.dist_pair.with_visual),
                    "without_visual": list(s.dist_pair.without_visual),
                },
            }
            for s in trace.steps
        ],
    }
    if trace.metadata:
        doc["metadata"] = trace.metadata
    return doc


Source = Union[bytes, bytearray, str, BinaryIO]


def read_trace(source: Source) -> AttentionTrace:
    """Parse and validate one trace document.

    Raises TraceParseError (with a byte offset) on malformed JSON and
    TraceValidationError (naming the field) on any invariant violation.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise TraceParseError(f"malformed JSON: {exc.msg}", offset) from None
    return trace_from_dict(doc)


def write_trace(trace: AttentionTrace) -> bytes:
    """Serialize a trace; ``read_trace(write_trace(t)) == t`` holds exactly.

    Floats are written with Python's shortest round-trip repr, which decodes
    to the identical double.
    """
    return json.dumps(trace_to_dict(trace), allow_nan=False, sort_keys=False).encode("utf-8")


def iter_traces(paths: Iterable[str]) -> Iterable[tuple[str, AttentionTrace]]:
    for path in paths:
        with open(path, "rb") as fh:
            yield path, read_trace(fh)


# --- forged samples ---------------------------------------------------------


@dataclass(frozen=True)
class ReasoningSample:
    """One forged training record, persisted as a JSON Lines row."""

    sample_id: str
    image_ref: str
    question: str
    reasoning: str
    final_answer: str
    ground_truth: str
    rounds: int
    transcript: tuple[dict, ...]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_ref": self.image_ref,
            "question": self.question,
            "reasoning": self.reasoning,
            "final_answer": self.final_answer,
            "ground_truth": self.ground_truth,
            "rounds": self.rounds,
            "transcript": list(self.transcript),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ReasoningSample":
        return cls(
            sample_id=doc["sample_id"],
            image_ref=doc["image_ref"],
            question=doc["question"],
            reasoning=doc["reasoning"],
            final_answer=doc["final_answer"],
            ground_truth=doc["ground_truth"],
            rounds=doc["rounds"],
            transcript=tuple(doc["transcript"]),
            provenance=dict(doc["provenance"]),
        )


def sample_to_jsonl(sample: ReasoningSample) -> str:
    return json.dumps(sample.to_dict(), ensure_ascii=False) + "\n"


def read_samples(lines: Iterable[str] | io.TextIOBase) -> list[ReasoningSample]:
    return [ReasoningSample.from_dict(json.loads(line)) for line in lines if line.strip()]

