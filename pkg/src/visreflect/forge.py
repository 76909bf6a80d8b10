"""Reasoning-data forging through LLM/VLM interaction.

Each round the LLM (requester) decides what it needs to see and asks the VLM
(responder) one question about the image; the LLM (summarizer) then tries to
answer from everything gathered so far. A wrong answer is thrown away and a
new round starts. A right answer on round 1 means the sample never had to go
back to the image, so it is rejected. Accepted samples get one LLM rewrite
pass that stitches the fragments into a single reasoning chain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Literal, Mapping, Sequence, Union

from . import prompts
from .gateway import ChatClient, ChatMessage, ChatRequest, GatewayError
from .rewards import answers_match, extract_boxed
from .trace import ReasoningSample, sample_to_jsonl

log = logging.getLogger(__name__)

Source = Literal["requester_thought", "responder_description", "summarizer_output"]

PREFIXES: dict[str, str] = {
    "requester_thought": "Analysis: ",
    "responder_description": "Visual information: ",
    "summarizer_output": "Conclusion: ",
}
GAP_MARKER = "..."
CONNECTORS = ("Let's double check", "Let's check the image again", "To sum up", "Wait")
PARSE_REMINDER = (
    "\n\nYour previous reply could not be parsed. Reply again and follow the required format exactly."
)

REJECTION_REASONS = (
    "non_reflection",
    "budget_exhausted",
    "transport",
    "cohesion_drift",
    "cohesion_parse",
    "cohesion_no_connector",
)


class RoundError(Exception):
    """A round produced no usable output; it still counts against the budget."""


class ForgeIOError(OSError):
    pass


@dataclass(frozen=True)
class ContextEntry:
    source: Source
    text: str


class ReasoningContext:
    """Append-only record of what the interaction has established so far."""

    def __init__(self) -> None:
        self._entries: list[ContextEntry] = []

    @property
    def entries(self) -> tuple[ContextEntry, ...]:
        return tuple(self._entries)

    def append(self, source: Source, text: str) -> None:
        if source not in PREFIXES:
            raise ValueError(f"unknown context source {source!r}")
        self._entries.append(ContextEntry(source, text.strip()))

    def __len__(self) -> int:
        return len(self._entries)

    def segments(self) -> list[str]:
        return [PREFIXES[e.source] + e.text for e in self._entries]

    def info(self) -> str:
        return "\n".join(self.segments())

    def gapped(self) -> str:
        return f"\n{GAP_MARKER}\n".join(self.segments())


@dataclass
class ForgeConfig:
    max_rounds: int = 4
    answer_match: str = "trim_casefold_period"
    temperatures: dict[str, float] = field(
        default_factory=lambda: {"requester": 0.7, "responder": 0.2, "summarizer": 0.7, "cohesion": 0.7}
    )
    max_tokens: int = 4096
    output_path: str | None = None
    concurrency: int = 4
    require_connector: bool = False

    def __post_init__(self) -> None:
        if self.max_rounds < 2:
            raise ValueError("max_rounds must be >= 2; single-round successes are always filtered")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.answer_match != "trim_casefold_period":
            raise ValueError(f"unknown answer_match rule {self.answer_match!r}")


@dataclass(frozen=True)
class Clients:
    llm: ChatClient
    vlm: ChatClient


@dataclass(frozen=True)
class Rejection:
    reason: str
    sample_id: str = ""
    detail: str = ""
    rounds: int = 0


@dataclass(frozen=True)
class VisualRequest:
    thought: str
    visual_question: str
    raw: str


@dataclass(frozen=True)
class Summary:
    thought: str
    final_answer: str
    raw: str


# --- reply parsing -------------------------------------------------------------

_THINK_BLOCK = re.compile(r"<think>.*?</think>", re.DOTALL)


def strip_think(text: str) -> str:
    """Drop reasoning-model ``<think>`` blocks (a dangling close tag drops everything before it)."""
    text = _THINK_BLOCK.sub("", text)
    if "</think>" in text:
        text = text.rsplit("</think>", 1)[1]
    return text.strip()


def parse_keyed_reply(text: str, first: str, second: str) -> tuple[str, str] | None:
    """Read ``{'first': '...', 'second': '...'}`` as the templates request.

    Models emit this half-JSON, half-Python shape with unescaped quotes and
    raw backslashes, so neither json nor ast parsing is reliable; the values
    are delimited by the key structure instead.
    """
    key = lambda k: rf"""['"]?{re.escape(k)}['"]?\s*:\s*"""
    pattern = (
        key(first)
        + r"""(?P<q1>['"])(?P<v1>.*?)(?P=q1)\s*,\s*"""
        + key(second)
        + r"""(?P<q2>['"])(?P<v2>.*)(?P=q2)\s*\}"""
    )
    m = re.search(pattern, strip_think(text), re.DOTALL | re.IGNORECASE)
    if not m:
        return None
    v1, v2 = m.group("v1").strip(), m.group("v2").strip()
    if not v1 or not v2:
        return None
    return v1, v2


_SUMMARY = re.compile(r"Thought\s*:\s*(?P<thought>.*?)\s*Final Answer\s*:\s*(?P<answer>.+)", re.DOTALL | re.IGNORECASE)


def parse_summary(text: str) -> tuple[str, str] | None:
    m = _SUMMARY.search(strip_think(text))
    if not m:
        return None
    thought = m.group("thought").strip()
    answer = m.group("answer").strip().strip("\"'“”").strip()
    boxed = extract_boxed(answer)
    if boxed is not None:
        answer = boxed.strip()
    if not answer:
        return None
    return thought, answer


# --- roles ---------------------------------------------------------------------


def _ask(client: ChatClient, messages: list[ChatMessage], temperature: float, max_tokens: int) -> str:
    req = ChatRequest(model=client.model, messages=tuple(messages), temperature=temperature, max_tokens=max_tokens)
    return client.complete(req).text


def _ask_parsed(client, build, parse, temperature, max_tokens, what):
    """Ask, and on an unparseable reply ask once more with a format reminder."""
    reply = _ask(client, build(""), temperature, max_tokens)
    parsed = parse(reply)
    if parsed is None:
        log.info("%s reply unparseable, reprompting", what)
        reply = _ask(client, build(PARSE_REMINDER), temperature, max_tokens)
        parsed = parse(reply)
    if parsed is None:
        raise RoundError(f"{what} reply unparseable after reprompt")
    return parsed, reply


def request_visual(
    context: ReasoningContext, question: str, llm: ChatClient, config: ForgeConfig | None = None
) -> VisualRequest:
    config = config or ForgeConfig()
    instructions, info_block = prompts.render_requester(question, context.info())

    def build(suffix: str) -> list[ChatMessage]:
        return [ChatMessage("system", instructions), ChatMessage("user", info_block + suffix)]

    (thought, visual_q), raw = _ask_parsed(
        llm,
        build,
        lambda r: parse_keyed_reply(r, "Thought", "Question"),
        config.temperatures["requester"],
        config.max_tokens,
        "requester",
    )
    context.append("requester_thought", thought)
    return VisualRequest(thought, visual_q, raw)


def respond_visual(visual_question: str, image_ref: str, vlm: ChatClient, config: ForgeConfig | None = None) -> str:
    config = config or ForgeConfig()
    text = _ask(
        vlm,
        [ChatMessage("user", prompts.render_responder(visual_question), image_ref=image_ref)],
        config.temperatures["responder"],
        config.max_tokens,
    ).strip()
    if not text:
        raise RoundError("responder returned an empty description")
    return text


def summarize(
    context: ReasoningContext, question: str, llm: ChatClient, config: ForgeConfig | None = None
) -> Summary:
    if not len(context):
        raise ValueError("cannot summarize an empty context")
    config = config or ForgeConfig()
    prompt = prompts.render_summarizer(context.info(), question)
    (thought, answer), raw = _ask_parsed(
        llm,
        lambda suffix: [ChatMessage("user", prompt + suffix)],
        parse_summary,
        config.temperatures["summarizer"],
        config.max_tokens,
        "summarizer",
    )
    return Summary(thought, answer, raw)


class CohesionRejected(Exception):
    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class CohesionResult:
    reasoning: str
    boxed_answer: str
    raw: str


def _parse_cohesion(reply: str) -> tuple[str, str] | None:
    pair = parse_keyed_reply(reply, "Thought", "Final answer")
    if pair is None:
        return None
    thought, final = pair
    boxed = extract_boxed(final)
    if boxed is None:
        return None
    return thought, boxed.strip()


def enhance_cohesion(
    context: ReasoningContext,
    question: str,
    llm: ChatClient,
    ground_truth: str,
    config: ForgeConfig | None = None,
) -> CohesionResult:
    """Rewrite the gapped context into one chain; reject if the boxed answer drifts."""
    config = config or ForgeConfig()
    if not context.entries or context.entries[-1].source != "summarizer_output":
        raise ValueError("cohesion needs a context that ends with an accepted summary")
    prompt = prompts.render_cohesion(question, context.gapped())
    try:
        (thought, boxed), raw = _ask_parsed(
            llm,
            lambda suffix: [ChatMessage("user", prompt + suffix)],
            _parse_cohesion,
            config.temperatures["cohesion"],
            config.max_tokens,
            "cohesion",
        )
    except RoundError as exc:
        raise CohesionRejected("cohesion_parse", str(exc)) from None
    if not answers_match(boxed, ground_truth):
        raise CohesionRejected("cohesion_drift", f"rewrite answered {boxed!r}, expected {ground_truth!r}")
    if config.require_connector and not any(c.lower() in thought.lower() for c in CONNECTORS):
        raise CohesionRejected("cohesion_no_connector", "rewrite uses none of the suggested connectors")
    reasoning = thought
    if extract_boxed(reasoning) is None:
        reasoning = f"{reasoning.rstrip()}\n\n\\boxed{{{boxed}}}"
    return CohesionResult(reasoning, boxed, raw)


# --- samples and batches -------------------------------------------------------------


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def task_id(question: str, image_ref: str, ground_truth: str) -> str:
    digest = hashlib.sha1("\x1f".join((question, image_ref, ground_truth)).encode("utf-8")).hexdigest()
    return f"task-{digest[:12]}"


def forge_sample(
    question: str,
    image_ref: str,
    ground_truth: str,
    clients: Clients,
    config: ForgeConfig | None = None,
    sample_id: str | None = None,
    clock: Callable[[], str] = utc_now,
) -> ReasoningSample | Rejection:
    config = config or ForgeConfig()
    sample_id = sample_id or task_id(question, image_ref, ground_truth)
    context = ReasoningContext()
    transcript: list[dict] = []
    started = clock()

    for k in range(1, config.max_rounds + 1):
        try:
            req = request_visual(context, question, clients.llm, config)
            transcript.append({"round": k, "role": "requester", "text": req.raw})
            desc = respond_visual(req.visual_question, image_ref, clients.vlm, config)
            context.append("responder_description", desc)
            transcript.append({"round": k, "role": "responder", "text": desc})
            summary = summarize(context, question, clients.llm, config)
        except RoundError as exc:
            log.info("%s round %d failed: %s", sample_id, k, exc)
            transcript.append({"round": k, "role": "round_error", "text": str(exc)})
            continue
        except GatewayError as exc:
            return Rejection("transport", sample_id, str(exc), k)

        if not answers_match(summary.final_answer, ground_truth):
            # the discarded text must not leak anywhere that gets persisted
            transcript.append({"round": k, "role": "summarizer", "discarded": True})
            continue
        if k == 1:
            return Rejection("non_reflection", sample_id, "correct after the first interaction", k)

        context.append("summarizer_output", f"{summary.thought}\nFinal Answer: {summary.final_answer}")
        transcript.append({"round": k, "role": "summarizer", "text": summary.raw})
        try:
            result = enhance_cohesion(context, question, clients.llm, ground_truth, config)
        except CohesionRejected as exc:
            return Rejection(exc.reason, sample_id, exc.detail, k)
        except GatewayError as exc:
            return Rejection("transport", sample_id, str(exc), k)
        transcript.append({"round": k, "role": "cohesion", "text": result.raw})
        return ReasoningSample(
            sample_id=sample_id,
            image_ref=image_ref,
            question=question,
            reasoning=result.reasoning,
            final_answer=result.boxed_answer,
            ground_truth=ground_truth,
            rounds=k,
            transcript=tuple(transcript),
            provenance={
                "llm_model": clients.llm.model,
                "vlm_model": clients.vlm.model,
                "template_version": prompts.TEMPLATE_VERSION,
                "started_at": started,
                "finished_at": clock(),
            },
        )
    return Rejection("budget_exhausted", sample_id, f"no correct answer in {config.max_rounds} rounds", config.max_rounds)


@dataclass(frozen=True)
class ForgeTask:
    question: str
    image: str
    answer: str
    id: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            object.__setattr__(self, "id", task_id(self.question, self.image, self.answer))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ForgeTask":
        for k in ("question", "image", "answer"):
            if not isinstance(doc.get(k), str):
                raise ValueError(f"task field {k!r} must be a string")
        return cls(doc["question"], doc["image"], doc["answer"], str(doc.get("id") or ""))

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "image": self.image, "answer": self.answer}


def read_tasks(lines: Iterable[str]) -> list[ForgeTask]:
    tasks = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            tasks.append(ForgeTask.from_dict(json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"tasks line {lineno}: {exc}") from None
    return tasks


@dataclass
class BatchReport:
    tasks: int
    samples: list[ReasoningSample]
    rejections: list[Rejection]

    @property
    def tally(self) -> dict[str, int]:
        return dict(sorted(Counter(r.reason for r in self.rejections).items()))

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "written": len(self.samples), "rejections": self.tally}


ClientSource = Union[Clients, Callable[[ForgeTask], Clients]]


class _Appender:
    def __init__(self, path: str | None):
        self.path = path
        self.written = 0
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")

    def write(self, sample: ReasoningSample) -> None:
        if self._fh is None:
            return
        with self._lock:
            self._fh.write(sample_to_jsonl(sample))
            self._fh.flush()
            self.written += 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def forge_batch(
    tasks: Sequence[ForgeTask],
    clients: ClientSource,
    config: ForgeConfig | None = None,
    clock: Callable[[], str] = utc_now,
) -> BatchReport:
    """Forge every task with bounded parallelism and append survivors to ``config.output_path``.

    Output rows follow task order regardless of completion order. On an I/O
    failure a ``<output>.partial`` marker is written next to the output and
    ForgeIOError is raised.
    """
    config = config or ForgeConfig()
    pick = clients if callable(clients) else (lambda _task: clients)

    def run(task: ForgeTask) -> ReasoningSample | Rejection:
        return forge_sample(task.question, task.image, task.answer, pick(task), config, task.id, clock)

    report = BatchReport(len(tasks), [], [])
    try:
        appender = _Appender(config.output_path)
    except OSError as exc:
        _mark_partial(config.output_path, 0, exc)
        raise ForgeIOError(f"cannot open output {config.output_path}: {exc}") from exc
    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            for outcome in pool.map(run, tasks):
                if isinstance(outcome, Rejection):
                    report.rejections.append(outcome)
                    continue
                try:
                    appender.write(outcome)
                except OSError as exc:
                    _mark_partial(config.output_path, appender.written, exc)
                    raise ForgeIOError(f"write to {config.output_path} failed: {exc}") from exc
                report.samples.append(outcome)
    finally:
        appender.close()
    return report


def _mark_partial(path: str | None, written: int, exc: Exception) -> None:
    if path is None:
        return
    try:
        Path(str(path) + ".partial").write_text(json.dumps({"written": written, "error": str(exc)}) + "\n")
    except OSError:
        log.error("could not write partial-output marker for %s", path)
