"""Prompt templates for the three interaction roles, cohesion rewriting, and RL rollouts.

Templates are plain text with ``<name>`` placeholders. Rendering is a single
pass, so placeholder-like text inside substituted values is left alone.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

TEMPLATE_VERSION = "v1"
TEMPLATE_NAMES = ("requester", "responder", "summarizer", "cohesion", "rl")
SPLIT_MARKER = "<split>"

_PLACEHOLDER = re.compile(r"<(question|info|Question|Reasoning)>")


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    return resources.files(__name__).joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8")


def fill(template: str, **values: str) -> str:
    def sub(m: re.Match) -> str:
        key = m.group(1)
        return values[key] if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


def render_requester(question: str, info: str) -> tuple[str, str]:
    """Instruction block and info block, split at the ``<split>`` marker."""
    head, _, tail = load_template("requester").partition(SPLIT_MARKER)
    return fill(head, question=question).rstrip() + "\n", fill(tail, info=info).strip("\n") + "\n"


def render_responder(question: str) -> str:
    return fill(load_template("responder"), question=question)


def render_summarizer(info: str, question: str) -> str:
    return fill(load_template("summarizer"), info=info, question=question)


def render_cohesion(question: str, reasoning: str) -> str:
    return fill(load_template("cohesion"), Question=question, Reasoning=reasoning)


def render_rl(question: str) -> str:
    return load_template("rl") + question
