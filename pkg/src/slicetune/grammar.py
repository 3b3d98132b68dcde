"""Actor output grammar: ``<reflection>..</reflection> <action>INT</action> <analysis>..</analysis>``."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ActionError, ParseError

TAGS = ("reflection", "action", "analysis")
_INT = re.compile(r"[+-]?\d+")


@dataclass(frozen=True)
class ActorTriplet:
    reflection: str
    action: int
    analysis: str


def render_output(reflection: str, action: int, analysis: str) -> str:
    return (
        f"<reflection>{reflection}</reflection>\n"
        f"<action>{action}</action>\n"
        f"<analysis>{analysis}</analysis>"
    )


def _single(raw: str, tag: str) -> str:
    opens = raw.count(f"<{tag}>")
    closes = raw.count(f"</{tag}>")
    if opens == 0 and closes == 0:
        raise ParseError(f"missing <{tag}> tag")
    if opens != 1 or closes != 1:
        raise ParseError(f"expected exactly one <{tag}>...</{tag}> pair, found {opens}/{closes}")
    m = re.search(rf"<{tag}>(.*?)</{tag}>", raw, flags=re.DOTALL)
    if m is None:
        raise ParseError(f"<{tag}> is not closed")
    return m.group(1).strip()


def parse_action(text: str, bounds: tuple[int, int]) -> int:
    text = text.strip()
    if not _INT.fullmatch(text):
        raise ActionError(f"action {text!r} is not an integer")
    action = int(text)
    lo, hi = bounds
    if not lo <= action <= hi:
        raise ActionError(f"action {action} outside [{lo}, {hi}]")
    return action


def extract_triplet(raw: str, bounds: tuple[int, int]) -> ActorTriplet:
    """Parse one actor output. Out-of-range actions are errors, never clamped."""
    if not isinstance(raw, str):
        raise ParseError("output is not text")
    reflection, action_text, analysis = (_single(raw, t) for t in TAGS)
    return ActorTriplet(reflection, parse_action(action_text, bounds), analysis)


def try_extract_action(raw: str, bounds: tuple[int, int]) -> int | None:
    try:
        return extract_triplet(raw, bounds).action
    except (ParseError, ActionError):
        return None
