from __future__ import annotations

from typing import Callable, Sequence, Union

from ..grammar import render_output
from .base import ActContext, Capabilities, Policy

Rule = Callable[[str, ActContext], Union[int, str]]

MALFORMED_OUTPUT = "I would rather not answer in the requested format."


class ScriptedPolicy(Policy):
    """Deterministic rule-based actor.

    ``rule`` is one of ``"hold"``, ``"constant"`` (needs ``value``),
    ``"cycle"`` (needs ``values``), ``"malformed"``, or a callable
    ``(prompt, context) -> int | str``. Strings are returned verbatim.
    """

    backend = "scripted"
    capabilities = Capabilities(has_exact_logprob=False, supports_temperature=False)

    def __init__(self, rule: Union[str, Rule] = "hold", value: int | None = None,
                 values: Sequence[int] | None = None):
        if isinstance(rule, str):
            if rule == "constant" and value is None:
                raise ValueError("constant rule needs a value")
            if rule == "cycle" and not values:
                raise ValueError("cycle rule needs values")
            if rule not in ("hold", "constant", "cycle", "malformed"):
                raise ValueError(f"unknown scripted rule {rule!r}")
        self.rule = rule
        self.value = value
        self.values = list(values or ())
        self._calls = 0

    def describe(self) -> dict:
        name = self.rule if isinstance(self.rule, str) else "callable"
        return {"backend": self.backend, "rule": name, "value": self.value, "values": self.values}

    def _decide(self, prompt: str, context: ActContext) -> Union[int, str]:
        rule = self.rule
        if callable(rule):
            return rule(prompt, context)
        if rule == "hold":
            return context.prev_action
        if rule == "constant":
            return self.value
        if rule == "cycle":
            return self.values[self._calls % len(self.values)]
        return MALFORMED_OUTPUT

    def act(self, prompt: str, context: ActContext) -> str:
        out = self._decide(prompt, context)
        self._calls += 1
        if isinstance(out, str):
            return out
        return render_output(f"scripted rule {self.describe()['rule']}", int(out), "rule-based decision")

    def reset_streams(self, seed: int) -> None:
        self._calls = 0
