from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from ..errors import CapabilityError
from ..grammar import try_extract_action
from ..metrics import StateVector

EXACT, ESTIMATED = "exact", "estimated"


@dataclass(frozen=True)
class ActContext:
    """What a policy may look at besides the prompt text."""

    state: StateVector
    bounds: tuple[int, int]

    @property
    def prev_action(self) -> int:
        return self.state.prev_action


@dataclass(frozen=True)
class Capabilities:
    has_exact_logprob: bool
    supports_temperature: bool


def empirical_action_prob(outputs: Sequence[str], target: int, bounds: tuple[int, int]) -> float:
    """Fraction of outputs whose action parses and equals ``target``."""
    if not outputs:
        raise ValueError("need at least one sample")
    counts = Counter(try_extract_action(o, bounds) for o in outputs)
    return counts[target] / len(outputs)


class Policy:
    """Common surface of all actor backends."""

    backend = "abstract"
    capabilities = Capabilities(has_exact_logprob=False, supports_temperature=False)

    def act(self, prompt: str, context: ActContext) -> str:
        raise NotImplementedError

    def sample_k(self, prompt: str, context: ActContext, m: int) -> list[str]:
        if m < 1:
            raise ValueError("m must be >= 1")
        return [self.act(prompt, context) for _ in range(m)]

    def logprob(self, prompt: str, context: ActContext, output: str) -> float:
        raise CapabilityError(f"{self.backend} backend has no exact log-probabilities")

    def action_prob(self, prompt: str, context: ActContext, target_action: int, m: int = 8) -> tuple[float, str]:
        if m < 1:
            raise ValueError("m must be >= 1 for a sampling estimate")
        return empirical_action_prob(self.sample_k(prompt, context, m), target_action, context.bounds), ESTIMATED

    def snapshot(self) -> "Policy":
        raise CapabilityError(f"{self.backend} backend cannot be snapshotted")

    def reset_streams(self, seed: int) -> None:
        """Restart any internal sampling streams from ``seed``."""
