"""Differentiable softmax actor over relative allocation moves.

Only the action carries probability mass. The reflection and analysis text
is a deterministic template of the state and the chosen move, so the log
probability of an output is the log of the total softmax mass of the move
indices that land on its action after clamping.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ActionError, CapabilityError, FormatError
from ..grammar import extract_triplet, render_output
from ..metrics import StateVector
from .base import EXACT, ActContext, Capabilities, Policy

DEFAULT_DELTAS = (-2, -1, 0, 1, 2)
FEATURE_NAMES = ("bias", "prev_frac", "se_norm", "queue_sign", "pressure", "dropped")
N_FEATURES = len(FEATURE_NAMES)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-sum-exp, optionally over the entries where ``mask`` is 1."""
    s = scores if mask is None else np.where(mask > 0, scores, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(s - top).sum(axis=-1, keepdims=True)))[..., 0]


def masked_logprob(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """log of the softmax mass on ``mask``; rows must have a non-empty mask."""
    return logsumexp(scores, mask) - logsumexp(scores)


def masked_logprob_grad(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d masked_logprob / d scores, i.e. P(k | mask) - P(k)."""
    inside = np.where(mask > 0, np.exp(scores - logsumexp(scores, mask)[..., None]), 0.0)
    return inside - softmax(scores)


class ToySoftmaxPolicy(Policy):
    backend = "toy_softmax"
    capabilities = Capabilities(has_exact_logprob=True, supports_temperature=True)

    def __init__(self, total_prbs: int, theta: np.ndarray | None = None, *,
                 deltas: Sequence[int] = DEFAULT_DELTAS, prb_bandwidth: float = 180e3,
                 efficiency_cap: float = 5.5547, act_temperature: float = 0.0,
                 rollout_temperature: float = 1.0, seed: int = 0):
        if min(act_temperature, rollout_temperature) < 0:
            raise ValueError("temperatures must be >= 0")
        self.deltas = tuple(int(d) for d in deltas)
        if len(set(self.deltas)) != len(self.deltas):
            raise ValueError("deltas must be distinct")
        self.total_prbs = int(total_prbs)
        self.prb_bandwidth = float(prb_bandwidth)
        self.efficiency_cap = float(efficiency_cap)
        self.act_temperature = float(act_temperature)
        self.rollout_temperature = float(rollout_temperature)
        self._frozen = False
        self.theta = np.zeros((len(self.deltas), N_FEATURES)) if theta is None else theta
        self.seed = seed
        self.reset_streams(seed)

    @classmethod
    def for_config(cls, config, **kwargs) -> "ToySoftmaxPolicy":
        return cls(config.total_prbs, prb_bandwidth=config.prb_bandwidth,
                   efficiency_cap=config.radio.efficiency_cap, **kwargs)

    # -- parameters ---------------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @theta.setter
    def theta(self, value) -> None:
        if self._frozen:
            raise CapabilityError("snapshot policies are immutable")
        arr = np.array(value, dtype=float)
        if arr.shape != (len(self.deltas), N_FEATURES):
            raise ValueError(f"theta must have shape {(len(self.deltas), N_FEATURES)}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("theta must be finite")
        self._theta = arr

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def K(self) -> int:
        return len(self.deltas)

    def reset_streams(self, seed: int) -> None:
        base = np.random.SeedSequence(seed)
        act_ss, roll_ss = base.spawn(2)
        self._act_rng = np.random.default_rng(act_ss)
        self._roll_rng = np.random.default_rng(roll_ss)

    # -- model --------------------------------------------------------------

    def features(self, state: StateVector) -> np.ndarray:
        served_tput = state.se * state.prev_action * self.prb_bandwidth
        total = state.mu + served_tput
        pressure = state.mu / total if total > 0 else 0.0
        return np.array([
            1.0,
            state.prev_action / self.total_prbs,
            state.se / self.efficiency_cap,
            float(np.sign(state.delta)),
            pressure,
            1.0 if state.epsilon > 0 else 0.0,
        ])

    def candidate_actions(self, context: ActContext) -> list[int]:
        lo, hi = context.bounds
        return [min(hi, max(lo, context.prev_action + d)) for d in self.deltas]

    def index_probs(self, context: ActContext, temperature: float = 1.0) -> np.ndarray:
        scores = self._theta @ self.features(context.state)
        if temperature == 0:
            out = np.zeros(self.K)
            out[int(np.argmax(scores))] = 1.0
            return out
        return softmax(scores / temperature)

    def action_distribution(self, context: ActContext, temperature: float = 1.0) -> dict[int, float]:
        """Probability per absolute action; clamped duplicates share their mass."""
        dist: dict[int, float] = {}
        for a, p in zip(self.candidate_actions(context), self.index_probs(context, temperature)):
            dist[a] = dist.get(a, 0.0) + float(p)
        return dist

    def render(self, context: ActContext, index: int) -> str:
        s = context.state
        action = self.candidate_actions(context)[index]
        reflection = f"last interval at {s.prev_action} PRBs gave SE {s.se:.4f}, queue change {s.delta} B"
        analysis = f"move {self.deltas[index]:+d} to {action} PRBs"
        return render_output(reflection, action, analysis)

    def _sample_index(self, context: ActContext, temperature: float, rng: np.random.Generator) -> int:
        if temperature == 0:
            return int(np.argmax(self._theta @ self.features(context.state)))
        p = self.index_probs(context, temperature)
        return int(rng.choice(self.K, p=p))

    # -- policy surface -----------------------------------------------------

    def act(self, prompt: str, context: ActContext) -> str:
        return self.render(context, self._sample_index(context, self.act_temperature, self._act_rng))

    def sample_k(self, prompt: str, context: ActContext, m: int) -> list[str]:
        if m < 1:
            raise ValueError("m must be >= 1")
        return [self.render(context, self._sample_index(context, self.rollout_temperature, self._roll_rng))
                for _ in range(m)]

    def action_mask(self, context: ActContext, action: int) -> np.ndarray:
        return np.array([a == action for a in self.candidate_actions(context)], dtype=float)

    def logprob(self, prompt: str, context: ActContext, output: str) -> float:
        action = extract_triplet(output, context.bounds).action
        mask = self.action_mask(context, action)
        if not mask.any():
            raise ActionError(f"action {action} is not reachable from {context.prev_action}")
        return float(masked_logprob(self._theta @ self.features(context.state), mask))

    def logprob_grad(self, context: ActContext, action: int) -> np.ndarray:
        """d log p(action) / d theta at temperature 1."""
        x = self.features(context.state)
        mask = self.action_mask(context, action)
        if not mask.any():
            raise ActionError(f"action {action} is not reachable from {context.prev_action}")
        return np.outer(masked_logprob_grad(self._theta @ x, mask), x)

    def action_prob(self, prompt: str, context: ActContext, target_action: int, m: int = 0) -> tuple[float, str]:
        return self.action_distribution(context, 1.0).get(target_action, 0.0), EXACT

    def snapshot(self) -> "ToySoftmaxPolicy":
        twin = self.copy()
        twin._theta.setflags(write=False)
        twin._frozen = True
        return twin

    def copy(self) -> "ToySoftmaxPolicy":
        return ToySoftmaxPolicy(self.total_prbs, self._theta.copy(), deltas=self.deltas,
                                prb_bandwidth=self.prb_bandwidth, efficiency_cap=self.efficiency_cap,
                                act_temperature=self.act_temperature,
                                rollout_temperature=self.rollout_temperature, seed=self.seed)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "total_prbs": self.total_prbs,
            "deltas": list(self.deltas),
            "features": list(FEATURE_NAMES),
            "prb_bandwidth": self.prb_bandwidth,
            "efficiency_cap": self.efficiency_cap,
            "act_temperature": self.act_temperature,
            "rollout_temperature": self.rollout_temperature,
            "seed": self.seed,
            "theta": self._theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToySoftmaxPolicy":
        if d.get("backend") != cls.backend:
            raise FormatError(f"not a toy policy file (backend={d.get('backend')!r})")
        try:
            return cls(d["total_prbs"], np.array(d["theta"], dtype=float), deltas=d["deltas"],
                       prb_bandwidth=d["prb_bandwidth"], efficiency_cap=d["efficiency_cap"],
                       act_temperature=d["act_temperature"], rollout_temperature=d["rollout_temperature"],
                       seed=d["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad toy policy file: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ToySoftmaxPolicy":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc), exc.lineno) from exc
        return cls.from_dict(data)
