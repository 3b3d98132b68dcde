"""Unpaired preference objective over exact-logprob policies.

Two evaluation routes exist on purpose: the ``kto_*`` functions go through
``policy.logprob`` one example at a time, while ``BatchTensors`` evaluates
the same loss and its analytic gradient in closed form for the toy softmax
policy. Tests compare the two.
"""

from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ActionError, CapabilityError, FormatError, OneSidedDatasetError, ParseError
from .grammar import extract_triplet
from .jsonl import read_jsonl, write_jsonl
from .metrics import StateVector
from .policy.base import ActContext, Policy
from .policy.toy import ToySoftmaxPolicy, masked_logprob, masked_logprob_grad

log = logging.getLogger(__name__)

REFLECTOR, ROLLOUT = "reflector", "rollout"
REFERENCE_MODES = ("initial", "iteration")


@dataclass(frozen=True)
class KtoConfig:
    beta: float = 0.1
    m: int = 4
    n: int = 6
    rho: float = 0.5
    learning_rate: float = 0.05
    steps_per_iteration: int = 200
    batch_size: Optional[int] = None  # None: full batch
    seed: int = 0
    # "initial": one frozen reference for the whole run; "iteration": the
    # reference is re-frozen from the current policy at each iteration start.
    reference_mode: str = "initial"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must be in (0, 1]")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.learning_rate < 0 or self.steps_per_iteration < 0:
            raise ValueError("learning_rate and steps_per_iteration must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"reference_mode must be one of {REFERENCE_MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "KtoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown KTO config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PreferenceExample:
    prompt: str
    completion: str
    label: bool  # True = desirable
    source: str
    step: int
    iteration: int
    state: Optional[StateVector] = None
    bounds: Optional[tuple[int, int]] = None

    def context(self) -> ActContext:
        if self.state is None or self.bounds is None:
            raise ValueError("example carries no policy context")
        return ActContext(self.state, self.bounds)

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "completion": self.completion,
            "label": self.label,
            "source": self.source,
            "step": self.step,
            "iteration": self.iteration,
            "state": None if self.state is None else self.state.to_dict(),
            "bounds": None if self.bounds is None else list(self.bounds),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PreferenceExample":
        label = rec["label"]
        if not isinstance(label, bool):
            raise ValueError(f"label must be true or false, got {label!r}")
        if rec["source"] not in (REFLECTOR, ROLLOUT):
            raise ValueError(f"unknown source {rec['source']!r}")
        state = rec.get("state")
        bounds = rec.get("bounds")
        return cls(str(rec["prompt"]), str(rec["completion"]), label, rec["source"], int(rec["step"]),
                   int(rec["iteration"]), None if state is None else StateVector.from_dict(state),
                   None if bounds is None else (int(bounds[0]), int(bounds[1])))


def export_dataset(dataset: Sequence[PreferenceExample], path: str | Path) -> None:
    write_jsonl(path, None, (ex.to_record() for ex in dataset))


def load_dataset(path: str | Path) -> list[PreferenceExample]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(PreferenceExample.from_record(rec))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"bad preference record: {exc!r}", lineno) from exc
    return out


# -- scalar route -------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def kto_weights(n_pos: int, n_neg: int) -> tuple[Fraction, Fraction]:
    """(weight of positives, weight of negatives), as exact fractions."""
    if n_pos < 1 or n_neg < 1:
        raise OneSidedDatasetError(n_pos, n_neg)
    top = max(n_pos, n_neg)
    return Fraction(top, n_pos), Fraction(top, n_neg)


def _require_exact(*policies: Policy) -> None:
    for p in policies:
        if not p.capabilities.has_exact_logprob:
            raise CapabilityError(f"{p.backend} backend has no exact log-probabilities")


def _reward(policy: Policy, reference: Policy, prompt: str, ctx: ActContext, completion: str) -> float:
    return policy.logprob(prompt, ctx, completion) - reference.logprob(prompt, ctx, completion)


def kto_reward(policy: Policy, reference: Policy, example: PreferenceExample) -> float:
    _require_exact(policy, reference)
    return _reward(policy, reference, example.prompt, example.context(), example.completion)


def representable(policy: Policy, ctx: ActContext, completion: str) -> bool:
    try:
        policy.logprob("", ctx, completion)
    except (ParseError, ActionError):
        return False
    return True


def mismatched_pairs(batch: Sequence[PreferenceExample], policy: Policy) -> list[tuple[int, int]]:
    """(prompt index, completion index) pairs from a cyclic shift by one.

    Pairs whose completion cannot be expressed under the other prompt's
    context are left out.
    """
    n = len(batch)
    pairs = []
    for i in range(n):
        j = (i + 1) % n
        if representable(policy, batch[i].context(), batch[j].completion):
            pairs.append((i, j))
    return pairs


def estimate_z0(policy: Policy, reference: Policy, batch: Sequence[PreferenceExample]) -> float:
    _require_exact(policy, reference)
    if len(batch) < 2:
        log.warning("batch of size %d: reference shift set to 0", len(batch))
        return 0.0
    pairs = mismatched_pairs(batch, reference)
    if not pairs:
        return 0.0
    total = sum(_reward(policy, reference, batch[i].prompt, batch[i].context(), batch[j].completion)
                for i, j in pairs)
    return max(0.0, total / len(pairs))


def kto_loss(policy: Policy, reference: Policy, batch: Sequence[PreferenceExample], config: KtoConfig,
             weights: tuple[float, float], z0: Optional[float] = None) -> tuple[float, list[float]]:
    """Batch-mean loss and the per-example values ``v``.

    ``z0`` defaults to the batch estimate; pass a number to hold it fixed.
    """
    _require_exact(policy, reference)
    if not batch:
        raise ValueError("empty batch")
    lam_d, lam_u = float(weights[0]), float(weights[1])
    z = estimate_z0(policy, reference, batch) if z0 is None else z0
    vs, losses = [], []
    for ex in batch:
        r = kto_reward(policy, reference, ex)
        if ex.label:
            v = lam_d * float(sigmoid(config.beta * (r - z)))
            losses.append(lam_d - v)
        else:
            v = lam_u * float(sigmoid(config.beta * (z - r)))
            losses.append(lam_u - v)
        vs.append(v)
    return sum(losses) / len(losses), vs


# -- closed-form route for the toy policy -------------------------------------

def completion_action(ex: PreferenceExample) -> Optional[int]:
    try:
        return extract_triplet(ex.completion, ex.bounds).action
    except (ParseError, ActionError):
        return None


def trainable(policy: ToySoftmaxPolicy, ex: PreferenceExample) -> bool:
    if ex.state is None or ex.bounds is None:
        return False
    a = completion_action(ex)
    return a is not None and a in policy.candidate_actions(ex.context())


@dataclass
class BatchTensors:
    """Features, action masks and reference terms of a fixed batch."""

    X: np.ndarray  # (n, F)
    M: np.ndarray  # (n, K) masks of each example's own completion
    sign: np.ndarray  # +1 positive, -1 negative
    lam: np.ndarray  # per-example class weight
    ref_lp: np.ndarray
    z_rows: np.ndarray  # prompt indices of mismatched pairs
    z_M: np.ndarray  # masks of the shifted completions under those prompts
    z_ref_lp: np.ndarray
    size: int = field(init=False)

    def __post_init__(self):
        self.size = len(self.sign)

    @classmethod
    def build(cls, policy: ToySoftmaxPolicy, reference: ToySoftmaxPolicy, batch: Sequence[PreferenceExample],
              weights: tuple[float, float]) -> "BatchTensors":
        X = np.array([policy.features(ex.state) for ex in batch])
        M = np.array([policy.action_mask(ex.context(), completion_action(ex)) for ex in batch])
        sign = np.array([1.0 if ex.label else -1.0 for ex in batch])
        lam = np.where(sign > 0, float(weights[0]), float(weights[1]))
        if len(batch) >= 2:
            pairs = mismatched_pairs(batch, reference)
        else:
            log.warning("batch of size %d: reference shift set to 0", len(batch))
            pairs = []
        rows = np.array([i for i, _ in pairs], dtype=int)
        zM = np.array([policy.action_mask(batch[i].context(), completion_action(batch[j])) for i, j in pairs])
        zM = zM.reshape(len(pairs), policy.K)
        ref_lp = _logp(reference.theta, X, M)
        z_ref = _logp(reference.theta, X[rows], zM) if len(pairs) else np.zeros(0)
        return cls(X, M, sign, lam, ref_lp, rows, zM, z_ref)

    def z0(self, theta: np.ndarray) -> float:
        if not len(self.z_rows):
            return 0.0
        r = _logp(theta, self.X[self.z_rows], self.z_M) - self.z_ref_lp
        return max(0.0, float(r.mean()))

    def rewards(self, theta: np.ndarray) -> np.ndarray:
        return _logp(theta, self.X, self.M) - self.ref_lp

    def loss_and_grad(self, theta: np.ndarray, beta: float, z0: Optional[float] = None):
        """Loss, gradient with ``z0`` held constant, rewards, and the ``z0`` used."""
        z = self.z0(theta) if z0 is None else z0
        S = self.X @ theta.T
        r = masked_logprob(S, self.M) - self.ref_lp
        s = sigmoid(beta * self.sign * (r - z))
        loss = float(np.mean(self.lam * (1.0 - s)))
        # d loss_i / d r_i = -lam_i * beta * sign_i * s_i * (1 - s_i)
        coef = -self.lam * beta * self.sign * s * (1.0 - s) / self.size
        G = masked_logprob_grad(S, self.M)
        grad = (coef[:, None] * G).T @ self.X
        return loss, grad, r, z


def _logp(theta: np.ndarray, X: np.ndarray, M: np.ndarray) -> np.ndarray:
    return masked_logprob(X @ theta.T, M)


def gradient_step(policy: ToySoftmaxPolicy, tensors: BatchTensors, config: KtoConfig) -> tuple[float, np.ndarray, float]:
    loss, grad, r, z = tensors.loss_and_grad(policy.theta, config.beta)
    if config.learning_rate:
        policy.theta = policy.theta - config.learning_rate * grad
    return loss, r, z

