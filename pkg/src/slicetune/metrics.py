"""Per-step and windowed slice metrics, the observed state, and the utility score.

Everything here is a pure function; the utility is only used for baseline
comparison and oracle scoring, never as a training signal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

if TYPE_CHECKING:
    from .sim.feedback import FeedbackVector


@dataclass(frozen=True)
class UtilityWeights:
    alpha: float = 1.0
    p_reconf: float = 2.0
    p_qos: float = 5.0

    def __post_init__(self):
        if min(self.alpha, self.p_reconf, self.p_qos) < 0:
            raise ValueError("utility weights must be >= 0")


@dataclass(frozen=True)
class StepMetrics:
    se: float
    v: int
    c: int
    utility_term: float


@dataclass(frozen=True)
class WindowMetrics:
    mean_se: float
    total_violations: int
    total_reconfigs: int
    total_utility: float
    length: int


@dataclass(frozen=True)
class StateVector:
    prev_action: int
    se: float
    mu: float  # arrival throughput, bits/s
    delta: int  # queue increment, bytes (may be negative)
    epsilon: int  # dropped bytes

    def to_dict(self) -> dict:
        return {"prev_action": self.prev_action, "se": self.se, "mu": self.mu,
                "delta": self.delta, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "StateVector":
        return cls(int(d["prev_action"]), float(d["se"]), float(d["mu"]),
                   int(d["delta"]), int(d["epsilon"]))


def spectrum_efficiency(served_bits: float, tau: float, bandwidth: float) -> float:
    """Delivered bits per second per Hz of allocated bandwidth."""
    if tau <= 0 or bandwidth <= 0:
        raise ValueError("tau and bandwidth must be > 0")
    return (served_bits / tau) / bandwidth


def qos_violation(packet_delays: Iterable[float], threshold: float) -> int:
    """1 iff some packet delay strictly exceeds ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return int(any(d > threshold for d in packet_delays))


def reconfig_flag(b_t: int, b_prev: Optional[int]) -> int:
    return int(b_prev is not None and b_t != b_prev)


def reconfig_flags(allocations: Sequence[int]) -> list[int]:
    prev = None
    flags = []
    for b in allocations:
        flags.append(reconfig_flag(b, prev))
        prev = b
    return flags


def state_vector(feedback: Optional[FeedbackVector], prev_action: int) -> StateVector:
    if feedback is None:
        return StateVector(prev_action, 0.0, 0.0, 0, 0)
    return StateVector(
        prev_action=prev_action,
        se=feedback.se,
        mu=feedback.arrival_throughput,
        delta=feedback.queued_delta_bytes,
        epsilon=feedback.dropped_bytes,
    )


def utility_term(se: float, c: int, v: int, w: UtilityWeights) -> float:
    return w.alpha * se - c * w.p_reconf - v * w.p_qos


def step_metrics(feedback: FeedbackVector, w: UtilityWeights) -> StepMetrics:
    c, v = int(feedback.reconfigured), int(feedback.violated)
    return StepMetrics(feedback.se, v, c, utility_term(feedback.se, c, v, w))


def utility(metrics: Iterable[StepMetrics], w: UtilityWeights) -> float:
    return sum(utility_term(m.se, m.c, m.v, w) for m in metrics)


def aggregate_window(steps: Sequence[StepMetrics]) -> WindowMetrics:
    n = len(steps)
    return WindowMetrics(
        mean_se=sum(m.se for m in steps) / n if n else 0.0,
        total_violations=sum(m.v for m in steps),
        total_reconfigs=sum(m.c for m in steps),
        total_utility=sum(m.utility_term for m in steps),
        length=n,
    )


METRIC_COLUMNS = ("step", "se", "v", "c", "b_t", "utility_term")


def write_metrics(path: str | Path, steps: Sequence[StepMetrics], allocations: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for t, (m, b) in enumerate(zip(steps, allocations)):
            writer.writerow([t, repr(m.se), m.v, m.c, b, repr(m.utility_term)])


def read_metrics(path: str | Path) -> tuple[list[StepMetrics], list[int]]:
    steps, allocations = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(StepMetrics(float(row["se"]), int(row["v"]), int(row["c"]),
                                     float(row["utility_term"])))
            allocations.append(int(row["b_t"]))
    return steps, allocations
