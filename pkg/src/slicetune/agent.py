"""Actor interaction loop: prompt from a bounded history, act, parse, step, record."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import ActionError, EndpointError, FormatError, ParseError, TrajectoryAborted, TransportError
from .grammar import extract_triplet
from .jsonl import read_with_header, write_jsonl
from .metrics import StateVector, state_vector
from .policy.base import ActContext, Policy
from .sim.config import SimConfig
from .sim.env import SimEnv
from .sim.feedback import FeedbackVector

log = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "slicetune-trajectory"
FORMAT_VERSION = 1
DEFAULT_WINDOW = 8
DEFAULT_RETRIES = 2


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    state: StateVector
    action: int
    reflection: str
    analysis: str
    feedback: FeedbackVector
    prompt: str
    raw_output: str
    fallback: bool = False
    attempts: int = 1

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "state": self.state.to_dict(),
            "action": self.action,
            "reflection": self.reflection,
            "analysis": self.analysis,
            "feedback": self.feedback.to_dict(),
            "prompt": self.prompt,
            "raw_output": self.raw_output,
            "fallback": self.fallback,
            "attempts": self.attempts,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HistoryEntry":
        return cls(
            step=int(rec["step"]),
            state=StateVector.from_dict(rec["state"]),
            action=int(rec["action"]),
            reflection=str(rec["reflection"]),
            analysis=str(rec["analysis"]),
            feedback=FeedbackVector.from_dict(rec["feedback"]),
            prompt=str(rec["prompt"]),
            raw_output=str(rec["raw_output"]),
            fallback=bool(rec.get("fallback", False)),
            attempts=int(rec.get("attempts", 1)),
        )


@dataclass
class Trajectory:
    entries: list[HistoryEntry]
    scenario_id: str
    seed: int
    config: SimConfig
    meta: dict = field(default_factory=dict)
    complete: bool = True

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def actions(self) -> list[int]:
        return [e.action for e in self.entries]

    @property
    def feedbacks(self) -> list[FeedbackVector]:
        return [e.feedback for e in self.entries]

    def header(self) -> dict:
        return {
            "format": TRAJECTORY_FORMAT,
            "version": FORMAT_VERSION,
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "steps": len(self.entries),
            "complete": self.complete,
            "meta": self.meta,
        }


# -- prompt -------------------------------------------------------------------

def _fmt_state(s: StateVector) -> str:
    return (f"prev_prbs={s.prev_action} se={s.se:.4f} arrival_bps={round(s.mu)} "
            f"queue_delta_B={s.delta} dropped_B={s.epsilon}")


def _fmt_feedback(f: FeedbackVector) -> str:
    delay = "drop" if math.isinf(f.max_delay) else f"{f.max_delay * 1e3:.1f}ms"
    return (f"se={f.se:.4f} violated={int(f.violated)} reconfigured={int(f.reconfigured)} "
            f"served_bits={f.served_bits} dropped_B={f.dropped_bytes} max_delay={delay}")


def task_header(config: SimConfig) -> str:
    lo, hi = config.action_bounds
    spec = config.managed
    name = spec.name or "managed"
    return "\n".join([
        f"You allocate physical resource blocks (PRBs) to the {name} slice of a base station "
        f"with {config.total_prbs} PRBs; the other slice receives the rest.",
        f"Every {config.decision_interval * 1e3:.0f} ms you choose the PRB count for the next interval.",
        "Goals: keep spectrum efficiency (SE) high, keep every packet delay within "
        f"{spec.delay_threshold * 1e3:.0f} ms with no drops, and change the allocation as rarely as possible.",
        f"The action must be an integer in [{lo}, {hi}].",
        "Reply with exactly these three tags:",
        "<reflection>what the last interval tells you</reflection>",
        "<action>INTEGER</action>",
        "<analysis>why this allocation</analysis>",
    ])


def build_prompt(history: Trajectory, s_t: StateVector, window: int = DEFAULT_WINDOW,
                 upto: Optional[int] = None) -> str:
    """Render the actor prompt for step ``upto`` (default: after all entries).

    Only entries with index < ``upto`` are visible, and of those only the
    last ``window``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    t = len(history.entries) if upto is None else upto
    visible = history.entries[max(0, t - window):t]
    parts = [task_header(history.config), ""]
    if visible:
        parts.append(f"Recent history ({len(visible)} of {t} steps):")
        for e in visible:
            parts += [
                f"[step {e.step}] state: {_fmt_state(e.state)}",
                f"  reflection: {json.dumps(e.reflection, ensure_ascii=False)}",
                f"  action: {e.action}",
                f"  analysis: {json.dumps(e.analysis, ensure_ascii=False)}",
                f"  feedback: {_fmt_feedback(e.feedback)}",
            ]
        parts.append("")
    parts.append(f"Current state (step {t}): {_fmt_state(s_t)}")
    return "\n".join(parts)


# -- loop ---------------------------------------------------------------------

def _context(env: SimEnv) -> ActContext:
    last = env.history[-1] if env.history else None
    return ActContext(state_vector(last, env.current_allocation), env.bounds)


def run_trajectory(policy: Policy, env: SimEnv, horizon: Optional[int] = None,
                   window: int = DEFAULT_WINDOW, retries: int = DEFAULT_RETRIES,
                   on_step: Optional[Callable[[HistoryEntry], None]] = None) -> Trajectory:
    if env.current_step != 0:
        raise ValueError("run_trajectory needs a fresh environment")
    if retries < 0:
        raise ValueError("retries must be >= 0")
    horizon = env.config.horizon if horizon is None else horizon
    if not 0 <= horizon <= env.config.horizon:
        raise ValueError(f"horizon must be in [0, {env.config.horizon}]")
    cfg = env.config
    traj = Trajectory([], cfg.scenario_id, cfg.seed, cfg,
                      meta={"policy": policy.backend, "window": window, "retries": retries}, complete=False)
    for t in range(horizon):
        ctx = _context(env)
        prompt = build_prompt(traj, ctx.state, window)
        triplet, raw, attempts = None, "", 0
        try:
            while attempts <= retries:
                attempts += 1
                raw = policy.act(prompt, ctx)
                try:
                    triplet = extract_triplet(raw, ctx.bounds)
                    break
                except (ParseError, ActionError) as exc:
                    log.info("step %d attempt %d rejected: %s", t, attempts, exc)
        except (TransportError, EndpointError) as exc:
            raise TrajectoryAborted(traj, exc) from exc
        if triplet is None:
            action, reflection, analysis, fallback = ctx.prev_action, "", "", True
        else:
            action, reflection, analysis, fallback = triplet.action, triplet.reflection, triplet.analysis, False
        feedback = env.step(action)
        entry = HistoryEntry(t, ctx.state, action, reflection, analysis, feedback, prompt, raw,
                             fallback=fallback, attempts=attempts)
        traj.entries.append(entry)
        if on_step is not None:
            on_step(entry)
    traj.complete = True
    return traj


def rebuild_env(traj: Trajectory) -> SimEnv:
    """Re-simulate a trajectory's recorded actions; the result supports replay."""
    env = SimEnv(traj.config)
    for e in traj.entries:
        env.step(e.action)
    return env


# -- persistence --------------------------------------------------------------

def persist_trajectory(traj: Trajectory, path: str | Path) -> None:
    write_jsonl(path, traj.header(), (e.to_record() for e in traj.entries))


def parse_trajectory(header: dict, body: list[tuple[int, dict]],
                     entry_cls=HistoryEntry) -> tuple[Trajectory, list]:
    try:
        config = SimConfig.from_dict(header["config"])
        traj = Trajectory([], str(header["scenario_id"]), int(header["seed"]), config,
                          meta=dict(header.get("meta", {})), complete=bool(header.get("complete", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad header: {exc}", 1) from exc
    for i, (lineno, rec) in enumerate(body):
        try:
            entry = entry_cls.from_record(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad step record: {exc!r}", lineno) from exc
        if entry.step != i:
            raise FormatError(f"expected step {i}, found {entry.step}", lineno)
        traj.entries.append(entry)
    return traj, traj.entries


def load_trajectory(path: str | Path) -> Trajectory:
    header, body = read_with_header(path, TRAJECTORY_FORMAT)
    traj, _ = parse_trajectory(header, body)
    return traj
