"""Trajectory-level labeling: each step gets a True/False verdict and, when
False, a proposed better allocation.

Two backends exist. The oracle replays recorded traffic and shadowing under
alternative allocations and scores them; the LLM backend asks a chat model.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

from .agent import HistoryEntry, Trajectory, _fmt_feedback, _fmt_state, parse_trajectory
from .errors import EndpointError, ReflectionError, TransportError
from .jsonl import read_with_header, write_jsonl
from .metrics import UtilityWeights, utility_term
from .policy.llm import ChatClient, LlmEndpointConfig
from .sim.env import SimEnv

log = logging.getLogger(__name__)

LABELED_FORMAT = "slicetune-labeled"


@dataclass(frozen=True)
class LabeledEntry(HistoryEntry):
    label: bool = True
    improved_action: Optional[int] = None
    rationale: str = ""

    def __post_init__(self):
        if self.label and self.improved_action is not None:
            raise ValueError(f"step {self.step}: True label must not carry an improved action")
        if not self.label and (self.improved_action is None or self.improved_action == self.action):
            raise ValueError(f"step {self.step}: False label needs an improved action different from {self.action}")

    @classmethod
    def from_entry(cls, entry: HistoryEntry, label: bool, improved: Optional[int], rationale: str) -> "LabeledEntry":
        base = {f.name: getattr(entry, f.name) for f in fields(HistoryEntry)}
        return cls(**base, label=label, improved_action=improved, rationale=rationale)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec.update(label=self.label, improved_action=self.improved_action, rationale=self.rationale)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledEntry":
        label = rec["label"]
        if not isinstance(label, bool):
            raise ValueError(f"label must be true or false, got {label!r}")
        improved = rec.get("improved_action")
        return cls.from_entry(HistoryEntry.from_record(rec), label,
                              None if improved is None else int(improved), str(rec.get("rationale", "")))


@dataclass
class LabeledTrajectory:
    entries: list[LabeledEntry]
    trajectory: Trajectory  # source, unlabeled view (shares config and meta)
    reflector: dict = field(default_factory=dict)
    source: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def config(self):
        return self.trajectory.config

    def false_steps(self) -> list[int]:
        return [e.step for e in self.entries if not e.label]

    def histogram(self) -> dict[str, int]:
        n_false = len(self.false_steps())
        return {"True": len(self.entries) - n_false, "False": n_false}


# -- oracle -------------------------------------------------------------------

@dataclass(frozen=True)
class OracleParams:
    candidate_deltas: tuple[int, ...] = tuple(range(-4, 5))
    lookahead: int = 2
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    margin: Optional[float] = None  # None -> 0.05 * p_reconf
    # Candidates further than this from the previous allocation are ignored.
    max_step_from_prev: Optional[int] = None

    def __post_init__(self):
        if 0 not in self.candidate_deltas:
            raise ValueError("candidate_deltas must contain 0")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.margin is not None and self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.max_step_from_prev is not None and self.max_step_from_prev < 0:
            raise ValueError("max_step_from_prev must be >= 0")

    @property
    def effective_margin(self) -> float:
        return 0.05 * self.weights.p_reconf if self.margin is None else self.margin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidate_deltas"] = list(self.candidate_deltas)
        if d["margin"] is not None and math.isinf(d["margin"]):
            d["margin"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OracleParams":
        d = dict(d)
        if "weights" in d:
            d["weights"] = UtilityWeights(**d["weights"])
        if "candidate_deltas" in d:
            d["candidate_deltas"] = tuple(int(x) for x in d["candidate_deltas"])
        if d.get("margin") is not None:
            d["margin"] = float(d["margin"])
        return cls(**d)


def replay_score(env: SimEnv, t: int, b: int, lookahead: int, w: UtilityWeights) -> float:
    steps = min(lookahead, env.current_step - t)
    return sum(utility_term(f.se, int(f.reconfigured), int(f.violated), w)
               for f in env.replay_counterfactual(t, b, steps))


def oracle_candidates(env: SimEnv, t: int, a_t: int, params: OracleParams) -> list[int]:
    lo, hi = env.bounds
    prev = env.allocations[t - 1] if t > 0 else env.initial_allocation
    out = {a_t}
    for d in params.candidate_deltas:
        b = min(hi, max(lo, a_t + d))
        if params.max_step_from_prev is None or abs(b - prev) <= params.max_step_from_prev:
            out.add(b)
    return sorted(out)


def oracle_hindsight_label(env: SimEnv, t: int, a_t: int, params: OracleParams
                           ) -> tuple[bool, Optional[int], str]:
    """Label step ``t`` of a recorded environment by counterfactual replay."""
    prev = env.allocations[t - 1] if t > 0 else env.initial_allocation
    scores = {b: replay_score(env, t, b, params.lookahead, params.weights)
              for b in oracle_candidates(env, t, a_t, params)}
    best = min(scores, key=lambda b: (-scores[b], abs(b - prev), b))
    own, top = scores[a_t], scores[best]
    if own >= top - params.effective_margin:
        return True, None, f"score {own:.4f} within margin of best {top:.4f} (at {best})"
    return False, best, f"{best} PRBs scores {top:.4f} vs {own:.4f} for {a_t}"


class OracleReflector:
    kind = "oracle"

    def __init__(self, params: OracleParams | None = None):
        self.params = params or OracleParams()

    def describe(self) -> dict:
        return {"kind": self.kind, "params": self.params.to_dict()}

    def label(self, traj: Trajectory) -> list[tuple[bool, Optional[int], str]]:
        env = SimEnv(traj.config)
        out = []
        for e in traj.entries:
            fb = env.step(e.action)
            if fb != e.feedback:
                raise ReflectionError("recorded feedback does not match a re-simulation of the trajectory", e.step)
        for e in traj.entries:
            out.append(oracle_hindsight_label(env, e.step, e.action, self.params))
        return out


# -- LLM reflector ------------------------------------------------------------

REFLECTOR_SYSTEM = "You review a finished control trajectory and grade every step."
_VERDICT = re.compile(
    r"^\s*STEP\s+(\d+)\s*:\s*(true|false)\s*;\s*action\s*=\s*([+-]?\d+|none)?\s*;\s*reason\s*=\s*(.*?)\s*$",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class LlmReflectorConfig:
    endpoint: LlmEndpointConfig
    chunk_size: int = 100
    overlap: int = 2
    temperature: float = 0.0

    def __post_init__(self):
        if self.chunk_size < 1 or not 0 <= self.overlap < self.chunk_size:
            raise ValueError("need chunk_size >= 1 and 0 <= overlap < chunk_size")


def chunk_ranges(n: int, size: int, overlap: int) -> list[tuple[int, int]]:
    if n == 0:
        return []
    out, start = [], 0
    while True:
        end = min(start + size, n)
        out.append((start, end))
        if end >= n:
            return out
        start += size - overlap


def parse_verdicts(text: str, steps: Sequence[int], actions: dict[int, int], bounds: tuple[int, int]
                   ) -> dict[int, tuple[bool, Optional[int], str]]:
    """Verdicts for the given steps found in ``text``; lines that fail to parse are dropped."""
    wanted = set(steps)
    lo, hi = bounds
    out = {}
    for line in text.splitlines():
        m = _VERDICT.match(line)
        if not m:
            continue
        t = int(m.group(1))
        if t not in wanted:
            continue
        reason = m.group(4)
        if m.group(2).lower() == "true":
            out[t] = (True, None, reason)
            continue
        raw = m.group(3)
        if raw is None or raw.lower() == "none" or not lo <= int(raw) <= hi:
            continue
        b = int(raw)
        # a False verdict proposing the recorded action is treated as True
        out[t] = (True, None, reason) if b == actions[t] else (False, b, reason)
    return out


def render_reflection_request(traj: Trajectory, start: int, end: int) -> str:
    cfg = traj.config
    lo, hi = cfg.action_bounds
    lines = [
        f"A controller allocated PRBs (integer in [{lo}, {hi}], out of {cfg.total_prbs}) to the "
        f"{cfg.managed.name or 'managed'} slice every {cfg.decision_interval * 1e3:.0f} ms.",
        "Good steps keep spectrum efficiency high, avoid delay or drop violations "
        f"(threshold {cfg.managed.delay_threshold * 1e3:.0f} ms), and avoid needless allocation changes.",
        f"Trajectory steps {start} to {end - 1} of {len(traj.entries)}:",
    ]
    for e in traj.entries[start:end]:
        lines.append(f"STEP {e.step} | state {_fmt_state(e.state)} | action {e.action} | "
                     f"feedback {_fmt_feedback(e.feedback)}")
    lines += [
        "",
        "For every step above output exactly one line:",
        "STEP <t>: True|False; action=<better PRB count if False, else none>; reason=<short reason>",
    ]
    return "\n".join(lines)


class LlmReflector:
    kind = "llm"

    def __init__(self, config: LlmReflectorConfig, client: ChatClient | None = None):
        self.config = config
        self.client = client or ChatClient(config.endpoint)

    def describe(self) -> dict:
        ep = self.config.endpoint
        return {"kind": self.kind, "model": ep.model, "base_url": ep.base_url,
                "chunk_size": self.config.chunk_size, "overlap": self.config.overlap}

    def _ask(self, prompt: str, first_step: int) -> str:
        msgs = [{"role": "system", "content": REFLECTOR_SYSTEM}, {"role": "user", "content": prompt}]
        try:
            return self.client.complete(msgs, self.config.temperature)
        except (TransportError, EndpointError) as exc:
            raise ReflectionError(f"reflector request failed: {exc}", first_step) from exc

    def label(self, traj: Trajectory) -> list[tuple[bool, Optional[int], str]]:
        actions = {e.step: e.action for e in traj.entries}
        bounds = traj.config.action_bounds
        verdicts: dict[int, tuple] = {}
        for start, end in chunk_ranges(len(traj.entries), self.config.chunk_size, self.config.overlap):
            steps = list(range(start, end))
            prompt = render_reflection_request(traj, start, end)
            got = parse_verdicts(self._ask(prompt, start), steps, actions, bounds)
            missing = [t for t in steps if t not in got]
            if missing:
                retry = prompt + f"\nYour previous answer lacked valid lines for steps {missing}. Answer again."
                again = parse_verdicts(self._ask(retry, start), missing, actions, bounds)
                got.update(again)
            for t in steps:
                if t not in got:
                    log.warning("no parseable verdict for step %d; labeling it True", t)
                    got[t] = (True, None, "no parseable verdict")
            verdicts.update(got)  # later chunks overwrite the overlap
        return [verdicts[e.step] for e in traj.entries]


# -- entry points -------------------------------------------------------------

Backend = Union[OracleReflector, LlmReflector, OracleParams]


def reflect_trajectory(traj: Trajectory, backend: Backend, source: str = "") -> LabeledTrajectory:
    if isinstance(backend, OracleParams):
        backend = OracleReflector(backend)
    labels = backend.label(traj)
    entries = [LabeledEntry.from_entry(e, *lab) for e, lab in zip(traj.entries, labels)]
    return LabeledTrajectory(entries, traj, backend.describe(), source)


def persist_labeled(lt: LabeledTrajectory, path: str | Path) -> None:
    header = lt.trajectory.header()
    header.update(format=LABELED_FORMAT, steps=len(lt.entries), reflector=lt.reflector, source=lt.source)
    write_jsonl(path, header, (e.to_record() for e in lt.entries))


def load_labeled(path: str | Path) -> LabeledTrajectory:
    header, body = read_with_header(path, LABELED_FORMAT)
    traj, entries = parse_trajectory(header, body, entry_cls=LabeledEntry)
    plain = Trajectory([HistoryEntry(**{f.name: getattr(e, f.name) for f in fields(HistoryEntry)})
                        for e in entries], traj.scenario_id, traj.seed, traj.config, traj.meta, traj.complete)
    return LabeledTrajectory(list(entries), plain, dict(header.get("reflector", {})), str(header.get("source", "")))
