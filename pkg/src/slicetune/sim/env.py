"""Packet-level two-slice environment with replayable traces.

Traffic arrivals and shadowing are generated for the whole horizon when the
environment is built, from per-UE seeded streams. They do not depend on the
actions taken, which is what makes counterfactual replay exact.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ActionError, ReplayError
from ..metrics import qos_violation, spectrum_efficiency
from . import channel, traffic
from .config import SimConfig, SliceSpec
from .feedback import FeedbackVector
from .scheduler import capacity_bytes, pf_schedule, pf_update

PLACEMENT, TRAFFIC, FADING = 0, 1, 2
INITIAL_AVG_RATE = 1.0  # bits/s; keeps the PF ratio finite before the first service


def stream(seed: int, kind: int, ue_id: int) -> np.random.Generator:
    """Independent generator per (seed, stream kind, UE)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(kind, ue_id))))


@dataclass(eq=False, slots=True)
class Packet:
    size: int
    arrival_time: float
    ue_id: int
    remaining: int
    arrival_tti: int


@dataclass(eq=False)
class UeState:
    ue_id: int
    slice_id: int
    position: float  # metres from the base station
    on_off_phase: str = "Off"
    phase_remaining: float = 0.0
    queue: deque = field(default_factory=deque)
    queued_bytes: int = 0
    avg_rate: float = INITIAL_AVG_RATE
    fading_trace_cursor: int = 0
    fading_db: Optional[np.ndarray] = field(default=None, repr=False)
    prb_bits: list = field(default_factory=list, repr=False)
    _schedule: tuple = field(default=(True, np.empty(0)), repr=False)


@dataclass
class _Snapshot:
    queues: tuple  # per managed UE: tuple of (size, arrival_tti, remaining)
    avg_rates: tuple


@dataclass
class _Interval:
    arrived: int = 0
    served: int = 0
    dropped: int = 0
    max_delay_ttis: int = 0


class SimEnv:
    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.n_ttis = config.horizon * config.ttis_per_step
        self.current_step = 0
        self.current_allocation = config.total_prbs // 2
        self.initial_allocation = self.current_allocation
        self.allocations: list[int] = []
        self.history: list[FeedbackVector] = []
        self._snapshots: list[_Snapshot] = []

        duration = self.n_ttis * config.tti
        self.ues: list[UeState] = []
        self.arrivals = np.zeros((self.n_ttis, sum(s.ue_count for s in config.slices)), dtype=np.int32)
        radio = config.radio
        ue_id = 0
        for slice_id, spec in enumerate(config.slices):
            for _ in range(spec.ue_count):
                pos = stream(config.seed, PLACEMENT, ue_id).uniform(radio.min_distance_m, radio.max_distance_m)
                starts_on, bounds = traffic.onoff_schedule(stream(config.seed, TRAFFIC, ue_id), spec, duration)
                times = traffic.arrival_times(spec, starts_on, bounds, duration)
                idx = np.floor(times / config.tti).astype(np.int64)
                self.arrivals[:, ue_id] = np.bincount(idx[idx < self.n_ttis], minlength=self.n_ttis)
                fading = channel.fading_trace(stream(config.seed, FADING, ue_id), self.n_ttis, radio)
                ue = UeState(ue_id=ue_id, slice_id=slice_id, position=float(pos), fading_db=fading)
                ue.prb_bits = channel.bits_per_prb(ue.position, fading, config).tolist()
                ue._schedule = (starts_on, bounds)
                self.ues.append(ue)
                ue_id += 1
        self.served = np.zeros_like(self.arrivals)
        self.slice_ues = [[ue for ue in self.ues if ue.slice_id == i] for i in range(len(config.slices))]
        self._update_phases(0)

    # -- public API ---------------------------------------------------------

    @property
    def bounds(self) -> tuple[int, int]:
        return self.config.action_bounds

    def check_action(self, allocation) -> int:
        lo, hi = self.bounds
        if isinstance(allocation, bool) or not isinstance(allocation, (int, np.integer)):
            raise ActionError(f"allocation must be an integer, got {allocation!r}")
        if not lo <= allocation <= hi:
            raise ActionError(f"allocation {allocation} outside [{lo}, {hi}]")
        return int(allocation)

    def step(self, allocation: int) -> FeedbackVector:
        allocation = self.check_action(allocation)
        if self.current_step >= self.config.horizon:
            raise ActionError(f"horizon of {self.config.horizon} steps exhausted")
        cfg = self.config
        t = self.current_step
        m = cfg.managed_index
        managed = self.slice_ues[m]
        self._snapshots.append(_Snapshot(
            queues=tuple(tuple((p.size, p.arrival_tti, p.remaining) for p in ue.queue) for ue in managed),
            avg_rates=tuple(ue.avg_rate for ue in managed),
        ))
        prev = self.allocations[-1] if self.allocations else None
        start = t * cfg.ttis_per_step
        feedback = None
        for i, ues in enumerate(self.slice_ues):
            prbs = allocation if i == m else cfg.total_prbs - allocation
            q0 = sum(ue.queued_bytes for ue in ues)
            stats = _run_interval(ues, cfg.slices[i], prbs, start, cfg, self.arrivals, self.served)
            if i == m:
                feedback = _feedback(ues, cfg.slices[i], stats, q0, allocation, prev, start + cfg.ttis_per_step, cfg)
        self.allocations.append(allocation)
        self.history.append(feedback)
        self.current_allocation = allocation
        self.current_step += 1
        self._update_phases(self.current_step * cfg.ttis_per_step)
        return feedback

    def replay_counterfactual(self, step_index: int, alt_allocation: int, lookahead: int = 1) -> list[FeedbackVector]:
        """Re-simulate the managed slice over ``[step_index, step_index + lookahead)``.

        ``alt_allocation`` replaces the recorded action at ``step_index``; the
        recorded actions are used afterwards. The environment is not modified.
        """
        alt_allocation = self.check_action(alt_allocation)
        if lookahead < 1:
            raise ReplayError("lookahead must be >= 1")
        if not 0 <= step_index < self.current_step:
            raise ReplayError(f"step {step_index} has not been recorded (current step {self.current_step})")
        if step_index + lookahead > self.current_step:
            raise ReplayError(
                f"window [{step_index}, {step_index + lookahead}) exceeds recorded trace of {self.current_step} steps"
            )
        cfg = self.config
        m = cfg.managed_index
        snap = self._snapshots[step_index]
        ues = []
        for src, queue, avg in zip(self.slice_ues[m], snap.queues, snap.avg_rates):
            ue = UeState(ue_id=src.ue_id, slice_id=src.slice_id, position=src.position, avg_rate=avg,
                         fading_db=src.fading_db)
            ue.prb_bits = src.prb_bits
            ue.queue = deque(Packet(size, a * cfg.tti, src.ue_id, rem, a) for size, a, rem in queue)
            ue.queued_bytes = sum(rem for _, _, rem in queue)
            ues.append(ue)
        prev = self.allocations[step_index - 1] if step_index > 0 else None
        out = []
        for k in range(lookahead):
            t = step_index + k
            alloc = alt_allocation if k == 0 else self.allocations[t]
            start = t * cfg.ttis_per_step
            q0 = sum(ue.queued_bytes for ue in ues)
            stats = _run_interval(ues, cfg.slices[m], alloc, start, cfg, self.arrivals, None)
            out.append(_feedback(ues, cfg.slices[m], stats, q0, alloc, prev, start + cfg.ttis_per_step, cfg))
            prev = alloc
        return out

    def trace_records(self, start_tti: int = 0, end_tti: Optional[int] = None):
        """Yield one record per (TTI, UE) for the simulated part of the horizon."""
        end = self.current_step * self.config.ttis_per_step if end_tti is None else end_tti
        for tti in range(start_tti, end):
            for ue in self.ues:
                size = self.config.slices[ue.slice_id].packet_size
                yield {
                    "tti_index": tti,
                    "ue_id": ue.ue_id,
                    "arrived_bytes": int(self.arrivals[tti, ue.ue_id]) * size,
                    "fading_db": float(ue.fading_db[tti]),
                    "served_bytes": int(self.served[tti, ue.ue_id]),
                }

    def write_trace_log(self, path: str | Path) -> int:
        n = 0
        with open(path, "w") as fh:
            for rec in self.trace_records():
                fh.write(json.dumps(rec) + "\n")
                n += 1
        return n

    # -- internals ----------------------------------------------------------

    def _update_phases(self, tti_index: int) -> None:
        now = tti_index * self.config.tti
        for ue in self.ues:
            on, remaining = traffic.phase_at(*ue._schedule, now)
            ue.on_off_phase = "On" if on else "Off"
            ue.phase_remaining = remaining
            ue.fading_trace_cursor = min(tti_index, self.n_ttis)


def _run_interval(ues, spec: SliceSpec, prbs: int, start: int, cfg: SimConfig, arrivals, served_log) -> _Interval:
    stats = _Interval()
    size = spec.packet_size
    cap = cfg.queue_capacity
    tti_s = cfg.tti
    smoothing = cfg.pf_smoothing
    cols = [ue.ue_id for ue in ues]
    slot = {ue.ue_id: i for i, ue in enumerate(ues)}
    block = arrivals[start:start + cfg.ttis_per_step, cols].tolist()
    for k, row in enumerate(block):
        tti = start + k
        for ue, n in zip(ues, row):
            for _ in range(n):
                if ue.queued_bytes + size > cap:
                    stats.dropped += size
                else:
                    ue.queue.append(Packet(size, tti * tti_s, ue.ue_id, size, tti))
                    ue.queued_bytes += size
                stats.arrived += size
        served = [0] * len(ues)
        if prbs:
            for ue, n_prb in pf_schedule(ues, prbs, tti, tti_s):
                budget = min(ue.queued_bytes, capacity_bytes(n_prb, ue.prb_bits[tti]))
                ue.queued_bytes -= budget
                stats.served += budget
                served[slot[ue.ue_id]] = budget
                if served_log is not None:
                    served_log[tti, ue.ue_id] = budget
                q = ue.queue
                while budget:
                    head = q[0]
                    if head.remaining <= budget:
                        budget -= head.remaining
                        head.remaining = 0
                        q.popleft()
                        delay = tti + 1 - head.arrival_tti
                        if delay > stats.max_delay_ttis:
                            stats.max_delay_ttis = delay
                    else:
                        head.remaining -= budget
                        budget = 0
        pf_update(ues, served, tti_s, smoothing)
    return stats


def _feedback(ues, spec: SliceSpec, stats: _Interval, q0: int, allocation: int, prev: Optional[int],
              end_tti: int, cfg: SimConfig) -> FeedbackVector:
    max_ttis = stats.max_delay_ttis
    for ue in ues:
        if ue.queue:
            max_ttis = max(max_ttis, end_tti - ue.queue[0].arrival_tti)
    max_delay = math.inf if stats.dropped else max_ttis * cfg.tti
    q1 = sum(ue.queued_bytes for ue in ues)
    served_bits = stats.served * 8
    return FeedbackVector(
        se=spectrum_efficiency(served_bits, cfg.decision_interval, allocation * cfg.prb_bandwidth),
        violated=bool(qos_violation([max_delay], spec.delay_threshold)),
        reconfigured=prev is not None and allocation != prev,
        arrived_bits=stats.arrived * 8,
        served_bits=served_bits,
        dropped_bytes=stats.dropped,
        queued_delta_bytes=q1 - q0,
        arrival_throughput=stats.arrived * 8 / cfg.decision_interval,
        max_delay=max_delay,
    )


def init_env(config: SimConfig) -> SimEnv:
    return SimEnv(config)


def step(env: SimEnv, allocation: int) -> FeedbackVector:
    return env.step(allocation)


def replay_counterfactual(env: SimEnv, step_index: int, alt_allocation: int, lookahead: int = 1) -> list[FeedbackVector]:
    return env.replay_counterfactual(step_index, alt_allocation, lookahead)
