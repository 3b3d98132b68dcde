"""On-off constant-bit-rate traffic sources."""

from __future__ import annotations

import numpy as np

from .config import SliceSpec


def sample_onoff(rng: np.random.Generator, mean: float) -> float:
    """Exponentially distributed phase duration in seconds."""
    if not mean > 0:
        raise ValueError(f"mean phase duration must be > 0, got {mean}")
    return float(rng.exponential(mean))


def onoff_schedule(rng: np.random.Generator, spec: SliceSpec, duration: float):
    """Alternating phases covering ``[0, duration)``.

    Returns ``(starts_on, boundaries)`` where ``boundaries`` holds the phase
    switch instants; the first phase is On iff ``starts_on``.
    """
    starts_on = bool(rng.random() < 0.5)
    boundaries = []
    t, on = 0.0, starts_on
    while t < duration:
        t += sample_onoff(rng, spec.mean_on if on else spec.mean_off)
        boundaries.append(t)
        on = not on
    return starts_on, np.asarray(boundaries)


def arrival_times(spec: SliceSpec, starts_on: bool, boundaries: np.ndarray, duration: float) -> np.ndarray:
    """Packet arrival instants: one packet every ``packet_bits / bit_rate`` while On."""
    interval = spec.packet_size * 8 / spec.bit_rate
    edges = np.concatenate(([0.0], boundaries))
    chunks = []
    for k in range(len(boundaries)):
        if (k % 2 == 0) != starts_on:
            continue
        start, end = edges[k], min(edges[k + 1], duration)
        if start >= duration:
            break
        chunks.append(start + interval * np.arange(int(np.ceil((end - start) / interval))))
    if not chunks:
        return np.empty(0)
    times = np.concatenate(chunks)
    return times[times < duration]


def phase_at(starts_on: bool, boundaries: np.ndarray, t: float) -> tuple[bool, float]:
    """(is_on, remaining seconds of the phase) at instant ``t``."""
    k = int(np.searchsorted(boundaries, t, side="right"))
    on = starts_on if k % 2 == 0 else not starts_on
    remaining = float(boundaries[k] - t) if k < len(boundaries) else 0.0
    return on, max(remaining, 0.0)
