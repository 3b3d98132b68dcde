"""Intra-slice proportional fair scheduling."""

from __future__ import annotations

import math


def capacity_bytes(n_prbs: int, prb_bits: float) -> int:
    """Whole bytes deliverable over ``n_prbs`` PRBs of ``prb_bits`` bits each."""
    return math.floor(n_prbs * prb_bits / 8.0)


def prbs_needed(queued_bytes: int, prb_bits: float) -> int:
    n = math.ceil(queued_bytes * 8.0 / prb_bits)
    while capacity_bytes(n, prb_bits) < queued_bytes:
        n += 1
    return n


def pf_schedule(ues_in_slice, prbs: int, t_tti: int, tti: float = 1e-3) -> list[tuple[object, int]]:
    """Assign ``prbs`` PRBs of one TTI to backlogged UEs.

    Each PRB goes to the candidate with the largest instantaneous-to-average
    rate ratio; a UE stops being a candidate once its assigned PRBs cover its
    backlog. Ties go to the lowest ``ue_id``. Returns ``[(ue, n_prbs), ...]``
    for UEs that received at least one PRB.
    """
    if prbs < 0:
        raise ValueError("prbs must be >= 0")
    candidates = [ue for ue in ues_in_slice if ue.queued_bytes > 0]
    if not candidates or prbs == 0:
        return []
    # the PF metric is frozen within a TTI, so per-PRB greedy == metric-ordered fill
    candidates.sort(key=lambda ue: (-(ue.prb_bits[t_tti] / tti) / ue.avg_rate, ue.ue_id))
    assignment = []
    left = prbs
    for ue in candidates:
        n = min(left, prbs_needed(ue.queued_bytes, ue.prb_bits[t_tti]))
        assignment.append((ue, n))
        left -= n
        if left == 0:
            break
    return assignment


def pf_update(ues_in_slice, served_bytes, tti: float, smoothing: float) -> None:
    """Exponential moving average of each UE's served rate (bits/s)."""
    keep = 1.0 - smoothing
    for ue, b in zip(ues_in_slice, served_bytes):
        ue.avg_rate = keep * ue.avg_rate + smoothing * (b * 8.0 / tti)
