"""Preference dataset construction from labeled trajectories, and the
iterated fine-tuning loop of the toy actor."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import CapabilityError, OneSidedDatasetError
from .grammar import render_output, try_extract_action
from .kto import (
    REFLECTOR, ROLLOUT, BatchTensors, KtoConfig, PreferenceExample, gradient_step, kto_weights, trainable,
)
from .policy.base import EXACT, ActContext, Policy, empirical_action_prob
from .policy.toy import ToySoftmaxPolicy
from .reflector import LabeledEntry, LabeledTrajectory

log = logging.getLogger(__name__)


def synthetic_positive(entry: LabeledEntry) -> str:
    return render_output(f"hindsight review of step {entry.step}", entry.improved_action,
                         f"use {entry.improved_action} PRBs instead of {entry.action}")


def rollout_refine(policy: Policy, entry: LabeledEntry, m: int, rho: float, bounds: tuple[int, int],
                   iteration: int = 1) -> tuple[list[PreferenceExample], bool, float]:
    """Sample ``m`` outputs for a False step and label them against the improved action.

    Returns the examples, whether the step is now saturated, and the
    probability estimate the decision used.
    """
    if entry.label:
        raise ValueError(f"step {entry.step} is labeled True; only False steps are refined")
    ctx = ActContext(entry.state, bounds)
    target = entry.improved_action
    outs = policy.sample_k(entry.prompt, ctx, m)
    examples = [PreferenceExample(entry.prompt, o, try_extract_action(o, bounds) == target, ROLLOUT,
                                  entry.step, iteration, entry.state, bounds) for o in outs]
    if policy.capabilities.has_exact_logprob:
        p, kind = policy.action_prob(entry.prompt, ctx, target)
        assert kind == EXACT
    else:
        p = empirical_action_prob(outs, target, bounds)
    return examples, p > rho, p


@dataclass
class IterationData:
    dataset: list[PreferenceExample]
    rolled_out: int
    newly_saturated: list[int]


def build_dataset_iteration(lt: LabeledTrajectory, policy: Policy, config: KtoConfig, saturated: set[int],
                            iteration: int = 1) -> IterationData:
    """Dataset for one iteration; ``saturated`` is updated in place."""
    bounds = lt.config.action_bounds
    data: list[PreferenceExample] = []
    for e in lt.entries:
        data.append(PreferenceExample(e.prompt, e.raw_output, e.label, REFLECTOR, e.step, iteration, e.state, bounds))
        if not e.label:
            data.append(PreferenceExample(e.prompt, synthetic_positive(e), True, REFLECTOR, e.step, iteration,
                                          e.state, bounds))
    rolled, newly = 0, []
    for e in lt.entries:
        if e.label or e.step in saturated:
            continue
        examples, sat, _ = rollout_refine(policy, e, config.m, config.rho, bounds, iteration)
        data.extend(examples)
        rolled += 1
        if sat:
            newly.append(e.step)
    saturated.update(newly)
    return IterationData(data, rolled, newly)


@dataclass
class IterationStats:
    iteration: int
    n_pos: int
    n_neg: int
    lambda_d: float
    lambda_u: float
    chosen_reward: float
    rejected_reward: float
    loss: float
    rolled_out: int
    saturated: int
    skipped: int
    z0: float
    final_chosen_reward: float
    final_rejected_reward: float


@dataclass
class StepLog:
    iteration: int
    step: int
    loss: float
    z0: float
    chosen_reward: float
    rejected_reward: float
    chosen_logprob: float


@dataclass
class TrainReport:
    rows: list[IterationStats] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    datasets: list[list[PreferenceExample]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        _write_rows(path, IterationStats, self.rows)

    def write_steps_csv(self, path: str | Path) -> None:
        _write_rows(path, StepLog, self.steps)


def _write_rows(path, cls, rows) -> None:
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean(x: np.ndarray) -> float:
    return float(x.mean()) if x.size else 0.0


def run_rfr(policy: Policy, lt: LabeledTrajectory, config: KtoConfig,
            on_iteration: Optional[Callable[[IterationStats, list[PreferenceExample]], None]] = None
            ) -> tuple[Policy, TrainReport]:
    """Train ``policy`` in place for ``config.n`` iterations."""
    if not isinstance(policy, ToySoftmaxPolicy) or not policy.capabilities.has_exact_logprob:
        raise CapabilityError(
            f"in-process training needs the toy softmax backend, not {policy.backend}; "
            "use export_dataset to fine-tune externally"
        )
    policy.reset_streams(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(7,)))
    reference = policy.snapshot()
    saturated: set[int] = set()
    report = TrainReport()
    beta = config.beta
    for it in range(1, config.n + 1):
        if config.reference_mode == "iteration":
            reference = policy.snapshot()
        built = build_dataset_iteration(lt, policy, config, saturated, it)
        usable = [ex for ex in built.dataset if trainable(policy, ex)]
        skipped = len(built.dataset) - len(usable)
        if skipped:
            log.info("iteration %d: %d examples not expressible by the toy policy", it, skipped)
        n_pos = sum(ex.label for ex in usable)
        n_neg = len(usable) - n_pos
        report.datasets.append(built.dataset)
        try:
            weights = kto_weights(n_pos, n_neg)
        except OneSidedDatasetError as exc:
            raise OneSidedDatasetError(n_pos, n_neg, report) from exc

        full = BatchTensors.build(policy, reference, usable, weights)
        pos = full.sign > 0
        losses, z0s, chosen, rejected = [], [], [], []
        bs = config.batch_size
        for s in range(config.steps_per_iteration):
            if bs is None or bs >= len(usable):
                tensors = full
            else:
                idx = rng.permutation(len(usable))[:bs]
                tensors = BatchTensors.build(policy, reference, [usable[i] for i in idx], weights)
            r_full = full.rewards(policy.theta)
            loss, _, z = gradient_step(policy, tensors, config)
            report.steps.append(StepLog(it, s, loss, z, beta * _mean(r_full[pos]), beta * _mean(r_full[~pos]),
                                        _mean(r_full[pos] + full.ref_lp[pos])))
            losses.append(loss)
            z0s.append(z)
            chosen.append(beta * _mean(r_full[pos]))
            rejected.append(beta * _mean(r_full[~pos]))
        r_end = full.rewards(policy.theta)
        if not losses:
            losses = [full.loss_and_grad(policy.theta, beta)[0]]
            z0s = [full.z0(policy.theta)]
            chosen, rejected = [beta * _mean(r_end[pos])], [beta * _mean(r_end[~pos])]
        row = IterationStats(
            iteration=it, n_pos=n_pos, n_neg=n_neg, lambda_d=float(weights[0]), lambda_u=float(weights[1]),
            chosen_reward=float(np.mean(chosen)), rejected_reward=float(np.mean(rejected)),
            loss=float(np.mean(losses)), rolled_out=built.rolled_out, saturated=len(saturated),
            skipped=skipped, z0=float(np.mean(z0s)),
            final_chosen_reward=beta * _mean(r_end[pos]), final_rejected_reward=beta * _mean(r_end[~pos]),
        )
        report.rows.append(row)
        if on_iteration is not None:
            on_iteration(row, built.dataset)
    return policy, report


def export_iteration_dataset(policy: Policy, lt: LabeledTrajectory, config: KtoConfig) -> list[PreferenceExample]:
    """First-iteration dataset for external fine-tuning; works with any backend."""
    return build_dataset_iteration(lt, policy, config, set(), 1).dataset
