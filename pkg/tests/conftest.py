import pytest

from slicetune.sim import SimConfig, SliceSpec, init_env


def small_config(**overrides) -> SimConfig:
    base = dict(horizon=20, seed=3)
    base.update(overrides)
    return SimConfig(**base)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def env(config):
    return init_env(config)


@pytest.fixture
def idle_env():
    env = init_env(small_config())
    env.arrivals[:] = 0
    return env


def overload_config(**overrides) -> SimConfig:
    """Managed slice always On and well above the capacity of a few PRBs."""
    gbr = SliceSpec(ue_count=6, bit_rate=2.0e6, packet_size=512, mean_on=1e6, mean_off=1e-6,
                    delay_threshold=0.010, is_managed=True, name="hot")
    other = SliceSpec(ue_count=2, bit_rate=1.0e6, packet_size=512, mean_on=15.0, mean_off=15.0,
                      delay_threshold=0.050, name="bg")
    base = dict(slices=(gbr, other), horizon=30, seed=11)
    base.update(overrides)
    return SimConfig(**base)


def hand_labeled(rows, config=None, prompt_prefix="prompt"):
    """Labeled trajectory from ``(state, recorded_action, improved_or_None)`` rows.

    Feedback is a placeholder; only prompts, states and outputs matter to training.
    """
    from slicetune.agent import HistoryEntry, Trajectory
    from slicetune.grammar import render_output
    from slicetune.reflector import LabeledEntry, LabeledTrajectory
    from slicetune.sim.feedback import FeedbackVector

    config = config or SimConfig()
    fb = FeedbackVector(1.0, False, False, 0, 0, 0, 0, 0.0, 0.0)
    plain, labeled = [], []
    for t, (state, action, improved) in enumerate(rows):
        h = HistoryEntry(t, state, action, "r", "a", fb, f"{prompt_prefix} {t}", render_output("r", action, "a"))
        plain.append(h)
        labeled.append(LabeledEntry.from_entry(h, improved is None, improved, "hand"))
    return LabeledTrajectory(labeled, Trajectory(plain, "hand", config.seed, config))


def separable_rows(n=40, seed=0):
    """Queue growing -> +2 PRBs is right, queue shrinking -> -2; half the recorded actions are wrong."""
    import numpy as np
    from slicetune.metrics import StateVector

    rng = np.random.default_rng(seed)
    rows = []
    for t in range(n):
        prev, up = int(rng.integers(10, 40)), t % 2 == 1
        state = StateVector(prev, float(rng.uniform(0.5, 3)), float(rng.uniform(1e6, 1e7)),
                            int(rng.integers(50, 500)) * (1 if up else -1), 0)
        good = prev + 2 if up else prev - 2
        if t % 4 < 2:
            rows.append((state, good, None))
        else:
            wrong = prev + int(rng.choice([-2, -1, 0, 1] if up else [-1, 0, 1, 2]))
            rows.append((state, wrong, good))
    return rows


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
