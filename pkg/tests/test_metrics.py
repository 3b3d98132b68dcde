import math

import pytest
from hypothesis import given, strategies as st

from slicetune.metrics import (
    StepMetrics, UtilityWeights, aggregate_window, qos_violation, read_metrics, reconfig_flags,
    spectrum_efficiency, state_vector, utility, write_metrics,
)
from slicetune.sim.feedback import FeedbackVector


def test_se_hand_value():
    # 40960 bits in 0.1 s over two 180 kHz PRBs
    assert spectrum_efficiency(40960, 0.1, 2 * 180e3) == pytest.approx(409600 / 360000, rel=1e-12)


@pytest.mark.parametrize("tau,bw", [(0, 1.0), (0.1, 0), (-1, 5)])
def test_se_rejects_nonpositive(tau, bw):
    with pytest.raises(ValueError):
        spectrum_efficiency(1, tau, bw)


def test_violation_is_strict():
    assert qos_violation([0.010, 0.002], 0.010) == 0
    assert qos_violation([0.0101], 0.010) == 1
    assert qos_violation([], 0.010) == 0
    assert qos_violation([math.inf], 0.010) == 1


def test_reconfig_flags():
    flags = reconfig_flags([5, 5, 6, 6, 5])
    assert flags == [0, 0, 1, 0, 1]
    assert sum(flags) == 2


def test_utility_hand_value():
    w = UtilityWeights(alpha=1, p_reconf=2, p_qos=5)
    steps = [StepMetrics(2.0, 0, 0, 2.0), StepMetrics(1.0, 1, 1, -6.0)]
    assert utility(steps, w) == pytest.approx(-4.0)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        UtilityWeights(p_qos=-1)


@given(st.lists(st.integers(1, 49), max_size=40))
def test_count_matches_changes(allocs):
    expected = sum(1 for a, b in zip(allocs, allocs[1:]) if a != b)
    assert sum(reconfig_flags(allocs)) == expected


def test_state_vector_from_feedback():
    fb = FeedbackVector(1.5, False, True, 8000, 4000, 12, -3, 80000.0, 0.004)
    s = state_vector(fb, 7)
    assert (s.prev_action, s.se, s.mu, s.delta, s.epsilon) == (7, 1.5, 80000.0, -3, 12)
    assert state_vector(None, 25).se == 0.0


def test_aggregate_and_csv_roundtrip(tmp_path):
    steps = [StepMetrics(1 / 3, 0, 1, 1 / 3 - 2), StepMetrics(0.1, 1, 0, 0.1 - 5)]
    w = aggregate_window(steps)
    assert w.total_violations == 1 and w.total_reconfigs == 1 and w.length == 2
    assert w.mean_se == pytest.approx((1 / 3 + 0.1) / 2)
    path = tmp_path / "m.csv"
    write_metrics(path, steps, [4, 5])
    back, allocs = read_metrics(path)
    assert back == steps and allocs == [4, 5]
