import json

import pytest
from hypothesis import given, settings, strategies as st

from slicetune.agent import (
    Trajectory, build_prompt, load_trajectory, persist_trajectory, rebuild_env,
    run_trajectory,
)
from slicetune.errors import FormatError, TrajectoryAborted, TransportError
from slicetune.grammar import render_output
from slicetune.metrics import StateVector
from slicetune.policy import ScriptedPolicy, ToySoftmaxPolicy
from slicetune.sim import init_env

from conftest import small_config


def s(prev=25):
    return StateVector(prev, 0.0, 0.0, 0, 0)


@pytest.fixture
def traj10():
    cfg = small_config(horizon=10)
    return run_trajectory(ScriptedPolicy("cycle", values=[5, 6, 7]), init_env(cfg), window=3)


class TestPrompt:
    def test_empty_history(self, config):
        p = build_prompt(Trajectory([], "x", 0, config), s(), 8)
        assert "Recent history" not in p and "Current state (step 0)" in p and "[1, 49]" in p

    def test_window(self, traj10):
        p = build_prompt(traj10, s(), 3)
        assert [f"[step {i}]" in p for i in range(10)] == [False] * 7 + [True] * 3

    def test_deterministic(self, traj10):
        assert build_prompt(traj10, s(), 4) == build_prompt(traj10, s(), 4)

    def test_injective_on_text(self, traj10):
        import dataclasses
        e = traj10.entries[-1]
        t2 = Trajectory(traj10.entries[:-1] + [dataclasses.replace(e, reflection=e.reflection + "\n  action: 3")],
                        traj10.scenario_id, traj10.seed, traj10.config)
        assert build_prompt(t2, s(), 3) != build_prompt(traj10, s(), 3)

    def test_bad_window(self, traj10):
        with pytest.raises(ValueError):
            build_prompt(traj10, s(), 0)

    def test_bounded_length(self):
        cfg = small_config(horizon=60)
        traj = run_trajectory(ScriptedPolicy("hold"), init_env(cfg), window=4)
        lengths = [len(e.prompt) for e in traj.entries[10:]]
        assert max(lengths) - min(lengths) < 200


class TestLoop:
    def test_constant(self):
        traj = run_trajectory(ScriptedPolicy("constant", value=12), init_env(small_config(horizon=5)))
        assert len(traj) == 5 and [e.action for e in traj.entries] == [12] * 5
        assert sum(e.feedback.reconfigured for e in traj.entries) == 0

    def test_malformed_falls_back(self, config):
        env = init_env(config)
        traj = run_trajectory(ScriptedPolicy("malformed"), env, retries=2)
        assert len(traj) == config.horizon
        assert all(e.fallback and e.attempts == 3 for e in traj.entries)
        assert {e.action for e in traj.entries} == {env.initial_allocation}

    def test_out_of_bounds_retry_then_ok(self, config):
        outs = iter([render_output("", 0, ""), render_output("", 99, ""), render_output("r", 9, "a")] * 50)
        traj = run_trajectory(ScriptedPolicy(lambda p, c: next(outs)), init_env(config), retries=2)
        assert all(e.action == 9 and e.attempts == 3 and not e.fallback for e in traj.entries)

    def test_causality(self, traj10):
        for e in traj10.entries:
            assert e.prompt == build_prompt(traj10, e.state, 3, upto=e.step)
            assert e.step == traj10.entries.index(e)

    def test_determinism_toy(self):
        def go():
            cfg = small_config(horizon=15)
            return run_trajectory(ToySoftmaxPolicy.for_config(cfg, act_temperature=1.0, seed=4), init_env(cfg))
        a, b = go(), go()
        assert a.entries == b.entries

    def test_transport_abort_keeps_partial(self, config):
        n = {"k": 0}

        def rule(prompt, c):
            n["k"] += 1
            if n["k"] > 4:
                raise TransportError("down")
            return c.prev_action

        with pytest.raises(TrajectoryAborted) as exc:
            run_trajectory(ScriptedPolicy(rule), init_env(config))
        assert len(exc.value.trajectory.entries) == 4
        assert not exc.value.trajectory.complete

    def test_rebuild_matches(self, traj10):
        env = rebuild_env(traj10)
        assert env.history == traj10.feedbacks


class TestPersist:
    def test_roundtrip(self, traj10, tmp_path):
        path = tmp_path / "t.jsonl"
        persist_trajectory(traj10, path)
        assert load_trajectory(path) == traj10

    def test_roundtrip_with_drops(self, tmp_path):
        from conftest import overload_config
        cfg = overload_config(horizon=6, queue_capacity=2000)
        traj = run_trajectory(ScriptedPolicy("constant", value=1), init_env(cfg))
        assert any(e.feedback.dropped_bytes for e in traj.entries)
        persist_trajectory(traj, tmp_path / "t.jsonl")
        assert load_trajectory(tmp_path / "t.jsonl") == traj

    def test_truncated(self, traj10, tmp_path):
        path = tmp_path / "t.jsonl"
        persist_trajectory(traj10, path)
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:-2]))
        with pytest.raises(FormatError, match="line"):
            load_trajectory(path)

    def test_unknown_fields_ignored(self, traj10, tmp_path):
        path = tmp_path / "t.jsonl"
        persist_trajectory(traj10, path)
        recs = [json.loads(x) for x in path.read_text().splitlines()]
        for r in recs:
            r["added_later"] = {"x": 1}
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        assert load_trajectory(path) == traj10

    def test_garbage_line(self, traj10, tmp_path):
        path = tmp_path / "t.jsonl"
        persist_trajectory(traj10, path)
        lines = path.read_text().splitlines(keepends=True)
        lines[4] = "{not json\n"
        path.write_text("".join(lines))
        with pytest.raises(FormatError, match="line 5"):
            load_trajectory(path)

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.integers(1, 49), min_size=1, max_size=8))
    def test_roundtrip_property(self, actions):
        import tempfile, os
        cfg = small_config(horizon=len(actions))
        traj = run_trajectory(ScriptedPolicy("cycle", values=actions), init_env(cfg))
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "t.jsonl")
            persist_trajectory(traj, p)
            assert load_trajectory(p) == traj
