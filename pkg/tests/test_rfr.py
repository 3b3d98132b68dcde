import numpy as np
import pytest

from slicetune.errors import CapabilityError, OneSidedDatasetError
from slicetune.grammar import render_output, try_extract_action
from slicetune.kto import KtoConfig, export_dataset, load_dataset
from slicetune.metrics import StateVector
from slicetune.policy import ActContext, LlmEndpointConfig, LlmEndpointPolicy, ScriptedPolicy, ToySoftmaxPolicy
from slicetune.rfr import build_dataset_iteration, read_report_csv, rollout_refine, run_rfr

from conftest import hand_labeled, separable_rows

B = (1, 49)


def st(prev=20, delta=100, eps=0):
    return StateVector(prev, 1.5, 3e6, delta, eps)


def scripted_outputs(actions):
    it = iter(actions)
    return ScriptedPolicy(lambda p, c: next(it))


def oracle_of(lt):
    """Scripted policy answering every refined prompt with its improved action."""
    wanted = {e.prompt: e.improved_action for e in lt.entries if not e.label}
    return ScriptedPolicy(lambda prompt, c: wanted.get(prompt, c.prev_action))


class TestRollout:
    def test_direct_example(self):
        lt = hand_labeled([(st(), 12, 10)])
        ex, sat, p = rollout_refine(scripted_outputs([10, 8, 10, 12]), lt.entries[0], 4, 0.4, B)
        assert [e.label for e in ex] == [True, False, True, False]
        assert p == 0.5 and sat
        assert all(e.source == "rollout" for e in ex)

    def test_deterministic_at_target(self):
        lt = hand_labeled([(st(), 12, 10)])
        ex, sat, p = rollout_refine(oracle_of(lt), lt.entries[0], 4, 0.5, B)
        assert all(e.label for e in ex) and sat and p == 1.0

    def test_unparseable_is_negative(self):
        lt = hand_labeled([(st(), 12, 10)])
        ex, sat, _ = rollout_refine(ScriptedPolicy("malformed"), lt.entries[0], 3, 0.5, B)
        assert [e.label for e in ex] == [False] * 3 and not sat

    def test_exact_probability_for_toy(self):
        lt = hand_labeled([(st(prev=20), 20, 21)])
        _, sat, p = rollout_refine(ToySoftmaxPolicy(50), lt.entries[0], 4, 0.5, B)
        assert p == pytest.approx(0.2) and not sat

    def test_true_entry_rejected(self):
        lt = hand_labeled([(st(), 12, None)])
        with pytest.raises(ValueError):
            rollout_refine(ScriptedPolicy(), lt.entries[0], 4, 0.5, B)


class TestBuild:
    def test_all_true(self):
        lt = hand_labeled([(st(prev=10 + i), 10 + i, None) for i in range(10)])
        d = build_dataset_iteration(lt, ToySoftmaxPolicy(50), KtoConfig(), set())
        assert len(d.dataset) == 10 and all(e.label for e in d.dataset) and d.rolled_out == 0

    def test_counting_with_two_false(self):
        rows = [(st(prev=20), 20, None)] * 8 + [(st(prev=20), 20, 22), (st(prev=30), 31, 30)]
        lt = hand_labeled(rows)
        sat = set()
        d = build_dataset_iteration(lt, ToySoftmaxPolicy(50, seed=1), KtoConfig(m=4), sat)
        refl = [e for e in d.dataset if e.source == "reflector"]
        roll = [e for e in d.dataset if e.source == "rollout"]
        assert len(refl) == 12 and len(roll) == 8 and not sat
        synth = [e for e in refl if e.step in (8, 9) and e.label]
        assert [try_extract_action(e.completion, B) for e in synth] == [22, 30]

    def test_saturated_steps_skipped_next_iteration(self):
        rows = [(st(prev=20), 20, None), (st(prev=20), 20, 22), (st(prev=30), 31, 30)]
        lt = hand_labeled(rows)
        sat = set()
        pol = oracle_of(lt)
        d1 = build_dataset_iteration(lt, pol, KtoConfig(m=4), sat, 1)
        assert sat == {1, 2} and d1.rolled_out == 2
        d2 = build_dataset_iteration(lt, pol, KtoConfig(m=4), sat, 2)
        assert d2.rolled_out == 0 and not [e for e in d2.dataset if e.source == "rollout"]
        assert {e.iteration for e in d2.dataset} == {2}

    def test_malformed_reflector_completion_kept_verbatim(self):
        lt = hand_labeled([(st(), 20, None), (st(), 21, 19)])
        lt.entries[0] = lt.entries[0].__class__(**{**lt.entries[0].__dict__, "raw_output": "garbage"})
        d = build_dataset_iteration(lt, ToySoftmaxPolicy(50), KtoConfig(m=1), set())
        assert d.dataset[0].completion == "garbage"

    def test_export_roundtrip(self, tmp_path):
        lt = hand_labeled(separable_rows(12))
        d = build_dataset_iteration(lt, ToySoftmaxPolicy(50, seed=3), KtoConfig(), set())
        export_dataset(d.dataset, tmp_path / "d.jsonl")
        assert load_dataset(tmp_path / "d.jsonl") == d.dataset


class TestRunRfr:
    def test_single_positive_increases(self):
        lt = hand_labeled([(st(prev=20), 20, 21)])
        pol = ToySoftmaxPolicy(50)
        ctx = ActContext(st(prev=20), B)
        before = pol.action_prob("", ctx, 21)[0]
        run_rfr(pol, lt, KtoConfig(n=1))
        assert pol.action_prob("", ctx, 21)[0] > before

    def test_zero_learning_rate(self):
        lt = hand_labeled(separable_rows(16))
        pol = ToySoftmaxPolicy(50)
        _, rep = run_rfr(pol, lt, KtoConfig(n=2, learning_rate=0.0, steps_per_iteration=5))
        assert np.array_equal(pol.theta, np.zeros_like(pol.theta))
        for row in rep.rows:
            lam_mean = (row.n_pos * row.lambda_d + row.n_neg * row.lambda_u) / (row.n_pos + row.n_neg)
            assert row.loss == pytest.approx(0.5 * lam_mean, abs=1e-12)
        for s in rep.steps:
            row = rep.rows[s.iteration - 1]
            lam_mean = (row.n_pos * row.lambda_d + row.n_neg * row.lambda_u) / (row.n_pos + row.n_neg)
            assert s.loss == pytest.approx(0.5 * lam_mean, abs=1e-12)

    def test_llm_backend_refused(self):
        lt = hand_labeled([(st(), 20, 21)])
        pol = LlmEndpointPolicy(LlmEndpointConfig(base_url="http://127.0.0.1:9", model="m"))
        with pytest.raises(CapabilityError, match="export"):
            run_rfr(pol, lt, KtoConfig(n=1))

    def test_one_sided(self):
        lt = hand_labeled([(st(prev=20 + i), 20 + i, None) for i in range(4)])
        with pytest.raises(OneSidedDatasetError) as exc:
            run_rfr(ToySoftmaxPolicy(50), lt, KtoConfig(n=2))
        assert exc.value.report is not None and exc.value.n_neg == 0

    def test_report_invariants_and_csv(self, tmp_path):
        lt = hand_labeled(separable_rows(40))
        pol = ToySoftmaxPolicy(50, seed=2)
        _, rep = run_rfr(pol, lt, KtoConfig(n=4, steps_per_iteration=60, learning_rate=1.0))
        sat = [r.saturated for r in rep.rows]
        rolled = [r.rolled_out for r in rep.rows]
        assert sat == sorted(sat) and rolled == sorted(rolled, reverse=True)
        for r in rep.rows:
            assert r.lambda_d * r.n_pos == pytest.approx(r.lambda_u * r.n_neg)
        rep.write_csv(tmp_path / "r.csv")
        rows = read_report_csv(tmp_path / "r.csv")
        assert len(rows) == 4 and int(rows[-1]["saturated"]) == sat[-1]

    def test_reference_untouched(self):
        lt = hand_labeled(separable_rows(12))
        pol = ToySoftmaxPolicy(50, np.random.default_rng(0).normal(size=(5, 6)))
        frozen = pol.snapshot()
        probe = [(ActContext(s, B), render_output("", a, "")) for s, a, _ in separable_rows(12)]
        before = [frozen.logprob("", c, o) for c, o in probe]
        run_rfr(pol, lt, KtoConfig(n=2, steps_per_iteration=20))
        assert [frozen.logprob("", c, o) for c, o in probe] == before

    def test_minibatch_path(self):
        lt = hand_labeled(separable_rows(20))
        a, ra = run_rfr(ToySoftmaxPolicy(50), lt, KtoConfig(n=2, steps_per_iteration=10, batch_size=8, seed=3))
        b, rb = run_rfr(ToySoftmaxPolicy(50), lt, KtoConfig(n=2, steps_per_iteration=10, batch_size=8, seed=3))
        assert np.array_equal(a.theta, b.theta)

    @pytest.mark.parametrize("mode", ["initial", "iteration"])
    def test_reference_modes_run(self, mode):
        lt = hand_labeled(separable_rows(12))
        _, rep = run_rfr(ToySoftmaxPolicy(50), lt, KtoConfig(n=3, steps_per_iteration=10, reference_mode=mode))
        if mode == "iteration":
            assert all(abs(s.chosen_reward) < 1e-15 for s in rep.steps if s.step == 0)
