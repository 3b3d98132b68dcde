import math

import numpy as np
import pytest

from slicetune.errors import CapabilityError, EndpointError, ParseError, TransportError
from slicetune.grammar import extract_triplet, render_output
from slicetune.metrics import StateVector
from slicetune.policy import (
    EXACT, ESTIMATED, ActContext, LlmEndpointConfig, LlmEndpointPolicy, MockChatServer,
    ScriptedPolicy, ToySoftmaxPolicy, empirical_action_prob,
)
from slicetune.policy.toy import N_FEATURES

B = (1, 49)


def ctx(prev=20, se=2.0, mu=1e6, delta=100, eps=0):
    return ActContext(StateVector(prev, se, mu, delta, eps), B)


@pytest.fixture
def toy():
    return ToySoftmaxPolicy(50, seed=5, act_temperature=0.0, rollout_temperature=1.0)


def random_toy(rng):
    return ToySoftmaxPolicy(50, rng.normal(size=(5, N_FEATURES)), seed=1)


class TestToy:
    def test_zero_theta_uniform(self, toy):
        c = ctx()
        for a in range(18, 23):
            assert toy.logprob("", c, render_output("x", a, "y")) == pytest.approx(math.log(0.2), abs=1e-15)
        assert toy.action_prob("", c, 20) == (pytest.approx(0.2), EXACT)

    def test_argmax_tie_lowest_index(self, toy):
        assert extract_triplet(toy.act("", ctx()), B).action == 18

    @pytest.mark.parametrize("seed", range(5))
    def test_normalized(self, seed):
        p = random_toy(np.random.default_rng(seed))
        c = ctx(prev=int(np.random.default_rng(seed).integers(1, 50)))
        total = sum(math.exp(p.logprob("", c, render_output("", a, ""))) for a in set(p.candidate_actions(c)))
        assert total == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("prev", [1, 2, 48, 49])
    def test_clamping_merges_mass(self, prev):
        p = random_toy(np.random.default_rng(prev))
        dist = p.action_distribution(ctx(prev=prev))
        assert len(dist) < 5
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
        assert all(B[0] <= a <= B[1] for a in dist)

    def test_closed_form_after_bump(self, toy):
        theta = np.zeros((5, N_FEATURES))
        theta[3, 0] = 1.0  # bias of the +1 move
        toy.theta = theta
        expected = math.e / (math.e + 4)
        assert math.exp(toy.logprob("", ctx(), render_output("", 21, ""))) == pytest.approx(expected, rel=1e-14)

    def test_template_text_ignored(self, toy):
        toy.theta = np.random.default_rng(0).normal(size=(5, N_FEATURES))
        c = ctx()
        a = toy.logprob("", c, render_output("one", 19, "two"))
        b = toy.logprob("other prompt", c, "  <analysis>z</analysis><action>19</action><reflection></reflection>")
        assert a == b

    def test_unparseable_logprob(self, toy):
        with pytest.raises(ParseError):
            toy.logprob("", ctx(), "nope")

    @pytest.mark.parametrize("draw", range(20))
    def test_logprob_gradient_fd(self, draw):
        rng = np.random.default_rng(100 + draw)
        p = random_toy(rng)
        c = ctx(prev=int(rng.integers(1, 50)), se=float(rng.uniform(0, 5)), mu=float(rng.uniform(0, 2e7)),
                delta=int(rng.integers(-1000, 1000)), eps=int(rng.integers(0, 2)) * 512)
        action = int(rng.choice(p.candidate_actions(c)))
        out = render_output("", action, "")
        g = p.logprob_grad(c, action)
        h = 1e-6
        fd = np.zeros_like(g)
        base = p.theta.copy()
        for idx in np.ndindex(g.shape):
            for sign in (1, -1):
                t = base.copy()
                t[idx] += sign * h
                p.theta = t
                fd[idx] += sign * p.logprob("", c, out) / (2 * h)
        p.theta = base
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))

    def test_sample_k_reproducible(self):
        a = ToySoftmaxPolicy(50, seed=9).sample_k("", ctx(), 4)
        b = ToySoftmaxPolicy(50, seed=9).sample_k("", ctx(), 4)
        assert sorted(a) == sorted(b)

    def test_m1_at_zero_temperature_equals_act(self):
        p = ToySoftmaxPolicy(50, np.random.default_rng(3).normal(size=(5, N_FEATURES)),
                             act_temperature=0.0, rollout_temperature=0.0)
        assert p.sample_k("", ctx(), 1) == [p.act("", ctx())]

    def test_frequencies_match_softmax(self):
        theta = np.zeros((5, N_FEATURES))
        theta[:, 0] = [-50, math.log(0.7), -50, math.log(0.3), -50]
        p = ToySoftmaxPolicy(50, theta, seed=2)
        outs = p.sample_k("", ctx(), 10_000)
        assert empirical_action_prob(outs, 19, B) == pytest.approx(0.7, abs=0.02)
        assert empirical_action_prob(outs, 21, B) == pytest.approx(0.3, abs=0.02)

    def test_snapshot_immutable(self, toy):
        toy.theta = np.random.default_rng(4).normal(size=(5, N_FEATURES))
        ref = toy.snapshot()
        c = ctx()
        outs = [render_output("", a, "") for a in toy.candidate_actions(c)]
        before = [ref.logprob("", c, o) for o in outs]
        assert before == [toy.logprob("", c, o) for o in outs]
        toy.theta = toy.theta + 1.0
        toy.theta[0, 0] = 9.0
        assert [ref.logprob("", c, o) for o in outs] == before
        with pytest.raises(CapabilityError):
            ref.theta = np.zeros((5, N_FEATURES))
        with pytest.raises(ValueError):
            ref.theta[0, 0] = 1.0

    def test_save_load(self, toy, tmp_path):
        toy.theta = np.random.default_rng(8).normal(size=(5, N_FEATURES))
        toy.save(tmp_path / "p.json")
        back = ToySoftmaxPolicy.load(tmp_path / "p.json")
        assert np.array_equal(back.theta, toy.theta) and back.deltas == toy.deltas

    def test_features(self):
        p = ToySoftmaxPolicy(50)
        x = p.features(StateVector(10, 2.0, 3e6, -5, 512))
        served = 2.0 * 10 * 180e3
        assert x.tolist() == pytest.approx([1, 0.2, 2.0 / 5.5547, -1, 3e6 / (3e6 + served), 1])
        assert p.features(StateVector(10, 0.0, 0.0, 0, 0))[4] == 0.0


class TestScripted:
    def test_hold(self):
        p = ScriptedPolicy("hold")
        assert extract_triplet(p.act("", ctx(prev=17)), B).action == 17

    def test_constant_and_cycle(self):
        assert extract_triplet(ScriptedPolicy("constant", value=9).act("", ctx()), B).action == 9
        cyc = ScriptedPolicy("cycle", values=[3, 4])
        assert [extract_triplet(cyc.act("", ctx()), B).action for _ in range(3)] == [3, 4, 3]

    def test_no_logprob(self):
        with pytest.raises(CapabilityError):
            ScriptedPolicy().logprob("", ctx(), "x")
        with pytest.raises(CapabilityError):
            ScriptedPolicy().snapshot()

    def test_estimated_prob(self):
        outs = [render_output("", a, "") for a in (10, 8, 10, 12)]
        it = iter(outs)
        p = ScriptedPolicy(lambda prompt, c: next(it))
        assert p.action_prob("", ctx(), 10, m=4) == (0.5, ESTIMATED)
        with pytest.raises(ValueError):
            p.action_prob("", ctx(), 10, m=0)


def endpoint(url, **kw):
    return LlmEndpointPolicy(LlmEndpointConfig(base_url=url, model="m", backoff=0.0, timeout=5, **kw))


class TestEndpoint:
    def test_verbatim_and_request_shape(self, monkeypatch):
        monkeypatch.setenv("SLICETUNE_API_KEY", "sekret")
        text = "<reflection>r</reflection>\n<action>7</action><analysis>a</analysis>  "
        with MockChatServer([text]) as srv:
            p = endpoint(srv.url)
            assert p.act("hello", ctx()) == text
            assert p.act("hello", ctx()) == text
        req = srv.requests[0]
        assert req["model"] == "m" and req["temperature"] == 0.0
        assert req["messages"][-1] == {"role": "user", "content": "hello"}
        assert req["_headers"]["authorization"] == "Bearer sekret"
        assert srv.requests[0] == srv.requests[1]

    def test_sample_k_rollout_temperature(self):
        with MockChatServer(["a", "b", "c"]) as srv:
            outs = endpoint(srv.url).sample_k("p", ctx(), 3)
        assert outs == ["a", "b", "c"]
        assert {r["temperature"] for r in srv.requests} == {0.8}

    def test_non_2xx(self):
        with MockChatServer(lambda body: (503, "overloaded, try later")) as srv:
            with pytest.raises(EndpointError) as exc:
                endpoint(srv.url).act("p", ctx())
        assert exc.value.status == 503 and "overloaded" in str(exc.value)

    def test_transport_failure_after_retries(self):
        with MockChatServer(["x"]) as srv:
            url = srv.url
        with pytest.raises(TransportError):
            endpoint(url, max_retries=1).act("p", ctx())

    def test_retry_then_success(self):
        import httpx
        calls = []

        def handler(request):
            calls.append(request)
            if len(calls) < 3:
                raise httpx.ConnectError("refused")
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        from slicetune.policy import ChatClient
        cfg = LlmEndpointConfig(base_url="http://x", model="m", backoff=0.0, max_retries=2)
        p = LlmEndpointPolicy(cfg, ChatClient(cfg, transport=httpx.MockTransport(handler)))
        assert p.act("p", ctx()) == "ok" and len(calls) == 3

    def test_no_exact_logprob(self):
        p = endpoint("http://127.0.0.1:9")
        assert not p.capabilities.has_exact_logprob
        with pytest.raises(CapabilityError):
            p.logprob("", ctx(), "x")

    @pytest.mark.parametrize("kw", [dict(act_temperature=-1), dict(timeout=0), dict(base_url="")])
    def test_config_validation(self, kw):
        from slicetune.errors import ConfigError
        args = dict(base_url="http://x", model="m")
        args.update(kw)
        with pytest.raises(ConfigError):
            LlmEndpointConfig(**args)
