import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ems_adversary import agents as ag
from ems_adversary import numerics as nx
from ems_adversary.envsim import TripProfile


def short_trip(seconds=1800, power=14.0, seed=0, trip_id="short"):
    rng = np.random.default_rng(seed)
    t = np.arange(seconds + 1, dtype=float)
    odo = t * 40.0 / 3600
    p = np.full(seconds + 1, power) + rng.uniform(-2, 2, seconds + 1)
    p[0] = 0.0
    ang = 2 * np.pi * t / seconds
    return TripProfile(t, odo, p, 0.5 + 0.2 * np.cos(ang), 0.5 + 0.2 * np.sin(ang), trip_id)


TRIPS = [short_trip(seed=k, trip_id=f"s{k}") for k in range(3)]
SMALL = dict(n_episodes=6, n_envs=3, learning_starts=32, batch_size=16, buffer_size=500, target_sync=25)


@pytest.fixture(scope="module")
def dqn():
    return ag.DqnAgent(hidden_sizes=(16, 16), random_state=1, **SMALL).fit(TRIPS)


@pytest.fixture(scope="module")
def iqn():
    return ag.IqnAgent(embed_dim=16, n_cos=8, head_hidden=(16,), random_state=2, **SMALL).fit(TRIPS)


class TestReplayBuffer:
    def test_bound_and_fifo(self):
        buf = ag.ReplayBuffer(5, rng=0)
        for k in range(12):
            buf.add(np.full(7, k), k % 5, float(k), np.full(7, k + 1), False)
            assert len(buf) <= 5
        assert sorted(buf.r.tolist()) == [7.0, 8.0, 9.0, 10.0, 11.0]

    def test_batch_insert_and_sample(self):
        buf = ag.ReplayBuffer(100, rng=1)
        buf.add(np.zeros((10, 7)), np.arange(10) % 5, np.arange(10.0), np.ones((10, 7)), np.zeros(10))
        s, a, r, s2, d = buf.sample(32)
        assert s.shape == (32, 7) and set(r.tolist()) <= set(range(10))

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            ag.ReplayBuffer(0)


class TestHelpers:
    def test_argmax_lowest(self):
        assert ag.argmax_lowest([1.0, 3.0, 3.0]) == 1
        np.testing.assert_array_equal(ag.argmax_lowest([[0, 0], [1, 2]]), [0, 1])

    def test_linear_epsilon(self):
        assert ag.linear_epsilon(0.0, 1.0, 0.05, 0.5) == 1.0
        assert ag.linear_epsilon(0.25, 1.0, 0.05, 0.5) == pytest.approx(0.525)
        assert ag.linear_epsilon(0.9, 1.0, 0.05, 0.5) == 0.05

    def test_cosine_features(self):
        f = ag.cosine_features([0.0, 0.5], 3)
        np.testing.assert_allclose(f, [[1, 1, 1], [1, 0, -1]], atol=1e-15)

    def test_fixed_taus(self):
        np.testing.assert_allclose(ag.fixed_taus(4), [0.125, 0.375, 0.625, 0.875])


class TestDqn:
    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            ag.DqnAgent().predict(np.zeros(7))

    def test_q_values_shape_and_greedy(self, dqn):
        S = np.random.default_rng(0).random((9, 7))
        q = ag.q_values(dqn, S)
        assert q.shape == (9, 5)
        np.testing.assert_array_equal(dqn.predict(S), q.argmax(1))
        assert ag.greedy_action(dqn, S[0]) == int(q[0].argmax())

    def test_zero_network_ties_to_lowest(self):
        agent = ag.untrained_like(ag.DqnAgent(hidden_sizes=(4,)))
        for net in agent.networks().values():
            for p in net.params():
                p[...] = 0
        assert ag.greedy_action(agent, np.full(7, 0.3)) == 0

    def test_q_values_deterministic(self, dqn):
        s = np.random.default_rng(1).random(7)
        assert dqn.decision_function(s).tobytes() == dqn.decision_function(s).tobytes()

    def test_rejects_wrong_width(self, dqn):
        with pytest.raises(ValueError):
            dqn.predict(np.zeros(6))

    def test_learning_curve(self, dqn, tmp_path):
        curve = dqn.learning_curve_
        assert [c[0] for c in curve] == list(range(6))
        assert curve[-1][2] == pytest.approx(0.05)
        dqn.save_learning_curve(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "episode,score,epsilon"

    def test_fit_is_bit_reproducible(self, dqn):
        again = clone(dqn).fit(TRIPS)
        assert again.online_net_.equals(dqn.online_net_)
        assert json.dumps(ag.agent_to_dict(again)) == json.dumps(ag.agent_to_dict(dqn))

    def test_seed_changes_weights(self, dqn):
        other = ag.DqnAgent(hidden_sizes=(16, 16), random_state=9, **SMALL).fit(TRIPS)
        assert not other.online_net_.equals(dqn.online_net_)

    def test_target_sync_is_exact(self):
        agent = ag.DqnAgent(hidden_sizes=(8,), **{**SMALL, "target_sync": 10 ** 9, "n_episodes": 3})
        syncs = []

        class Spy(ag.DqnAgent):
            def _sync_target(self):
                super()._sync_target()
                syncs.append(self.target_net_.equals(self.online_net_))

        spy = Spy(**{**agent.get_params(), "target_sync": 7})
        spy.fit(TRIPS)
        assert syncs and all(syncs)
        assert len(syncs) == spy.n_updates_ // 7

    def test_loss_input_gradient_matches_fd(self, dqn):
        s = np.random.default_rng(2).random(7)
        y = np.eye(5)[1]
        f = lambda x: nx.cross_entropy(nx.softmax(dqn.decision_function(x)), y)
        fd = np.array([(f(s + h) - f(s - h)) / 2e-5 for h in np.eye(7) * 1e-5])
        np.testing.assert_allclose(dqn.loss_input_gradient(s, y), fd, rtol=1e-5, atol=1e-10)

    def test_functional_train(self):
        agent, curve = ag.dqn_train(ag.DqnAgent(hidden_sizes=(8,), **SMALL), TRIPS, seed=5)
        assert agent.random_state == 5 and len(curve) == 6

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            ag.DqnAgent(gamma=0.0, **SMALL).fit(TRIPS)


class TestIqn:
    def test_quantiles_shape(self, iqn):
        z = iqn.quantile_values(np.random.default_rng(0).random((3, 7)), [0.1, 0.5, 0.9])
        assert z.shape == (3, 3, 5)

    def test_q_is_mean_over_fixed_taus(self, iqn):
        s = np.random.default_rng(1).random(7)
        z = iqn.quantile_values(s, ag.fixed_taus(iqn.n_quantiles))[0]
        np.testing.assert_allclose(iqn.decision_function(s), z.mean(axis=0), atol=1e-15)

    def test_iqn_q_taus_validated(self, iqn):
        with pytest.raises(ValueError):
            ag.iqn_q(iqn, np.zeros(7), [1.5])
        assert ag.iqn_q(iqn, np.zeros(7), [0.0, 1.0]).shape == (5,)

    def test_loss_input_gradient_matches_fd(self, iqn):
        s = np.random.default_rng(2).random(7)
        y = np.eye(5)[3]
        f = lambda x: nx.cross_entropy(nx.softmax(iqn.decision_function(x)), y)
        fd = np.array([(f(s + h) - f(s - h)) / 2e-5 for h in np.eye(7) * 1e-5])
        np.testing.assert_allclose(iqn.loss_input_gradient(s, y), fd, rtol=1e-5, atol=1e-10)

    def test_parameter_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        net = ag.IqnNetwork.initialize(rng, embed_dim=6, n_cos=4, head_hidden=(5,))
        s = rng.random((2, 7))
        taus = rng.random((2, 3))
        dz = rng.normal(size=(2, 3, 5))

        def loss():
            return float((net.forward(s, taus)[0] * dz).sum())

        _, cache = net.forward(s, taus)
        _, grads = net.backward(cache, dz)
        for p, g in zip(net.params(), grads):
            flat = p.reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 5)):
                old = flat[i]
                flat[i] = old + 1e-6
                up = loss()
                flat[i] = old - 1e-6
                down = loss()
                flat[i] = old
                assert g.reshape(-1)[i] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-8)

    def test_fit_is_bit_reproducible(self, iqn):
        again = clone(iqn).fit(TRIPS)
        assert again.online_net_.equals(iqn.online_net_)


class TestBundles:
    def test_round_trip(self, dqn, iqn, tmp_path):
        for agent in (dqn, iqn):
            path = tmp_path / f"{agent.kind}.json"
            ag.save_agent(agent, path)
            back = ag.load_agent(path, expected_kind=agent.kind)
            S = np.random.default_rng(0).random((4, 7))
            assert back.decision_function(S).tobytes() == agent.decision_function(S).tobytes()
            assert back.get_params() == agent.get_params()

    def test_kind_mismatch(self, dqn, tmp_path):
        path = tmp_path / "dqn.json"
        ag.save_agent(dqn, path)
        with pytest.raises(ag.BundleError, match="expected 'iqn'"):
            ag.load_agent(path, expected_kind="iqn")

    def test_version_and_format(self, dqn, tmp_path):
        doc = ag.agent_to_dict(dqn)
        with pytest.raises(ag.BundleError, match="version"):
            ag.agent_from_dict({**doc, "version": 2})
        with pytest.raises(ag.BundleError):
            ag.agent_from_dict({**doc, "format": "other"})
        path = tmp_path / "junk.json"
        path.write_text("{not json")
        with pytest.raises(ag.BundleError, match="malformed"):
            ag.load_agent(path)

    def test_untrained_like(self, dqn):
        fresh = ag.untrained_like(dqn)
        assert fresh.n_updates_ == 0 and fresh.get_params() == dqn.get_params()
        assert not fresh.online_net_.equals(dqn.online_net_)
