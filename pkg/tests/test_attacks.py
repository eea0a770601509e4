import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ems_adversary import attacks as at
from ems_adversary import numerics as nx
from ems_adversary.agents import DqnAgent, IqnAgent, untrained_like

unit_vec = arrays(np.float64, 7, elements=st.floats(0, 1))
grad_vec = arrays(np.float64, 7, elements=st.floats(-1e3, 1e3))
eps_val = st.floats(0, 0.2)


@pytest.fixture(scope="module")
def dqn():
    return untrained_like(DqnAgent(random_state=3))


@pytest.fixture(scope="module")
def iqn():
    return untrained_like(IqnAgent(random_state=4))


class QuadraticOracle:
    """q_j(s) = s^T A_j s + b_j . s: central differences of a quadratic are exact."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.A = rng.normal(size=(5, 7, 7))
        self.b = rng.normal(size=(5, 7))

    def __call__(self, S):
        S = np.atleast_2d(S)
        return np.einsum("ni,jik,nk->nj", S, self.A, S) + S @ self.b.T


class TestNormBudgets:
    @settings(max_examples=300, deadline=None)
    @given(unit_vec, grad_vec, eps_val)
    def test_linf(self, s, g, eps):
        d = at.perturb_linf(s, g, eps) - s
        assert np.max(np.abs(d)) <= eps + 1e-12

    @settings(max_examples=300, deadline=None)
    @given(unit_vec, grad_vec, eps_val)
    def test_l1_single_coordinate(self, s, g, eps):
        d = at.perturb_l1(s, g, eps) - s
        nz = np.flatnonzero(np.abs(d) > 0)
        assert len(nz) <= 1
        if len(nz):
            assert abs(abs(d[nz[0]]) - 7 * eps) <= 1e-9

    @settings(max_examples=300, deadline=None)
    @given(unit_vec, grad_vec, eps_val)
    def test_l2_norm(self, s, g, eps):
        n = np.linalg.norm(at.perturb_l2(s, g, eps) - s)
        assert n <= 1e-9 or abs(n - eps * math.sqrt(7)) <= 1e-9

    @settings(max_examples=200, deadline=None)
    @given(unit_vec, grad_vec, st.floats(0.001, 0.2))
    def test_gradient_attacks_increase_linearized_loss(self, s, g, eps):
        for rule in (at.perturb_linf, at.perturb_l1, at.perturb_l2):
            assert g @ (rule(s, g, eps) - s) >= 0

    def test_linf_examples(self):
        s = np.full(7, 0.5)
        g = np.array([2, -1, 0, 0, 0, 0, 3.0])
        np.testing.assert_allclose(at.perturb_linf(s, g, 0.01), [0.51, 0.49, 0.5, 0.5, 0.5, 0.5, 0.51])

    def test_l1_example_and_ties(self):
        s = np.zeros(7)
        np.testing.assert_allclose(at.perturb_l1(s, [0, -5, 1, 0, 0, 0, 0], 0.01), [0, -0.07, 0, 0, 0, 0, 0])
        np.testing.assert_allclose(at.perturb_l1(s, [0, 4, -4, 0, 0, 0, 0], 0.01), [0, 0.07, 0, 0, 0, 0, 0])

    def test_l2_example_and_flat(self):
        s = np.zeros(7)
        np.testing.assert_allclose(at.perturb_l2(s, [3, 4, 0, 0, 0, 0, 0], 0.1),
                                   0.1 * math.sqrt(7) * np.array([0.6, 0.8, 0, 0, 0, 0, 0]))
        np.testing.assert_array_equal(at.perturb_l2(s, np.full(7, 1e-14), 0.1), s)

    def test_zero_epsilon_is_identity(self):
        s = np.random.default_rng(0).random(7)
        g = np.random.default_rng(1).normal(size=7)
        for rule in (at.perturb_linf, at.perturb_l1, at.perturb_l2):
            np.testing.assert_array_equal(rule(s, g, 0.0), s)

    def test_clip_keeps_unit_box(self):
        s = np.array([0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5])
        out = at.perturb_linf(s, [-1, 1, 1, 1, 1, 1, 1], 0.1, clip=True)
        assert out.min() >= 0 and out.max() <= 1

    def test_no_clip_by_default(self):
        s = np.zeros(7)
        assert at.perturb_linf(s, -np.ones(7), 0.1).min() == -0.1

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(2)
        S, G = rng.random((5, 7)), rng.normal(size=(5, 7))
        for rule in (at.perturb_linf, at.perturb_l1, at.perturb_l2):
            batch = rule(S, G, 0.03)
            for k in range(5):
                np.testing.assert_allclose(batch[k], rule(S[k], G[k], 0.03), atol=1e-15)


class TestNoise:
    def test_random_sign_statistics(self):
        rng = np.random.default_rng(0)
        s = np.zeros((100_000 // 7 + 1, 7))
        d = at.random_sign_noise(s, 0.05, rng)
        assert set(np.unique(np.abs(d))) == {0.05}
        assert abs((d > 0).mean() - 0.5) < 0.01

    def test_uniform_statistics(self):
        rng = np.random.default_rng(1)
        d = at.uniform_noise(np.zeros((100_000 // 7 + 1, 7)), 0.05, rng).ravel()
        assert np.abs(d).max() <= 0.05
        assert abs(d.mean()) < 0.05 * 0.01
        assert d.var() == pytest.approx(0.05**2 / 3, rel=0.02)

    def test_zero_epsilon(self):
        s = np.random.default_rng(0).random(7)
        np.testing.assert_array_equal(at.uniform_noise(s, 0.0, np.random.default_rng(0)), s)

    def test_seeded_reproducible(self):
        s = np.zeros(7)
        a = at.uniform_noise(s, 0.1, np.random.default_rng(5))
        b = at.uniform_noise(s, 0.1, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_per_row_generators(self):
        s = np.zeros((3, 7))
        rows = at.random_sign_noise(s, 0.1, [np.random.default_rng(k) for k in range(3)])
        np.testing.assert_array_equal(rows[1], at.random_sign_noise(np.zeros(7), 0.1, np.random.default_rng(1)))


class TestLossAndGradients:
    def test_label_on_ties_is_lowest(self):
        np.testing.assert_array_equal(at.adversarial_label([1.0, 3.0, 3.0, 0.0, 0.0]), [0, 1, 0, 0, 0])

    def test_analytic_matches_fd_oracle(self, dqn):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.random(7)
            y = at.adversarial_label(dqn.decision_function(s))
            g = at.analytic_grad(dqn, s)
            fd = np.array([(at.attack_loss(dqn.decision_function, s + h, y) -
                            at.attack_loss(dqn.decision_function, s - h, y)) / 2e-5
                           for h in np.eye(7) * 1e-5])
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)

    def test_label_held_fixed(self, dqn):
        s = np.random.default_rng(1).random(7)
        y0 = at.adversarial_label(dqn.decision_function(s))
        far = s + 5.0
        assert at.attack_loss(dqn.decision_function, far, s_fixed=s) == pytest.approx(
            nx.cross_entropy(nx.softmax(dqn.decision_function(far)), y0))

    def test_fd_exact_on_quadratic(self):
        q = QuadraticOracle()
        s = np.random.default_rng(3).random(7)
        # label and loss oracle built independently of fd_grad
        g, n_q, label = at.fd_grad(q, s, 1e-4)
        f = lambda x: nx.cross_entropy(nx.softmax(q(x)[0]), label)
        ref = np.array([(f(s + h) - f(s - h)) / 2e-4 for h in np.eye(7) * 1e-4])
        np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-12)
        assert n_q == 14

    def test_fd_queries_counted(self, dqn):
        counter = at.QueryCounter(dqn.decision_function)
        S = np.random.default_rng(4).random((10, 7))
        _, per_state, _ = at.fd_grad(counter, S)
        assert per_state == 14 and counter.count == 140

    def test_fd_label_matches_clean_argmax(self, dqn):
        S = np.random.default_rng(5).random((50, 7))
        _, _, labels = at.fd_grad(dqn.decision_function, S)
        np.testing.assert_array_equal(labels.argmax(1), dqn.predict(S))

    def test_fd_converges_as_delta_shrinks(self, dqn):
        S = np.random.default_rng(6).random((100, 7))
        exact = at.analytic_grad(dqn, S)
        errs = [np.median(np.linalg.norm(at.fd_grad(dqn.decision_function, S, d)[0] - exact, axis=1))
                for d in (1e-2, 1e-3, 1e-4)]
        assert errs[0] >= errs[1] >= errs[2]

    def test_central_difference_linear(self):
        w = np.arange(7.0)
        np.testing.assert_allclose(at.central_difference(lambda X: X @ w, np.zeros(7), 1e-3), w, atol=1e-9)

    def test_bad_delta(self):
        with pytest.raises(at.AttackConfigError):
            at.fd_grad(lambda X: X, np.zeros(7), 0.0)


class TestApplyAttack:
    def test_config_validation(self):
        with pytest.raises(at.AttackConfigError):
            at.AttackConfig(method="pgd")
        with pytest.raises(at.AttackConfigError):
            at.AttackConfig(method="fgsm_linf", epsilon=-0.1)
        with pytest.raises(at.AttackConfigError):
            at.AttackConfig(method="fgsm_l2", gradient_source="surrogate")
        with pytest.raises(at.AttackConfigError, match="bogus"):
            at.AttackConfig.from_dict({"bogus": 1})

    def test_config_json_round_trip(self):
        c = at.AttackConfig("fgsm_l1", "surrogate", 0.05, surrogate_id="dqn_b")
        assert at.AttackConfig.from_json(c.to_json()) == c
        assert c.source_label == "surrogate:dqn_b"
        assert at.AttackConfig("uniform", epsilon=0.1).source_label == "none"

    def test_none_is_identity(self, dqn):
        s = np.random.default_rng(0).random(7)
        out = at.apply_attack(at.AttackConfig(), dqn, s)
        np.testing.assert_array_equal(out.perturbed, s)

    def test_self_transfer_equals_white_box(self, dqn):
        S = np.random.default_rng(1).random((20, 7))
        white = at.apply_attack(at.AttackConfig("fgsm_linf", epsilon=0.02), dqn, S)
        self_t = at.apply_attack(at.AttackConfig("fgsm_linf", "surrogate", 0.02, surrogate_id="self"), dqn, S,
                                 surrogate_agent=dqn)
        assert white.perturbed.tobytes() == self_t.perturbed.tobytes()

    def test_surrogate_missing(self, dqn):
        with pytest.raises(at.AttackConfigError):
            at.apply_attack(at.AttackConfig("fgsm_l2", "surrogate", 0.02, surrogate_id="x"), dqn, np.zeros(7))

    def test_fd_reports_queries(self, dqn):
        out = at.apply_attack(at.AttackConfig("fgsm_linf", "finite_difference", 0.02), dqn,
                              np.random.default_rng(2).random((4, 7)))
        np.testing.assert_array_equal(out.queries_spent, [14] * 4)

    def test_iqn_surrogate_gradient_matches_fd(self, iqn):
        s = np.random.default_rng(3).random(7)
        y = at.adversarial_label(iqn.decision_function(s))
        g = iqn.loss_input_gradient(s, y)
        fd = at.central_difference(
            lambda X: nx.cross_entropy(nx.softmax(iqn.decision_function(X)), np.broadcast_to(y, (len(X), 5))),
            s, 1e-5)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-10)

    def test_attack_changes_no_more_than_budget(self, dqn):
        S = np.random.default_rng(4).random((30, 7))
        out = at.apply_attack(at.AttackConfig("fgsm_linf", epsilon=0.05), dqn, S)
        assert np.abs(out.delta).max() <= 0.05 + 1e-15

    def test_state_attack_transformer(self, dqn):
        S = np.random.default_rng(5).random((8, 7))
        tr = at.StateAttack(target=dqn, method="fgsm_l2", epsilon=0.05)
        out = tr.fit_transform(S)
        np.testing.assert_allclose(np.linalg.norm(out - S, axis=1), 0.05 * math.sqrt(7))
        assert tr.get_params()["method"] == "fgsm_l2"

    def test_state_attack_requires_target(self):
        with pytest.raises(at.AttackConfigError):
            at.StateAttack(method="fgsm_linf").fit()
