"""Value-based agents for the L_set decision process: a DQN target and an IQN surrogate.

Both follow the scikit-learn estimator protocol: hyperparameters live in
``__init__``, :meth:`fit` trains on a list of trips, :meth:`predict` maps
scaled state vectors to greedy action indices and :meth:`decision_function`
returns the action values.

Training runs several trips in lockstep (``n_envs``) so the 1 Hz physics is
vectorized; each transition still enters the replay buffer individually.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import numerics as nx
from .envsim import (
    DEFAULT_DECISION_INTERVAL,
    N_ACTIONS,
    STATE_DIM,
    FleetEnv,
    RewardParams,
    VehicleParams,
    n_decisions,
)

BUNDLE_FORMAT = "ems-adversary-agent"
BUNDLE_VERSION = 1


class BundleError(ValueError):
    """Agent file has the wrong format, version or agent kind."""


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, rng=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, state_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(rng)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, done) -> None:
        """Insert one transition or a batch (leading axis); oldest entries are overwritten."""
        s = np.atleast_2d(s)
        a, r, done = np.atleast_1d(a), np.atleast_1d(r), np.atleast_1d(done)
        s_next = np.atleast_2d(s_next)
        for k in range(s.shape[0]):
            i = self.pos
            self.s[i], self.a[i], self.r[i] = s[k], a[k], r[k]
            self.s_next[i], self.done[i] = s_next[k], float(done[k])
            self.pos = (self.pos + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int):
        idx = self.rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]


def argmax_lowest(q) -> np.ndarray | int:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    q = np.asarray(q)
    out = np.argmax(q, axis=-1)
    return int(out) if out.ndim == 0 else out


def linear_epsilon(progress: float, start: float, end: float, fraction: float) -> float:
    if fraction <= 0 or progress >= fraction:
        return end
    return start + (end - start) * progress / fraction


class _ValueAgent(BaseEstimator):
    """Shared training loop; subclasses supply the network, the update and the action values."""

    kind = "value"

    def _check_states(self, X) -> np.ndarray:
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != STATE_DIM:
            raise ValueError(f"expected {STATE_DIM} state features, got {X.shape[1]}")
        return X

    def _check_fitted(self):
        if not hasattr(self, "n_updates_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit(trips) first")

    def _env_params(self):
        vp = self.vehicle_params if self.vehicle_params is not None else VehicleParams()
        rp = self.reward_params if self.reward_params is not None else RewardParams()
        return vp, rp

    def predict(self, X) -> np.ndarray:
        """Greedy action indices (ties go to the lowest index)."""
        return argmax_lowest(self.decision_function(X))

    def score(self, trips, y=None) -> float:
        """Mean undiscounted clean episode return over ``trips``."""
        from .harness import evaluate_fleet

        return evaluate_fleet(self, None, trips).mean_score

    # -- training loop ----------------------------------------------------
    def fit(self, trips, y=None):
        trips = list(trips)
        if not trips:
            raise ValueError("need at least one training trip")
        vp, rp = self._env_params()
        root = np.random.SeedSequence(self.random_state)
        init_seq, explore_seq, replay_seq, extra_seq = root.spawn(4)
        self._init_networks(np.random.default_rng(init_seq))
        self._rng_extra = np.random.default_rng(extra_seq)
        explore = np.random.default_rng(explore_seq)
        buf = ReplayBuffer(self.buffer_size, rng=np.random.default_rng(replay_seq))
        scale = float(self.reward_scale)
        mean_len = float(np.mean([n_decisions(t, self.decision_interval) for t in trips]))
        total_decisions = self.n_episodes * mean_len
        n_envs = max(1, min(self.n_envs, self.n_episodes))
        curve = []
        decisions = 0
        self.n_updates_ = 0
        episode = 0
        cursor = 0
        while episode < self.n_episodes:
            batch_n = min(n_envs, self.n_episodes - episode)
            batch = [trips[(cursor + k) % len(trips)] for k in range(batch_n)]
            cursor = (cursor + batch_n) % len(trips)
            env = FleetEnv(batch, vp, rp, self.decision_interval)
            obs = env.reset()
            scores = np.zeros(batch_n)
            eps = 1.0
            while not env.done.all():
                live = ~env.done
                eps = linear_epsilon(decisions / total_decisions, self.eps_start, self.eps_end, self.eps_fraction)
                greedy = self.predict(obs) if self.n_updates_ or len(buf) else np.zeros(batch_n, dtype=np.int64)
                explore_mask = explore.random(batch_n) < eps
                random_a = explore.integers(0, N_ACTIONS, size=batch_n)
                actions = np.where(explore_mask, random_a, greedy)
                out = env.step(actions)
                nxt = env.observe()
                rows = np.flatnonzero(live)
                buf.add(obs[rows], actions[rows], out["reward"][rows] * scale, nxt[rows], out["done"][rows])
                scores += out["reward"]
                decisions += rows.size
                obs = nxt
                if len(buf) >= max(self.batch_size, self.learning_starts):
                    for _ in range(self.gradient_steps):
                        self._update(buf)
                        self.n_updates_ += 1
                        if self.n_updates_ % self.target_sync == 0:
                            self._sync_target()
            for k in range(batch_n):
                curve.append((episode + k, float(scores[k]), float(eps)))
            episode += batch_n
        self.learning_curve_ = curve
        self._finalize(scale)
        del self._rng_extra
        return self

    def save_learning_curve(self, path) -> None:
        self._check_fitted()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "score", "epsilon"])
            for ep, sc, eps in self.learning_curve_:
                w.writerow([ep, repr(sc), repr(eps)])


class DqnAgent(_ValueAgent):
    """Deep Q-network with experience replay and a periodically synced target network.

    The network is trained on rewards multiplied by ``reward_scale``; after
    training the output layer is divided by the same factor so action values
    are expected returns in reward units.
    """

    kind = "dqn"

    def __init__(self, hidden_sizes=(64, 64), gamma=0.99, learning_rate=1e-3, batch_size=64,
                 buffer_size=100_000, target_sync=1000, eps_start=1.0, eps_end=0.05, eps_fraction=0.5,
                 n_episodes=520, n_envs=13, gradient_steps=4, learning_starts=1000, reward_scale=100.0,
                 max_grad_norm=10.0, decision_interval=DEFAULT_DECISION_INTERVAL,
                 vehicle_params=None, reward_params=None, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.target_sync = target_sync
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_fraction = eps_fraction
        self.n_episodes = n_episodes
        self.n_envs = n_envs
        self.gradient_steps = gradient_steps
        self.learning_starts = learning_starts
        self.reward_scale = reward_scale
        self.max_grad_norm = max_grad_norm
        self.decision_interval = decision_interval
        self.vehicle_params = vehicle_params
        self.reward_params = reward_params
        self.random_state = random_state

    def _init_networks(self, rng):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        widths = [STATE_DIM, *self.hidden_sizes, N_ACTIONS]
        self.online_net_ = nx.DenseNetwork.initialize(widths, rng)
        self.target_net_ = self.online_net_.copy()
        self._adam = nx.AdamState(self.online_net_.params())

    def _sync_target(self):
        self.target_net_.load_params_from(self.online_net_)

    def _update(self, buf: ReplayBuffer):
        s, a, r, s2, done = buf.sample(self.batch_size)
        q_next = nx.predict(self.target_net_, s2).max(axis=1)
        target = r + self.gamma * (1.0 - done) * q_next
        _, grads = nx.parameter_gradient(self.online_net_, s, lambda q: nx.squared_td_loss(q, a, target))
        nx.clip_grad_norm(grads, self.max_grad_norm)
        nx.adam_step(self.online_net_.params(), grads, self._adam, lr=self.learning_rate)

    def _finalize(self, scale):
        for net in (self.online_net_, self.target_net_):
            net.weights[-1] /= scale
            net.biases[-1] /= scale
        del self._adam

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        squeeze = np.ndim(X) == 1
        q = nx.predict(self.online_net_, self._check_states(X))
        return q[0] if squeeze else q

    def loss_input_gradient(self, X, Y) -> np.ndarray:
        """Per-row gradient of ``cross_entropy(softmax(q(x)), y)`` with respect to ``x``."""
        self._check_fitted()
        return nx.input_gradient(self.online_net_, np.asarray(X, dtype=np.float64), Y)

    def networks(self) -> dict:
        return {"online": self.online_net_, "target": self.target_net_}


# --- IQN -----------------------------------------------------------------

def cosine_features(taus, n_cos: int) -> np.ndarray:
    """``cos(pi * i * tau)`` for ``i = 0..n_cos-1``; output shape ``taus.shape + (n_cos,)``."""
    taus = np.asarray(taus, dtype=np.float64)
    return np.cos(np.pi * np.arange(n_cos) * taus[..., None])


def fixed_taus(k: int) -> np.ndarray:
    """Equally spaced quantile levels ``(i - 0.5) / k`` used for deterministic action values."""
    return (np.arange(1, k + 1) - 0.5) / k


class IqnNetwork:
    """State embedding and cosine tau embedding merged by a Hadamard product, then a dense head."""

    def __init__(self, state_embed: nx.DenseNetwork, tau_embed: nx.DenseNetwork, head: nx.DenseNetwork):
        if state_embed.output_width != tau_embed.output_width or head.input_width != state_embed.output_width:
            raise nx.ShapeError("state and tau embeddings must share the head's input width")
        self.state_embed = state_embed
        self.tau_embed = tau_embed
        self.head = head

    @property
    def n_cos(self) -> int:
        return self.tau_embed.input_width

    @classmethod
    def initialize(cls, rng, embed_dim=64, n_cos=64, head_hidden=(64,)):
        se = nx.DenseNetwork.initialize([STATE_DIM, embed_dim], rng, output_activation="relu")
        te = nx.DenseNetwork.initialize([n_cos, embed_dim], rng, output_activation="relu")
        head = nx.DenseNetwork.initialize([embed_dim, *head_hidden, N_ACTIONS], rng)
        return cls(se, te, head)

    def params(self):
        return self.state_embed.params() + self.tau_embed.params() + self.head.params()

    def copy(self):
        return IqnNetwork(self.state_embed.copy(), self.tau_embed.copy(), self.head.copy())

    def load_params_from(self, other):
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def equals(self, other) -> bool:
        return all(a.equals(b) for a, b in zip(
            (self.state_embed, self.tau_embed, self.head), (other.state_embed, other.tau_embed, other.head)))

    def forward(self, states, taus):
        """``states`` (n, 7), ``taus`` (n, m) or (m,) -> quantile values (n, m, n_actions)."""
        states = np.atleast_2d(states)
        n = states.shape[0]
        taus = np.asarray(taus, dtype=np.float64)
        if taus.ndim == 1:
            taus = np.broadcast_to(taus, (n, taus.shape[0]))
        if np.any(taus < 0) or np.any(taus > 1):
            raise ValueError("quantile levels must lie in [0, 1]")
        m = taus.shape[1]
        psi, c_state = nx.forward(self.state_embed, states)
        phi, c_tau = nx.forward(self.tau_embed, cosine_features(taus, self.n_cos).reshape(n * m, -1))
        merged = (psi[:, None, :] * phi.reshape(n, m, -1)).reshape(n * m, -1)
        z, c_head = nx.forward(self.head, merged)
        cache = (psi, phi, c_state, c_tau, c_head, n, m)
        return z.reshape(n, m, -1), cache

    def backward(self, cache, dz):
        """From ``dL/dz`` (n, m, n_actions) to ``(dL/dstates, param grads)``."""
        psi, phi, c_state, c_tau, c_head, n, m = cache
        d_merged, g_head = nx.backward(self.head, c_head, dz.reshape(n * m, -1))
        d_merged = d_merged.reshape(n, m, -1)
        phi3 = phi.reshape(n, m, -1)
        d_psi = (d_merged * phi3).sum(axis=1)
        d_phi = (d_merged * psi[:, None, :]).reshape(n * m, -1)
        d_states, g_state = nx.backward(self.state_embed, c_state, d_psi)
        _, g_tau = nx.backward(self.tau_embed, c_tau, d_phi)
        return d_states, g_state + g_tau + g_head

    def to_dict(self):
        return {"state_embed": self.state_embed.to_dict(), "tau_embed": self.tau_embed.to_dict(),
                "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        return cls(nx.DenseNetwork.from_dict(doc["state_embed"]), nx.DenseNetwork.from_dict(doc["tau_embed"]),
                   nx.DenseNetwork.from_dict(doc["head"]))


class IqnAgent(_ValueAgent):
    """Implicit quantile network. Action values average ``n_quantiles`` fixed, equally spaced taus."""

    kind = "iqn"

    def __init__(self, embed_dim=64, n_cos=64, head_hidden=(64,), n_tau=8, n_tau_prime=8, n_quantiles=32,
                 huber_kappa=1.0, gamma=0.99, learning_rate=1e-3, batch_size=64, buffer_size=100_000,
                 target_sync=1000, eps_start=1.0, eps_end=0.05, eps_fraction=0.5, n_episodes=520, n_envs=13,
                 gradient_steps=4, learning_starts=1000, reward_scale=100.0, max_grad_norm=10.0,
                 decision_interval=DEFAULT_DECISION_INTERVAL, vehicle_params=None, reward_params=None,
                 random_state=0):
        self.embed_dim = embed_dim
        self.n_cos = n_cos
        self.head_hidden = head_hidden
        self.n_tau = n_tau
        self.n_tau_prime = n_tau_prime
        self.n_quantiles = n_quantiles
        self.huber_kappa = huber_kappa
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.target_sync = target_sync
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_fraction = eps_fraction
        self.n_episodes = n_episodes
        self.n_envs = n_envs
        self.gradient_steps = gradient_steps
        self.learning_starts = learning_starts
        self.reward_scale = reward_scale
        self.max_grad_norm = max_grad_norm
        self.decision_interval = decision_interval
        self.vehicle_params = vehicle_params
        self.reward_params = reward_params
        self.random_state = random_state

    def _init_networks(self, rng):
        if self.n_quantiles < 1:
            raise ValueError("n_quantiles must be >= 1")
        self.online_net_ = IqnNetwork.initialize(rng, self.embed_dim, self.n_cos, tuple(self.head_hidden))
        self.target_net_ = self.online_net_.copy()
        self._adam = nx.AdamState(self.online_net_.params())

    def _sync_target(self):
        self.target_net_.load_params_from(self.online_net_)

    def _update(self, buf: ReplayBuffer):
        s, a, r, s2, done = buf.sample(self.batch_size)
        b = self.batch_size
        rng = self._rng_extra
        taus = rng.random((b, self.n_tau))
        taus_next = rng.random((b, self.n_tau_prime))
        q_next, _ = self.target_net_.forward(s2, fixed_taus(self.n_quantiles))
        a_next = argmax_lowest(q_next.mean(axis=1))
        z_next, _ = self.target_net_.forward(s2, taus_next)
        z_next = z_next[np.arange(b), :, a_next]
        target = r[:, None] + self.gamma * (1.0 - done[:, None]) * z_next
        z, cache = self.online_net_.forward(s, taus)
        z_a = z[np.arange(b), :, a]
        _, dz_a = nx.quantile_huber_loss(z_a, taus, target, self.huber_kappa)
        dz = np.zeros_like(z)
        dz[np.arange(b), :, a] = dz_a
        _, grads = self.online_net_.backward(cache, dz)
        nx.clip_grad_norm(grads, self.max_grad_norm)
        nx.adam_step(self.online_net_.params(), grads, self._adam, lr=self.learning_rate)

    def _finalize(self, scale):
        for net in (self.online_net_, self.target_net_):
            net.head.weights[-1] /= scale
            net.head.biases[-1] /= scale
        del self._adam

    def quantile_values(self, X, taus) -> np.ndarray:
        self._check_fitted()
        z, _ = self.online_net_.forward(self._check_states(X), taus)
        return z

    def decision_function(self, X, taus=None) -> np.ndarray:
        squeeze = np.ndim(X) == 1
        taus = fixed_taus(self.n_quantiles) if taus is None else np.asarray(taus, dtype=np.float64)
        q = self.quantile_values(X, taus).mean(axis=1)
        return q[0] if squeeze else q

    def loss_input_gradient(self, X, Y) -> np.ndarray:
        """Gradient of ``cross_entropy(softmax(mean_tau Z_tau(x)), y)`` through the fixed-tau mean."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        taus = fixed_taus(self.n_quantiles)
        z, cache = self.online_net_.forward(np.atleast_2d(X), taus)
        dq = nx.softmax_ce_output_grad(z.mean(axis=1), np.atleast_2d(Y))
        dz = np.broadcast_to(dq[:, None, :] / len(taus), z.shape)
        g, _ = self.online_net_.backward(cache, dz)
        return g[0] if squeeze else g

    def networks(self) -> dict:
        return {"online": self.online_net_, "target": self.target_net_}


# --- functional surface -------------------------------------------------

def q_values(agent, s) -> np.ndarray:
    return agent.decision_function(s)


def greedy_action(agent, s) -> int | np.ndarray:
    return agent.predict(s) if np.ndim(s) > 1 else int(agent.predict(np.atleast_2d(s))[0])


def iqn_q(agent: IqnAgent, s, taus) -> np.ndarray:
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    if np.any(taus < 0) or np.any(taus > 1):
        raise ValueError("quantile levels must lie in [0, 1]")
    return agent.decision_function(s, taus=taus)


def dqn_train(agent: DqnAgent, trips, seed=None) -> tuple[DqnAgent, list]:
    if seed is not None:
        agent.set_params(random_state=seed)
    agent.fit(trips)
    return agent, agent.learning_curve_


def iqn_train(agent: IqnAgent, trips, seed=None) -> IqnAgent:
    if seed is not None:
        agent.set_params(random_state=seed)
    return agent.fit(trips)


# --- bundles -------------------------------------------------------------

def _params_to_json(agent) -> dict:
    out = {}
    for k, v in agent.get_params(deep=False).items():
        if isinstance(v, (VehicleParams, RewardParams)):
            v = {"__type__": type(v).__name__, **asdict(v)}
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _params_from_json(doc: dict) -> dict:
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict) and v.get("__type__") in ("VehicleParams", "RewardParams"):
            cls = VehicleParams if v["__type__"] == "VehicleParams" else RewardParams
            v = cls(**{kk: vv for kk, vv in v.items() if kk != "__type__"})
        elif isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def agent_to_dict(agent) -> dict:
    agent._check_fitted()
    nets = agent.networks()
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "kind": agent.kind,
        "hyper": _params_to_json(agent),
        "n_updates": agent.n_updates_,
        "networks": {k: v.to_dict() for k, v in nets.items()},
    }


def agent_from_dict(doc: dict, expected_kind: str | None = None):
    if doc.get("format") != BUNDLE_FORMAT:
        raise BundleError("not an agent bundle")
    if doc.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported agent bundle version {doc.get('version')!r} (expected {BUNDLE_VERSION})")
    kind = doc.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise BundleError(f"bundle holds a {kind!r} agent, expected {expected_kind!r}")
    cls = {"dqn": DqnAgent, "iqn": IqnAgent}.get(kind)
    if cls is None:
        raise BundleError(f"unknown agent kind {kind!r}")
    agent = cls(**_params_from_json(doc["hyper"]))
    net_cls = nx.DenseNetwork if kind == "dqn" else IqnNetwork
    agent.online_net_ = net_cls.from_dict(doc["networks"]["online"])
    agent.target_net_ = net_cls.from_dict(doc["networks"]["target"])
    agent.n_updates_ = int(doc["n_updates"])
    return agent


def save_agent(agent, path) -> None:
    Path(path).write_text(json.dumps(agent_to_dict(agent)) + "\n")


def load_agent(path, expected_kind: str | None = None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: malformed agent file ({exc})") from None
    if not isinstance(doc, dict):
        raise BundleError(f"{path}: malformed agent file")
    return agent_from_dict(doc, expected_kind)


def untrained_like(agent):
    """Same hyperparameters, freshly initialized networks and no training."""
    fresh = type(agent)(**agent.get_params(deep=False))
    root = np.random.SeedSequence(fresh.random_state)
    fresh._init_networks(np.random.default_rng(root.spawn(1)[0]))
    del fresh._adam
    fresh.n_updates_ = 0
    return fresh


def expected_decisions(trips, decision_interval=DEFAULT_DECISION_INTERVAL) -> int:
    return int(math.fsum(n_decisions(t, decision_interval) for t in trips))
