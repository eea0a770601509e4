"""Adversarial perturbations of the agent's scaled state observation.

The attack loss is the softmax cross-entropy between the agent's action
values and a one-hot label on the currently preferred action; perturbing
along its gradient pushes the agent off that action. Gradients come from the
target network itself (white box), from symmetric finite differences of
queried action values (black box), or from a separately trained surrogate
agent (transfer). Random sign and uniform noise serve as baselines.

All functions accept a single state ``(7,)`` or a batch ``(n, 7)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from . import numerics as nx
from .envsim import STATE_DIM

METHODS = ("none", "fgsm_linf", "fgsm_l1", "fgsm_l2", "random_sign", "uniform")
GRADIENT_METHODS = ("fgsm_linf", "fgsm_l1", "fgsm_l2")
NOISE_METHODS = ("random_sign", "uniform")
GRADIENT_SOURCES = ("analytic_target", "finite_difference", "surrogate")
DEFAULT_FD_DELTA = 1e-4
L2_FLAT_TOL = 1e-12


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    method: str = "none"
    gradient_source: str = "analytic_target"
    epsilon: float = 0.0
    delta: float = DEFAULT_FD_DELTA
    clip_to_unit_box: bool = False
    seed: int = 0
    surrogate_id: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gradient_source not in GRADIENT_SOURCES:
            raise AttackConfigError(f"unknown gradient_source {self.gradient_source!r}")
        if not self.epsilon >= 0:
            raise AttackConfigError("epsilon must be >= 0")
        if not self.delta > 0:
            raise AttackConfigError("delta must be > 0")
        if self.gradient_source == "surrogate" and self.method in GRADIENT_METHODS and not self.surrogate_id:
            raise AttackConfigError("surrogate gradient source needs a surrogate_id")

    @property
    def needs_gradient(self) -> bool:
        return self.method in GRADIENT_METHODS

    @property
    def source_label(self) -> str:
        """Gradient source as written to reports; noise and ``none`` have no source."""
        if not self.needs_gradient:
            return "none"
        if self.gradient_source == "surrogate":
            return f"surrogate:{self.surrogate_id}"
        return self.gradient_source

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise AttackConfigError(f"unknown attack keys {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class PerturbedState:
    original: np.ndarray
    perturbed: np.ndarray
    gradient_used: np.ndarray | None = None
    queries_spent: int | np.ndarray = 0
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.original


# --- loss and gradients ---------------------------------------------------

def adversarial_label(q) -> np.ndarray:
    """One-hot on the highest action value (lowest index on ties)."""
    q = np.asarray(q, dtype=np.float64)
    y = np.zeros_like(q)
    np.put_along_axis(y, np.argmax(q, axis=-1)[..., None], 1.0, axis=-1)
    return y


def attack_loss(q_fn: Callable, s, label=None, s_fixed=None):
    """Cross-entropy of ``softmax(q_fn(s))`` against a label fixed at ``s_fixed`` (default ``s``)."""
    s = np.asarray(s, dtype=np.float64)
    if label is None:
        label = adversarial_label(q_fn(s if s_fixed is None else np.asarray(s_fixed, dtype=np.float64)))
    return nx.cross_entropy(nx.softmax(q_fn(s)), label)


def analytic_grad(agent, s, label=None) -> np.ndarray:
    """Exact input gradient of the attack loss for an agent exposing ``loss_input_gradient``."""
    s = np.asarray(s, dtype=np.float64)
    if label is None:
        label = adversarial_label(agent.decision_function(s))
    return agent.loss_input_gradient(s, label)


def central_difference(fn: Callable, s, delta: float = DEFAULT_FD_DELTA) -> np.ndarray:
    """``(fn(s + delta e_i) - fn(s - delta e_i)) / (2 delta)`` for every coordinate.

    ``fn`` maps an ``(m, d)`` array to ``m`` scalars and is called once.
    """
    s = np.asarray(s, dtype=np.float64)
    s2 = np.atleast_2d(s)
    n, d = s2.shape
    probes = _probes(s2, delta)
    vals = np.asarray(fn(probes.reshape(n * 2 * d, d)), dtype=np.float64).reshape(n, 2, d)
    g = (vals[:, 0, :] - vals[:, 1, :]) / (2.0 * delta)
    return g[0] if s.ndim == 1 else g


def _probes(s2: np.ndarray, delta: float) -> np.ndarray:
    n, d = s2.shape
    eye = np.eye(d) * delta
    plus = s2[:, None, :] + eye[None, :, :]
    minus = s2[:, None, :] - eye[None, :, :]
    return np.stack([plus, minus], axis=1)  # (n, 2, d, d)


class QueryCounter:
    """Wraps a black-box action-value oracle and counts state queries."""

    def __init__(self, query: Callable):
        self.query = query
        self.count = 0

    def __call__(self, states):
        states = np.atleast_2d(states)
        self.count += states.shape[0]
        return self.query(states)


def fd_grad(query: Callable, s, delta: float = DEFAULT_FD_DELTA):
    """Black-box gradient of the attack loss from ``2d`` action-value queries per state.

    The label comes from the mean of the probe responses: for a locally linear
    network this equals the action values at ``s`` itself, so no extra query is
    needed. The label is then held fixed across all probes.
    Returns ``(gradient, queries_per_state)``.
    """
    if not delta > 0:
        raise AttackConfigError("delta must be > 0")
    s = np.asarray(s, dtype=np.float64)
    s2 = np.atleast_2d(s)
    n, d = s2.shape
    counter = QueryCounter(query)
    q = np.asarray(counter(_probes(s2, delta).reshape(n * 2 * d, d)), dtype=np.float64)
    q = q.reshape(n, 2, d, -1)
    label = adversarial_label(q.mean(axis=(1, 2)))
    loss = nx.cross_entropy(nx.softmax(q), np.broadcast_to(label[:, None, None, :], q.shape))
    g = (loss[:, 0, :] - loss[:, 1, :]) / (2.0 * delta)
    per_state = counter.count // n
    return (g[0] if s.ndim == 1 else g), per_state, (label[0] if s.ndim == 1 else label)


# --- perturbation rules ---------------------------------------------------

def _finish(s, out, clip):
    return np.clip(out, 0.0, 1.0) if clip else out


def perturb_linf(s, g, epsilon: float, clip: bool = False) -> np.ndarray:
    """FGSM: move every coordinate by ``epsilon`` along the gradient sign (``sign(0) = 0``)."""
    s = np.asarray(s, dtype=np.float64)
    return _finish(s, s + epsilon * np.sign(g), clip)


def perturb_l1(s, g, epsilon: float, clip: bool = False) -> np.ndarray:
    """Spend the whole ``epsilon * d`` budget on the coordinate with the largest gradient magnitude."""
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = s.shape[-1]
    g2 = np.atleast_2d(g)
    i_star = np.argmax(np.abs(g2), axis=-1)
    step = np.zeros_like(g2)
    rows = np.arange(g2.shape[0])
    step[rows, i_star] = epsilon * d * np.sign(g2[rows, i_star])
    return _finish(s, s + step.reshape(g.shape), clip)


def perturb_l2(s, g, epsilon: float, clip: bool = False) -> np.ndarray:
    """Move ``epsilon * sqrt(d)`` along the normalized gradient; flat gradients leave ``s`` unchanged."""
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = s.shape[-1]
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    flat = norm < L2_FLAT_TOL
    unit = np.where(flat, 0.0, g / np.where(flat, 1.0, norm))
    return _finish(s, s + epsilon * np.sqrt(d) * unit, clip)


def _draw(rng, shape, draw_fn):
    """``rng`` is one Generator for the whole batch or one Generator per row."""
    if isinstance(rng, np.random.Generator):
        return draw_fn(rng, shape)
    rows = [draw_fn(r, shape[-1:]) for r in rng]
    return np.stack(rows).reshape(shape)


def random_sign_noise(s, epsilon: float, rng, clip: bool = False) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    signs = _draw(rng, s.shape, lambda r, shp: np.where(r.random(shp) < 0.5, -1.0, 1.0))
    return _finish(s, s + epsilon * signs, clip)


def uniform_noise(s, epsilon: float, rng, clip: bool = False) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    u = _draw(rng, s.shape, lambda r, shp: r.uniform(-1.0, 1.0, size=shp))
    return _finish(s, s + epsilon * u, clip)


PERTURB_RULES = {"fgsm_linf": perturb_linf, "fgsm_l1": perturb_l1, "fgsm_l2": perturb_l2}


def apply_attack(config: AttackConfig, target_agent, s, surrogate_agent=None,
                 rng: np.random.Generator | Sequence[np.random.Generator] | None = None) -> PerturbedState:
    """Compute the adversarial observation the agent will see instead of ``s``."""
    s = np.asarray(s, dtype=np.float64)
    n_rows = 1 if s.ndim == 1 else s.shape[0]
    zero_q = 0 if s.ndim == 1 else np.zeros(n_rows, dtype=np.int64)
    if config.method == "none" or (config.epsilon == 0 and config.method in NOISE_METHODS):
        return PerturbedState(s.copy(), s.copy(), None, zero_q)
    if config.method in NOISE_METHODS:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        fn = random_sign_noise if config.method == "random_sign" else uniform_noise
        return PerturbedState(s.copy(), fn(s, config.epsilon, rng, config.clip_to_unit_box), None, zero_q)

    queries = zero_q
    if config.gradient_source == "analytic_target":
        label = adversarial_label(target_agent.decision_function(s))
        g = target_agent.loss_input_gradient(s, label)
    elif config.gradient_source == "finite_difference":
        g, per_state, label = fd_grad(target_agent.decision_function, s, config.delta)
        queries = per_state if s.ndim == 1 else np.full(n_rows, per_state, dtype=np.int64)
    else:
        if surrogate_agent is None:
            raise AttackConfigError(f"gradient source surrogate:{config.surrogate_id} but no surrogate agent given")
        label = adversarial_label(surrogate_agent.decision_function(s))
        g = surrogate_agent.loss_input_gradient(s, label)
    rule = PERTURB_RULES[config.method]
    return PerturbedState(s.copy(), rule(s, g, config.epsilon, config.clip_to_unit_box), g, queries, label)


class StateAttack(TransformerMixin, BaseEstimator):
    """Transformer that replaces state vectors with their adversarial counterparts.

    >>> attack = StateAttack(target=agent, method="fgsm_l2", epsilon=0.05)  # doctest: +SKIP
    >>> S_adv = attack.fit_transform(S)                                      # doctest: +SKIP
    """

    def __init__(self, target=None, method="fgsm_linf", epsilon=0.02, gradient_source="analytic_target",
                 surrogate=None, surrogate_id=None, delta=DEFAULT_FD_DELTA, clip_to_unit_box=False,
                 random_state=0):
        self.target = target
        self.method = method
        self.epsilon = epsilon
        self.gradient_source = gradient_source
        self.surrogate = surrogate
        self.surrogate_id = surrogate_id
        self.delta = delta
        self.clip_to_unit_box = clip_to_unit_box
        self.random_state = random_state

    def _config(self) -> AttackConfig:
        sid = self.surrogate_id
        if self.gradient_source == "surrogate" and sid is None:
            sid = getattr(self.surrogate, "kind", "surrogate")
        return AttackConfig(method=self.method, gradient_source=self.gradient_source, epsilon=self.epsilon,
                            delta=self.delta, clip_to_unit_box=self.clip_to_unit_box,
                            seed=self.random_state, surrogate_id=sid)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        if self.config_.needs_gradient and self.gradient_source != "surrogate" and self.target is None:
            raise AttackConfigError("gradient attacks need a target agent")
        if self.config_.needs_gradient and self.gradient_source == "surrogate" and self.surrogate is None:
            raise AttackConfigError("surrogate gradient source needs a surrogate agent")
        self.rng_ = np.random.default_rng(self.random_state)
        self.n_features_in_ = STATE_DIM
        return self

    def attack(self, X, rng=None) -> PerturbedState:
        if not hasattr(self, "config_"):
            self.fit()
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        return apply_attack(self.config_, self.target, X, self.surrogate, rng if rng is not None else self.rng_)

    def transform(self, X, rng=None) -> np.ndarray:
        return self.attack(X, rng).perturbed
