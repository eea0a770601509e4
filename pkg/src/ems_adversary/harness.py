"""Adversary-in-the-loop evaluation: episodes, fleet scores, epsilon sweeps and forensic traces.

The adversary only rewrites what the agent observes. The environment keeps
integrating the true state, so rewards, fuel and SOC are always physical.
"""
from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .attacks import NOISE_METHODS, AttackConfig, apply_attack
from .envsim import ACTIONS, FleetEnv, load_trips

DEFAULT_EPSILONS = (0.005, 0.01, 0.02, 0.05, 0.1)
SWEEP_COLUMNS = ("method", "grad_source", "epsilon", "repeat", "mean_score", "mean_fuel_l",
                 "mean_min_soc", "frac_soc_violation")
CLEAN = AttackConfig()


def method_key(config: AttackConfig) -> int:
    return zlib.crc32(f"{config.method}|{config.source_label}".encode())


def trip_key(trip) -> int:
    return zlib.crc32(trip.trip_id.encode())


def worker_rng(master_seed: int, trip, repeat: int, config: AttackConfig) -> np.random.Generator:
    """Independent stream per (master seed, trip, repeat, method); epsilon shares the stream."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), trip_key(trip), int(repeat),
                                                         method_key(config)]))


@dataclass
class EpisodeTrace:
    trip_id: str
    steps: dict
    score: float
    fuel_l: float
    min_soc: float
    end_soc: float

    STEP_SCALARS = ("t_s", "d_mi", "soc", "fuel_l", "l_set", "action", "l_set_after", "reward", "engine_on_s",
                    "queries")

    @property
    def n_steps(self) -> int:
        return len(self.steps["reward"])

    def to_csv(self, path=None) -> str:
        cols = list(self.STEP_SCALARS)
        vec_cols = [("state", 7), ("perturbed", 7), ("q_clean", len(ACTIONS)), ("q_perturbed", len(ACTIONS))]
        header = ["step", *cols] + [f"{name}_{i}" for name, width in vec_cols for i in range(width)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for k in range(self.n_steps):
            row = [k] + [_fmt(self.steps[c][k]) for c in cols]
            for name, _ in vec_cols:
                row.extend(_fmt(v) for v in self.steps[name][k])
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class FleetResult:
    trip_ids: list
    scores: np.ndarray
    fuel_l: np.ndarray
    min_soc: np.ndarray
    end_soc: np.ndarray
    soc_violation: np.ndarray
    queries: np.ndarray
    traces: list | None = None

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))

    @property
    def mean_fuel(self) -> float:
        return float(np.mean(self.fuel_l))

    @property
    def mean_min_soc(self) -> float:
        return float(np.mean(self.min_soc))

    @property
    def frac_violation(self) -> float:
        return float(np.mean(self.soc_violation))


def _agent_env(agent):
    vp, rp = agent._env_params()
    return vp, rp, agent.decision_interval


def rollout(agent, attack: AttackConfig | None, trips, surrogate=None, rngs=None, record=False) -> FleetResult:
    """Run every trip to completion in lockstep with the attack applied at every decision."""
    attack = attack or CLEAN
    trips = list(trips)
    vp, rp, interval = _agent_env(agent)
    env = FleetEnv(trips, vp, rp, interval)
    n = env.n
    if rngs is None:
        rngs = [worker_rng(attack.seed, tr, 0, attack) for tr in trips]
    scores = np.zeros(n)
    queries = np.zeros(n, dtype=np.int64)
    logs = [{k: [] for k in (*EpisodeTrace.STEP_SCALARS, "state", "perturbed", "q_clean", "q_perturbed")}
            for _ in range(n)] if record else None
    while not env.done.all():
        rows = np.flatnonzero(~env.done)
        obs = env.observe()[rows]
        pert = apply_attack(attack, agent, obs, surrogate, rng=[rngs[r] for r in rows])
        q_pert = agent.decision_function(pert.perturbed)
        chosen = np.argmax(q_pert, axis=1)
        actions = np.full(n, ACTIONS.index(0.0), dtype=np.int64)
        actions[rows] = chosen
        queries[rows] += pert.queries_spent
        if record:
            before = {int(r): env.state(int(r)) for r in rows}
            q_clean = agent.decision_function(obs) if attack.method != "none" else q_pert
        out = env.step(actions)
        scores += out["reward"]
        if record:
            for j, r in enumerate(rows):
                st = before[int(r)]
                log = logs[r]
                log["t_s"].append(st.t_travel)
                log["d_mi"].append(st.d)
                log["soc"].append(st.soc)
                log["fuel_l"].append(st.fuel)
                log["l_set"].append(st.l_set)
                log["action"].append(int(chosen[j]))
                log["l_set_after"].append(float(env.l_set[r]))
                log["reward"].append(float(out["reward"][r]))
                log["engine_on_s"].append(int(out["t_f"][r]))
                log["queries"].append(int(np.atleast_1d(pert.queries_spent)[j]))
                log["state"].append(obs[j])
                log["perturbed"].append(pert.perturbed[j])
                log["q_clean"].append(q_clean[j])
                log["q_perturbed"].append(q_pert[j])
    soc = env.soc
    traces = None
    if record:
        traces = []
        for r, tr in enumerate(trips):
            steps = {k: np.asarray(v) for k, v in logs[r].items()}
            traces.append(EpisodeTrace(tr.trip_id, steps, float(scores[r]), float(env.fuel[r]),
                                       float(env.min_soc[r]), float(soc[r])))
    return FleetResult([t.trip_id for t in trips], scores, env.fuel.copy(), env.min_soc.copy(), soc.copy(),
                       env.soc_violation.copy(), queries, traces)


def run_episode(agent, attack: AttackConfig | None, trip, seed: int = 0, surrogate=None, repeat: int = 0) -> EpisodeTrace:
    attack = attack or CLEAN
    rng = worker_rng(seed, trip, repeat, attack)
    return rollout(agent, attack, [trip], surrogate, rngs=[rng], record=True).traces[0]


def evaluate_fleet(agent, attack: AttackConfig | None, trips, seed: int = 0, surrogate=None, repeat: int = 0,
                   record: bool = False) -> FleetResult:
    attack = attack or CLEAN
    trips = list(trips)
    if not trips:
        raise ValueError("need at least one trip")
    rngs = [worker_rng(seed, tr, repeat, attack) for tr in trips]
    return rollout(agent, attack, trips, surrogate, rngs=rngs, record=record)


# --- sweeps --------------------------------------------------------------

@dataclass
class ExperimentPlan:
    agent_path: str | None = None
    trips_path: str | None = None
    surrogate_paths: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: [AttackConfig(method=m) for m in
                                                   ("fgsm_linf", "fgsm_l1", "fgsm_l2", "random_sign", "uniform")])
    epsilons: tuple = DEFAULT_EPSILONS
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        eps = list(self.epsilons)
        if any(e < 0 for e in eps) or eps != sorted(eps):
            raise ValueError("epsilons must be nonnegative and ascending")
        self.methods = [m if isinstance(m, AttackConfig) else AttackConfig.from_dict(m) for m in self.methods]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [m.to_dict() for m in self.methods]
        d["epsilons"] = list(self.epsilons)
        return d


@dataclass(frozen=True)
class SweepRecord:
    method: str
    grad_source: str
    epsilon: float
    repeat: int
    mean_score: float
    mean_fuel_l: float
    mean_min_soc: float
    frac_soc_violation: float

    def key(self):
        return (self.method, self.grad_source, self.epsilon, self.repeat)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    grad_source: str
    epsilon: float
    mean_score: float
    std_score: float
    mean_fuel_l: float
    mean_min_soc: float
    frac_soc_violation: float
    repeats: int


def _is_stochastic(config: AttackConfig) -> bool:
    return config.method in NOISE_METHODS and config.epsilon > 0


def _cell(agent, config, trips, seed, repeat, surrogate) -> SweepRecord:
    res = evaluate_fleet(agent, config, trips, seed=seed, surrogate=surrogate, repeat=repeat)
    return SweepRecord(config.method, config.source_label, float(config.epsilon), repeat, res.mean_score,
                       res.mean_fuel, res.mean_min_soc, res.frac_violation)


def run_sweep(agent, trips, methods, epsilons=DEFAULT_EPSILONS, repeats: int = 10, seed: int = 0,
              surrogates: dict | None = None, n_jobs: int = 1) -> list[SweepRecord]:
    """One record per (method, gradient source, epsilon, repeat), sorted by that key.

    Attacks without randomness give identical repeats, so they are evaluated
    once and the record is replicated.
    """
    surrogates = surrogates or {}
    trips = list(trips)
    tasks = []
    for template in methods:
        for eps in epsilons:
            cfg = template.replace(epsilon=float(eps))
            sur = surrogates.get(cfg.surrogate_id) if cfg.needs_gradient and cfg.gradient_source == "surrogate" else None
            if cfg.needs_gradient and cfg.gradient_source == "surrogate" and sur is None:
                raise ValueError(f"no surrogate agent named {cfg.surrogate_id!r}")
            n_eval = repeats if _is_stochastic(cfg) else 1
            for rep in range(n_eval):
                tasks.append((cfg, rep, sur))
    if n_jobs == 1:
        results = [_cell(agent, cfg, trips, seed, rep, sur) for cfg, rep, sur in tasks]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(_cell)(agent, cfg, trips, seed, rep, sur) for cfg, rep, sur in tasks)
    records = []
    for (cfg, rep, _), rec in zip(tasks, results):
        if _is_stochastic(cfg):
            records.append(rec)
        else:
            records.extend(SweepRecord(**{**asdict(rec), "repeat": r}) for r in range(repeats))
    return sorted(records, key=SweepRecord.key)


def summarize(records) -> list[SummaryRow]:
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.method, rec.grad_source, rec.epsilon), []).append(rec)
    rows = []
    for (method, source, eps), recs in sorted(groups.items()):
        scores = np.array([r.mean_score for r in recs])
        rows.append(SummaryRow(
            method, source, eps, float(scores.mean()), float(scores.std()),
            float(np.mean([r.mean_fuel_l for r in recs])), float(np.mean([r.mean_min_soc for r in recs])),
            float(np.mean([r.frac_soc_violation for r in recs])), len(recs)))
    return rows


def sweep(plan: ExperimentPlan, agent=None, trips=None, surrogates=None, n_jobs: int = 1) -> list[SweepRecord]:
    """Run ``plan``; agents and trips default to the files the plan points at."""
    from .agents import load_agent

    if agent is None:
        agent = load_agent(plan.agent_path)
    if trips is None:
        trips = load_trips(plan.trips_path)
    if surrogates is None:
        surrogates = {k: load_agent(p) for k, p in plan.surrogate_paths.items()}
    return run_sweep(agent, trips, plan.methods, plan.epsilons, plan.repeats, plan.seed, surrogates, n_jobs)


def transfer_sweep(target, surrogates: dict, trips, epsilons=DEFAULT_EPSILONS, methods=("fgsm_linf", "fgsm_l1", "fgsm_l2"),
                   seed: int = 0, n_jobs: int = 1) -> list[SweepRecord]:
    """White-box rows plus one row set per surrogate, each crafted on the surrogate's own gradient."""
    templates = [AttackConfig(method=m) for m in methods]
    for sid in surrogates:
        templates += [AttackConfig(method=m, gradient_source="surrogate", surrogate_id=sid) for m in methods]
    return run_sweep(target, trips, templates, epsilons, repeats=1, seed=seed, surrogates=surrogates, n_jobs=n_jobs)


def write_sweep_csv(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in records:
        w.writerow([r.method, r.grad_source, repr(r.epsilon), r.repeat, repr(r.mean_score), repr(r.mean_fuel_l),
                    repr(r.mean_min_soc), repr(r.frac_soc_violation)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_sweep_csv(path) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(SWEEP_COLUMNS)}")
        return [SweepRecord(r["method"], r["grad_source"], float(r["epsilon"]), int(r["repeat"]),
                            float(r["mean_score"]), float(r["mean_fuel_l"]), float(r["mean_min_soc"]),
                            float(r["frac_soc_violation"])) for r in rd]


def summary_lookup(rows) -> dict:
    return {(r.method, r.grad_source, r.epsilon): r for r in rows}


# --- snapshots -----------------------------------------------------------

def action_value_snapshot(agent, s, s_perturbed, state_id: str = "state") -> dict:
    q = np.asarray(agent.decision_function(np.asarray(s, dtype=np.float64)))
    qp = np.asarray(agent.decision_function(np.asarray(s_perturbed, dtype=np.float64)))
    return {
        "state_id": state_id,
        "q_clean": [float(v) for v in q],
        "q_perturbed": [float(v) for v in qp],
        "action_clean": int(np.argmax(q)),
        "action_perturbed": int(np.argmax(qp)),
    }


def flipped_snapshots(agent, trace: EpisodeTrace, limit: int = 2) -> list[dict]:
    """Snapshots for the first decisions where the attack changed the greedy action."""
    out = []
    for k in range(trace.n_steps):
        if np.argmax(trace.steps["q_clean"][k]) != np.argmax(trace.steps["q_perturbed"][k]):
            out.append(action_value_snapshot(agent, trace.steps["state"][k], trace.steps["perturbed"][k],
                                             state_id=f"{trace.trip_id}:step{k}"))
            if len(out) >= limit:
                break
    return out


def write_snapshots(snapshots, path) -> None:
    Path(path).write_text(json.dumps(snapshots, indent=1) + "\n")
