"""Command-line entry point: ``ems-adversary {gen-trips,train,sweep,trace,report}``.

Every command reads one JSON run config (``--config``); flags override the
file. Outputs are pure functions of (config, flags), so reruns are
byte-identical. Failures print a single ``error: ...`` line to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from html import escape
from pathlib import Path

from . import agents as ag
from . import envsim as ev
from . import harness as hs
from .attacks import AttackConfig

DEFAULT_METHODS = ("fgsm_linf", "fgsm_l1", "fgsm_l2", "random_sign", "uniform")
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved run configuration; file values first, command-line flags on top."""

    seed: int = 0
    trips: str = "trips"
    out: str = "out"
    trip_count: int = 52
    distance_range: tuple = (38.0, 57.0)
    intensity_range: tuple = (0.91, 1.44)
    env: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    agent_path: str | None = None
    surrogates: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: [{"method": m} for m in DEFAULT_METHODS])
    epsilons: list = field(default_factory=lambda: list(hs.DEFAULT_EPSILONS))
    repeats: int = 10
    jobs: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if not isinstance(cfg.seed, int):
            raise UsageError("seed must be an integer")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def env_params(self):
        return ev.env_params_from_dict(self.env)

    def attack_templates(self) -> list[AttackConfig]:
        return [m if isinstance(m, AttackConfig) else AttackConfig.from_dict(m) for m in self.methods]


# --- commands ------------------------------------------------------------

def cmd_gen_trips(cfg: RunConfig, stdout=sys.stdout) -> list[ev.TripProfile]:
    if cfg.trip_count < 1:
        raise UsageError("trip count must be >= 1")
    trips = ev.synthesize_trips(cfg.seed, cfg.trip_count, tuple(cfg.distance_range), tuple(cfg.intensity_range))
    ev.save_trips(trips, cfg.trips)
    print(f"{'trip_id':<10} {'miles':>7} {'kWh/mi':>7} {'kWh':>7} {'hours':>6}", file=stdout)
    for row in ev.trip_summary(trips):
        print(f"{row['trip_id']:<10} {row['distance_mi']:7.2f} {row['intensity_kwh_mi']:7.3f} "
              f"{row['energy_kwh']:7.2f} {row['duration_h']:6.2f}", file=stdout)
    return trips


def _load_fleet(cfg: RunConfig) -> list[ev.TripProfile]:
    if not Path(cfg.trips).exists():
        raise UsageError(f"trip path does not exist: {cfg.trips}")
    trips = ev.load_trips(cfg.trips)
    if not trips:
        raise UsageError(f"no trips found in {cfg.trips}")
    return trips


def cmd_train(cfg: RunConfig, algo: str, stdout=sys.stdout):
    """Train a ``dqn`` or ``iqn`` agent; writes ``<out>/<algo>.json`` and ``<out>/<algo>_curve.csv``."""
    classes = {"dqn": ag.DqnAgent, "iqn": ag.IqnAgent}
    if algo not in classes:
        raise UsageError(f"unknown algorithm {algo!r}; choose dqn or iqn")
    trips = _load_fleet(cfg)
    vp, rp = cfg.env_params()
    # shared keys at the top level, per-algorithm keys under "dqn" / "iqn"
    merged = {**{k: v for k, v in cfg.agent.items() if k not in classes}, **cfg.agent.get(algo, {})}
    hyper = {k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()}
    try:
        agent = classes[algo](**{**hyper, "vehicle_params": vp, "reward_params": rp, "random_state": cfg.seed})
    except TypeError as exc:
        raise UsageError(f"bad agent hyperparameters: {exc}") from None
    agent.fit(trips)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ag.save_agent(agent, out / f"{algo}.json")
    agent.save_learning_curve(out / f"{algo}_curve.csv")
    score = agent.score(trips)
    print(f"trained {algo} seed={cfg.seed} updates={agent.n_updates_} clean_mean_score={score:.6f}", file=stdout)
    return agent


def _load_target(cfg: RunConfig):
    if not cfg.agent_path:
        raise UsageError("no agent bundle given (agent_path in config or --agent)")
    return ag.load_agent(cfg.agent_path)


def cmd_sweep(cfg: RunConfig, stdout=sys.stdout) -> list[hs.SweepRecord]:
    agent = _load_target(cfg)
    trips = _load_fleet(cfg)
    surrogates = {k: ag.load_agent(p) for k, p in cfg.surrogates.items()}
    plan = hs.ExperimentPlan(cfg.agent_path, cfg.trips, dict(cfg.surrogates), cfg.attack_templates(),
                             tuple(cfg.epsilons), cfg.repeats, cfg.seed)
    records = hs.sweep(plan, agent=agent, trips=trips, surrogates=surrogates, n_jobs=cfg.jobs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    hs.write_sweep_csv(records, out / "sweep.csv")
    clean = agent.score(trips)
    (out / "sweep.svg").write_text(sweep_svg(hs.summarize(records), clean))
    for row in hs.summarize(records):
        print(f"{row.method:<12} {row.grad_source:<20} eps={row.epsilon:<6g} mean={row.mean_score:.5f} "
              f"std={row.std_score:.5f}", file=stdout)
    return records


def cmd_trace(cfg: RunConfig, trip_id: str, stdout=sys.stdout) -> hs.EpisodeTrace:
    agent = _load_target(cfg)
    trips = _load_fleet(cfg)
    by_id = {t.trip_id: t for t in trips}
    if trip_id not in by_id:
        raise UsageError(f"unknown trip id {trip_id!r}; available: {','.join(by_id)}")
    templates = cfg.attack_templates()
    if len(templates) != 1:
        raise UsageError("trace needs exactly one attack method (use --method)")
    attack = templates[0]
    if len(cfg.epsilons) != 1 and attack.method != "none":
        raise UsageError("trace needs exactly one epsilon (use --epsilon)")
    if attack.method != "none":
        attack = attack.replace(epsilon=float(cfg.epsilons[0]))
    surrogate = None
    if attack.needs_gradient and attack.gradient_source == "surrogate":
        if attack.surrogate_id not in cfg.surrogates:
            raise UsageError(f"no surrogate bundle named {attack.surrogate_id!r}")
        surrogate = ag.load_agent(cfg.surrogates[attack.surrogate_id])
    trace = hs.run_episode(agent, attack, by_id[trip_id], seed=cfg.seed, surrogate=surrogate)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"trace_{trip_id}_{attack.method}" + (f"_{attack.epsilon:g}" if attack.method != "none" else "")
    trace.to_csv(out / f"{stem}.csv")
    (out / f"{stem}.svg").write_text(trace_svg(_trace_columns(trace), f"{trip_id} {attack.method}"))
    hs.write_snapshots(hs.flipped_snapshots(agent, trace), out / f"{stem}_snapshots.json")
    print(f"{trip_id} {attack.method} score={trace.score:.6f} fuel_l={trace.fuel_l:.4f} "
          f"min_soc={trace.min_soc:.3f} end_soc={trace.end_soc:.3f}", file=stdout)
    return trace


def cmd_report(cfg: RunConfig, stdout=sys.stdout) -> list[Path]:
    """Regenerate every SVG in ``out`` from the sweep and trace CSVs found there."""
    out = Path(cfg.out)
    if not out.is_dir():
        raise UsageError(f"output directory does not exist: {out}")
    written = []
    for path in sorted(out.glob("sweep*.csv")):
        rows = hs.summarize(hs.read_sweep_csv(path))
        clean = next((r.mean_score for r in rows if r.epsilon == 0.0), None)
        svg = path.with_suffix(".svg")
        svg.write_text(sweep_svg(rows, clean))
        written.append(svg)
    for path in sorted(out.glob("trace_*.csv")):
        cols = _read_trace_csv(path)
        svg = path.with_suffix(".svg")
        svg.write_text(trace_svg(cols, path.stem[len("trace_"):]))
        written.append(svg)
    for p in written:
        print(p, file=stdout)
    return written


# --- SVG -----------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f", "#bcbd22")


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _axes(x0, y0, w, h, xlim, ylim, xlabel, ylabel):
    parts = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>']
    for k in range(5):
        xv = xlim[0] + (xlim[1] - xlim[0]) * k / 4
        yv = ylim[0] + (ylim[1] - ylim[0]) * k / 4
        px = x0 + w * k / 4
        py = y0 + h - h * k / 4
        parts.append(f'<text x="{px:.1f}" y="{y0 + h + 14}" font-size="10" text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{py + 3:.1f}" font-size="10" text-anchor="end">{yv:.3g}</text>')
    parts.append(f'<text x="{x0 + w / 2}" y="{y0 + h + 30}" font-size="11" text-anchor="middle">'
                 f'{escape(xlabel)}</text>')
    parts.append(f'<text x="{x0 - 48}" y="{y0 + h / 2}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 {x0 - 48} {y0 + h / 2})">{escape(ylabel)}</text>')
    return parts


def sweep_svg(rows, clean_score=None, width=640, height=420) -> str:
    """Mean score with one-standard-deviation error bars against epsilon, one series per method."""
    series: dict = {}
    for r in rows:
        series.setdefault(f"{r.method} [{r.grad_source}]", []).append(r)
    x0, y0, w, h = 70, 20, width - 260, height - 70
    eps = [r.epsilon for r in rows] or [0.0, 1.0]
    lows = [r.mean_score - r.std_score for r in rows] + ([clean_score] if clean_score is not None else [])
    highs = [r.mean_score + r.std_score for r in rows] + ([clean_score] if clean_score is not None else [])
    xlim = (min(eps), max(eps))
    ylim = (min(lows or [0.0]), max(highs or [1.0]))
    fx, fy = _scale(*xlim, x0, x0 + w), _scale(*ylim, y0 + h, y0)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">']
    parts += _axes(x0, y0, w, h, xlim, ylim, "epsilon", "mean score")
    if clean_score is not None:
        parts.append(f'<line x1="{x0}" x2="{x0 + w}" y1="{fy(clean_score):.2f}" y2="{fy(clean_score):.2f}" '
                     f'stroke="#000" stroke-dasharray="4 3"/>')
    for k, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[k % len(PALETTE)]
        pts = sorted(pts, key=lambda r: r.epsilon)
        path = " ".join(f"{fx(r.epsilon):.2f},{fy(r.mean_score):.2f}" for r in pts)
        parts.append(f'<g class="series" data-name="{escape(name)}">')
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for r in pts:
            cx = fx(r.epsilon)
            parts.append(f'<line class="errorbar" x1="{cx:.2f}" x2="{cx:.2f}" '
                         f'y1="{fy(r.mean_score - r.std_score):.2f}" y2="{fy(r.mean_score + r.std_score):.2f}" '
                         f'stroke="{color}"/>')
            parts.append(f'<circle cx="{cx:.2f}" cy="{fy(r.mean_score):.2f}" r="2.5" fill="{color}"/>')
        parts.append("</g>")
        ly = y0 + 14 * k + 8
        parts.append(f'<line x1="{x0 + w + 12}" x2="{x0 + w + 30}" y1="{ly}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="2"/><text x="{x0 + w + 34}" y="{ly + 4}" font-size="10">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _trace_columns(trace: hs.EpisodeTrace) -> dict:
    s = trace.steps
    return {"d_mi": list(s["d_mi"]), "soc": list(s["soc"]), "l_set": list(s["l_set"]),
            "fuel_l": list(s["fuel_l"])}


def _read_trace_csv(path) -> dict:
    cols = {"d_mi": [], "soc": [], "l_set": [], "fuel_l": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in cols:
                cols[k].append(float(row[k]))
    return cols


def trace_svg(cols: dict, title: str, width=640, height=480) -> str:
    """SOC, L_set and fuel against distance in three stacked panels."""
    d = cols["d_mi"] or [0.0]
    xlim = (0.0, max(max(d), 1e-9))
    panels = [("soc", "SOC [%]", (0.0, 100.0)), ("l_set", "L_set [mi]", (0.0, 100.0)),
              ("fuel_l", "fuel [L]", (0.0, max(max(cols["fuel_l"] or [0.0]), 1.0)))]
    x0, w = 70, width - 100
    ph = (height - 60) / 3 - 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">',
             f'<text x="{width / 2}" y="14" font-size="12" text-anchor="middle">{escape(title)}</text>']
    fx = _scale(*xlim, x0, x0 + w)
    for k, (key, label, ylim) in enumerate(panels):
        y0 = 24 + k * (ph + 40)
        fy = _scale(*ylim, y0 + ph, y0)
        parts += _axes(x0, y0, w, ph, xlim, ylim, "distance [mi]" if k == 2 else "", label)
        if key == "soc":
            parts.append(f'<line x1="{x0}" x2="{x0 + w}" y1="{fy(10.0):.2f}" y2="{fy(10.0):.2f}" stroke="#999" '
                         f'stroke-dasharray="3 3"/>')
        pts = " ".join(f"{fx(x):.2f},{fy(y):.2f}" for x, y in zip(cols["d_mi"], cols[key]))
        parts.append(f'<polyline class="{key}" points="{pts}" fill="none" stroke="{PALETTE[k]}" '
                     f'stroke-width="1.2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- argument parsing ----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ems-adversary", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, trips=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if trips:
            sp.add_argument("--trips", help="trip directory or CSV file")
        return sp

    g = common(sub.add_parser("gen-trips", help="synthesize a seeded trip fleet"))
    g.add_argument("--count", type=int)
    t = common(sub.add_parser("train", help="train a dqn or iqn agent"))
    t.add_argument("algo", help="dqn or iqn")
    t.add_argument("--episodes", type=int, help="override n_episodes")
    s = common(sub.add_parser("sweep", help="epsilon sweep over attack methods"))
    s.add_argument("--agent", help="target agent bundle")
    s.add_argument("--method", action="append", help="attack method (repeatable)")
    s.add_argument("--epsilon", type=float, action="append", help="epsilon value (repeatable)")
    s.add_argument("--repeats", type=int)
    s.add_argument("--jobs", type=int)
    r = common(sub.add_parser("trace", help="per-decision trace of one trip"))
    r.add_argument("trip_id")
    r.add_argument("--agent", help="target agent bundle")
    r.add_argument("--method", help="attack method (default none)")
    r.add_argument("--epsilon", type=float)
    r.add_argument("--source", help="gradient source for the attack")
    common(sub.add_parser("report", help="regenerate SVGs from CSVs in the output directory"), trips=False)
    return p


def resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for name in ("seed", "out", "trips"):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    if getattr(args, "count", None) is not None:
        cfg.trip_count = args.count
    if getattr(args, "agent", None) is not None:
        cfg.agent_path = args.agent
    if getattr(args, "episodes", None) is not None:
        cfg.agent = {**cfg.agent, "n_episodes": args.episodes}
    if getattr(args, "repeats", None) is not None:
        cfg.repeats = args.repeats
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    method = getattr(args, "method", None)
    if method is not None:
        methods = method if isinstance(method, list) else [method]
        source = getattr(args, "source", None)
        cfg.methods = [{"method": m, **({"gradient_source": source} if source else {})} for m in methods]
    elif args.command == "trace":
        cfg.methods = [{"method": "none"}]
    eps = getattr(args, "epsilon", None)
    if eps is not None:
        cfg.epsilons = eps if isinstance(eps, list) else [eps]
    return cfg


def main(argv=None, stdout=sys.stdout, stderr=sys.stderr) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose gen-trips, train, sweep, trace or report")
        cfg = resolve(args)
        if args.command == "gen-trips":
            cmd_gen_trips(cfg, stdout)
        elif args.command == "train":
            cmd_train(cfg, args.algo, stdout)
        elif args.command == "sweep":
            cmd_sweep(cfg, stdout)
        elif args.command == "trace":
            cmd_trace(cfg, args.trip_id, stdout)
        else:
            cmd_report(cfg, stdout)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, TypeError) as exc:
        # includes InvalidParameterError, TripFormatError, BundleError and AttackConfigError
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
