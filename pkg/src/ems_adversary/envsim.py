"""Simplified extended-range electric delivery vehicle and its L_set decision process.

The range extender charges the battery whenever the measured state of charge
falls below a distance-indexed reference. The agent nudges the expected trip
distance ``l_set`` that drives that reference. Physics runs at 1 Hz; the agent
acts once per ``decision_interval`` seconds.

The per-second loop is written over arrays of trips so a whole fleet can be
stepped in lockstep; a single trip is just a batch of one.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

ACTIONS = (-10.0, -5.0, 0.0, 5.0, 10.0)
N_ACTIONS = len(ACTIONS)
STATE_DIM = 7
DEFAULT_DECISION_INTERVAL = 60
TRIP_CSV_HEADER = ("t_s", "odometer_mi", "power_kw", "x", "y")
MANIFEST_NAME = "manifest.json"


class InvalidParameterError(ValueError):
    pass


class InvalidStateError(ValueError):
    pass


class TripFormatError(ValueError):
    """Malformed or inconsistent trip file; the message names the offending line."""


@dataclass(frozen=True)
class VehicleParams:
    battery_capacity: float = 50.0
    initial_soc: float = 100.0
    soc_floor_target: float = 10.0
    soc_ref_cap: float = 60.0
    depletion_factor: float = 0.9
    charge_power: float = 10.0
    fuel_rate: float = 3.0
    lset_min: float = 20.0
    lset_max: float = 100.0
    # None starts episodes at the middle of [lset_min, lset_max]
    initial_lset: float | None = None

    def __post_init__(self):
        if self.battery_capacity <= 0:
            raise InvalidParameterError("battery_capacity must be positive")
        if not 0 < self.soc_floor_target < self.soc_ref_cap <= 100:
            raise InvalidParameterError("need 0 < soc_floor_target < soc_ref_cap <= 100")
        if self.charge_power <= 0:
            raise InvalidParameterError("charge_power must be positive")
        if not self.lset_min < self.lset_max:
            raise InvalidParameterError("lset_min must be below lset_max")
        if self.lset_min <= 0:
            raise InvalidParameterError("lset_min must be positive")
        if self.initial_lset is not None and not self.lset_min <= self.initial_lset <= self.lset_max:
            raise InvalidParameterError("initial_lset outside [lset_min, lset_max]")

    @property
    def start_lset(self) -> float:
        if self.initial_lset is None:
            return 0.5 * (self.lset_min + self.lset_max)
        return float(self.initial_lset)


@dataclass(frozen=True)
class RewardParams:
    c_fuel: float = -0.001
    c_soc: float = -0.060
    c_action: float = -0.020
    terminal_comp: str = "energy_balance"
    # seconds per unit of engine-on / low-SOC time; None means one decision interval
    time_unit_s: float | None = None

    def __post_init__(self):
        if self.c_fuel > 0 or self.c_soc > 0 or self.c_action > 0:
            raise InvalidParameterError("reward coefficients must be <= 0")
        if self.terminal_comp not in ("energy_balance", "none"):
            raise InvalidParameterError(f"unknown terminal_comp {self.terminal_comp!r}")
        if self.time_unit_s is not None and not self.time_unit_s > 0:
            raise InvalidParameterError("time_unit_s must be positive")

    def unit_seconds(self, decision_interval: int) -> float:
        return float(decision_interval if self.time_unit_s is None else self.time_unit_s)


@dataclass(frozen=True)
class ScalingBounds:
    t_max: float = 10 * 3600.0
    d_max: float = 80.0
    f_max: float = 10.0


def load_env_config(path) -> tuple[VehicleParams, RewardParams]:
    """Read a flat JSON object; keys are routed to whichever dataclass declares them."""
    doc = json.loads(Path(path).read_text())
    return env_params_from_dict(doc)


def env_params_from_dict(doc: dict) -> tuple[VehicleParams, RewardParams]:
    vkeys = {f.name for f in fields(VehicleParams)}
    rkeys = {f.name for f in fields(RewardParams)}
    unknown = set(doc) - vkeys - rkeys
    if unknown:
        raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
    return (
        VehicleParams(**{k: v for k, v in doc.items() if k in vkeys}),
        RewardParams(**{k: v for k, v in doc.items() if k in rkeys}),
    )


@dataclass(frozen=True, eq=False)
class TripProfile:
    """One delivery day sampled at 1 Hz. ``power[k]`` is drawn over the second ending at ``t[k]``."""

    t: np.ndarray
    odometer: np.ndarray
    power: np.ndarray
    x: np.ndarray
    y: np.ndarray
    trip_id: str = "trip"
    declared_distance: float | None = None
    declared_intensity: float | None = None

    def __post_init__(self):
        n = len(self.t)
        for name in ("odometer", "power", "x", "y"):
            if len(getattr(self, name)) != n:
                raise TripFormatError(f"{name} length differs from t")
        if n == 0:
            raise TripFormatError("trip has no records")
        if self.t[0] != 0 or self.odometer[0] != 0:
            raise TripFormatError("first record must have t=0 and odometer=0")
        bad_t = np.flatnonzero(np.diff(self.t) != 1)
        if bad_t.size:
            raise TripFormatError(f"record {bad_t[0] + 1}: t must increase by exactly 1 s")
        bad_d = np.flatnonzero(np.diff(self.odometer) < 0)
        if bad_d.size:
            raise TripFormatError(f"record {bad_d[0] + 1}: odometer decreases")

    @property
    def n_records(self) -> int:
        return len(self.t)

    @property
    def duration_s(self) -> int:
        return int(self.t[-1])

    @property
    def total_distance(self) -> float:
        return float(self.odometer[-1])

    @property
    def traction_energy(self) -> float:
        """Positive traction energy over the trip, kWh."""
        return float(np.sum(np.maximum(self.power, 0.0)) / 3600.0)

    @property
    def energy_intensity(self) -> float:
        return self.traction_energy / self.total_distance if self.total_distance > 0 else 0.0

    def equals(self, other: "TripProfile") -> bool:
        return self.trip_id == other.trip_id and self.declared_distance == other.declared_distance and \
            self.declared_intensity == other.declared_intensity and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("t", "odometer", "power", "x", "y")
        )


@dataclass
class EpisodeState:
    t_travel: float
    d: float
    soc: float
    fuel: float
    x: float
    y: float
    l_set: float
    engine_on: bool = False


@dataclass
class StepOutcome:
    next_state: EpisodeState
    reward: float
    reward_components: tuple[float, float, float, float]
    t_f: int
    t_soc: int
    done: bool
    charged_kwh: float = 0.0
    traction_kwh: float = 0.0
    clipped_kwh: float = 0.0
    seconds: dict | None = None


def soc_reference(d_t, l_set, params: VehicleParams):
    """Distance-indexed SOC reference (percent), capped at ``soc_ref_cap``; may go negative."""
    l_arr = np.asarray(l_set, dtype=np.float64)
    if np.any(l_arr <= 0):
        raise InvalidParameterError("l_set must be positive")
    ref = np.minimum(params.soc_ref_cap, 100.0 * (1.0 - params.depletion_factor * np.asarray(d_t) / l_arr))
    return float(ref) if np.ndim(ref) == 0 else ref


def engine_command(soc, soc_ref):
    """The range extender runs iff the measured SOC is strictly below the reference."""
    on = np.asarray(soc) < np.asarray(soc_ref)
    return bool(on) if on.ndim == 0 else on


def terminal_compensation(trip: TripProfile, params: VehicleParams, reward_params: RewardParams,
                          decision_interval: int = DEFAULT_DECISION_INTERVAL) -> float:
    """Reward credited at trip end for the fuel that any policy must burn to stay above the SOC floor.

    The minimal engine time, in reward time units, is the energy shortfall of
    the battery alone divided by the energy one unit of charging adds.
    """
    if reward_params.terminal_comp == "none":
        return 0.0
    usable = (params.initial_soc - params.soc_floor_target) / 100.0 * params.battery_capacity
    per_unit = params.charge_power * reward_params.unit_seconds(decision_interval) / 3600.0
    t_min = max(0.0, (trip.traction_energy - usable) / per_unit)
    return abs(reward_params.c_fuel) * t_min


def scale_state(state: EpisodeState, params: VehicleParams, bounds: ScalingBounds = ScalingBounds()) -> np.ndarray:
    raw = np.array([
        state.t_travel / bounds.t_max,
        state.d / bounds.d_max,
        state.soc / 100.0,
        state.fuel / bounds.f_max,
        state.x,
        state.y,
        (state.l_set - params.lset_min) / (params.lset_max - params.lset_min),
    ])
    return np.clip(raw, 0.0, 1.0)


def _scale_arrays(t, d, soc, fuel, x, y, l_set, params: VehicleParams, bounds: ScalingBounds) -> np.ndarray:
    out = np.stack([
        t / bounds.t_max,
        d / bounds.d_max,
        soc / 100.0,
        fuel / bounds.f_max,
        x,
        y,
        (l_set - params.lset_min) / (params.lset_max - params.lset_min),
    ], axis=-1)
    return np.clip(out, 0.0, 1.0)


def _simulate_seconds(odo, power, last, idx, energy, fuel, l_set, params: VehicleParams,
                      n_seconds: int, log: dict | None = None):
    """Run up to ``n_seconds`` of 1 Hz physics for every row; rows stop at their last record.

    ``energy`` is battery content in kWh. Returns updated arrays and per-row
    accumulators ``(idx, energy, fuel, t_f, t_soc, engine, charged, traction, clipped)``.
    """
    n = idx.shape[0]
    rows = np.arange(n)
    cap = params.battery_capacity
    charge_kwh = params.charge_power / 3600.0
    fuel_step = params.fuel_rate / 3600.0
    floor = params.soc_floor_target
    t_f = np.zeros(n, dtype=np.int64)
    t_soc = np.zeros(n, dtype=np.int64)
    charged = np.zeros(n)
    traction = np.zeros(n)
    clipped = np.zeros(n)
    engine = np.zeros(n, dtype=bool)
    idx = idx.copy()
    energy = energy.copy()
    fuel = fuel.copy()
    for _ in range(n_seconds):
        active = idx < last
        if not active.any():
            break
        idx = idx + active
        d = odo[rows, idx]
        draw = np.where(active, power[rows, idx], 0.0) / 3600.0
        energy = energy - draw
        traction += draw
        soc = energy / cap * 100.0
        ref = np.minimum(params.soc_ref_cap, 100.0 * (1.0 - params.depletion_factor * d / l_set))
        on = active & (soc < ref)
        add = np.where(on, charge_kwh, 0.0)
        energy = energy + add
        charged += add
        fuel = fuel + np.where(on, fuel_step, 0.0)
        bounded = np.clip(energy, 0.0, cap)
        clipped += bounded - energy
        energy = bounded
        t_f += on
        t_soc += active & (energy / cap * 100.0 < floor)
        engine = np.where(active, on, engine)
        if log is not None:
            log.setdefault("active", []).append(active)
            log.setdefault("d", []).append(d)
            log.setdefault("soc_after_draw", []).append(soc)
            log.setdefault("soc_ref", []).append(ref)
            log.setdefault("engine_on", []).append(on)
            log.setdefault("soc", []).append(energy / cap * 100.0)
    return idx, energy, fuel, t_f, t_soc, engine, charged, traction, clipped


def advance(state: EpisodeState, action: int, trip: TripProfile, params: VehicleParams = VehicleParams(),
            reward_params: RewardParams = RewardParams(), decision_interval: int = DEFAULT_DECISION_INTERVAL,
            record_seconds: bool = False) -> StepOutcome:
    """Apply one L_set action (index into ``ACTIONS``) and simulate one decision interval."""
    if decision_interval < 1:
        raise InvalidParameterError("decision_interval must be >= 1 s")
    if not 0 <= int(action) < N_ACTIONS:
        raise InvalidParameterError(f"action index {action} outside 0..{N_ACTIONS - 1}")
    idx0 = int(round(state.t_travel))
    last = trip.n_records - 1
    if idx0 >= last or idx0 < 0:
        raise InvalidStateError(f"state at t={state.t_travel} is not before trip end t={trip.t[-1]}")
    delta = ACTIONS[int(action)]
    l_set = min(max(state.l_set + delta, params.lset_min), params.lset_max)
    log = {} if record_seconds else None
    idx, energy, fuel, t_f, t_soc, engine, charged, traction, clipped = _simulate_seconds(
        trip.odometer[None, :], trip.power[None, :], np.array([last]), np.array([idx0]),
        np.array([state.soc / 100.0 * params.battery_capacity]), np.array([state.fuel]),
        np.array([l_set]), params, decision_interval, log)
    i = int(idx[0])
    done = i >= last
    unit = reward_params.unit_seconds(decision_interval)
    fuel_term = reward_params.c_fuel * int(t_f[0]) / unit
    soc_term = reward_params.c_soc * int(t_soc[0]) / unit
    action_term = reward_params.c_action if delta != 0 else 0.0
    terminal = terminal_compensation(trip, params, reward_params, decision_interval) if done else 0.0
    nxt = EpisodeState(
        t_travel=float(trip.t[i]), d=float(trip.odometer[i]),
        soc=float(energy[0] / params.battery_capacity * 100.0), fuel=float(fuel[0]),
        x=float(trip.x[i]), y=float(trip.y[i]), l_set=float(l_set), engine_on=bool(engine[0]),
    )
    seconds = {k: np.array([v[0] for v in vals]) for k, vals in log.items()} if log is not None else None
    return StepOutcome(
        next_state=nxt,
        reward=fuel_term + soc_term + action_term + terminal,
        reward_components=(fuel_term, soc_term, action_term, terminal),
        t_f=int(t_f[0]), t_soc=int(t_soc[0]), done=done,
        charged_kwh=float(charged[0]), traction_kwh=float(traction[0]), clipped_kwh=float(clipped[0]),
        seconds=seconds,
    )


def initial_state(trip: TripProfile, params: VehicleParams = VehicleParams()) -> EpisodeState:
    return EpisodeState(t_travel=0.0, d=0.0, soc=params.initial_soc, fuel=0.0,
                        x=float(trip.x[0]), y=float(trip.y[0]), l_set=params.start_lset)


class FleetEnv:
    """Several trips stepped in lockstep. Finished rows stay frozen until every trip ends.

    Rewards follow exactly the same arithmetic as :func:`advance`.
    """

    def __init__(self, trips, params: VehicleParams = VehicleParams(), reward_params: RewardParams = RewardParams(),
                 decision_interval: int = DEFAULT_DECISION_INTERVAL, bounds: ScalingBounds = ScalingBounds()):
        if not trips:
            raise InvalidParameterError("FleetEnv needs at least one trip")
        if decision_interval < 1:
            raise InvalidParameterError("decision_interval must be >= 1 s")
        self.trips = list(trips)
        self.params = params
        self.reward_params = reward_params
        self.decision_interval = int(decision_interval)
        self.bounds = bounds
        n = len(self.trips)
        width = max(tr.n_records for tr in self.trips)
        self._odo = np.zeros((n, width))
        self._power = np.zeros((n, width))
        self._x = np.zeros((n, width))
        self._y = np.zeros((n, width))
        self._t = np.zeros((n, width))
        for k, tr in enumerate(self.trips):
            m = tr.n_records
            self._odo[k, :m], self._power[k, :m] = tr.odometer, tr.power
            self._x[k, :m], self._y[k, :m], self._t[k, :m] = tr.x, tr.y, tr.t
        self._last = np.array([tr.n_records - 1 for tr in self.trips])
        self._terminal = np.array([
            terminal_compensation(tr, params, reward_params, self.decision_interval) for tr in self.trips
        ])
        self.reset()

    @property
    def n(self) -> int:
        return len(self.trips)

    def reset(self, initial_lset=None) -> np.ndarray:
        n = self.n
        self.idx = np.zeros(n, dtype=np.int64)
        self.energy = np.full(n, self.params.initial_soc / 100.0 * self.params.battery_capacity)
        self.fuel = np.zeros(n)
        start = self.params.start_lset if initial_lset is None else initial_lset
        self.l_set = np.broadcast_to(np.asarray(start, dtype=np.float64), (n,)).copy()
        self.engine_on = np.zeros(n, dtype=bool)
        self.done = self._last <= 0
        self.min_soc = self.soc.copy()
        self.soc_violation = np.zeros(n, dtype=bool)
        self.charged_kwh = np.zeros(n)
        self.traction_kwh = np.zeros(n)
        self.clipped_kwh = np.zeros(n)
        return self.observe()

    @property
    def soc(self) -> np.ndarray:
        return self.energy / self.params.battery_capacity * 100.0

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.n)

    @property
    def d(self) -> np.ndarray:
        return self._odo[self.rows, self.idx]

    @property
    def t_travel(self) -> np.ndarray:
        return self._t[self.rows, self.idx]

    def observe(self) -> np.ndarray:
        r, i = self.rows, self.idx
        return _scale_arrays(self._t[r, i], self._odo[r, i], self.soc, self.fuel, self._x[r, i], self._y[r, i],
                             self.l_set, self.params, self.bounds)

    def state(self, k: int) -> EpisodeState:
        i = int(self.idx[k])
        return EpisodeState(t_travel=float(self._t[k, i]), d=float(self._odo[k, i]), soc=float(self.soc[k]),
                            fuel=float(self.fuel[k]), x=float(self._x[k, i]), y=float(self._y[k, i]),
                            l_set=float(self.l_set[k]), engine_on=bool(self.engine_on[k]))

    def step(self, actions, log: dict | None = None) -> dict:
        """Advance every unfinished row by one decision. Finished rows get zero reward."""
        actions = np.asarray(actions, dtype=np.int64)
        live = ~self.done
        delta = np.where(live, np.asarray(ACTIONS)[actions], 0.0)
        p = self.params
        self.l_set = np.minimum(np.maximum(self.l_set + delta, p.lset_min), p.lset_max)
        last = np.where(live, self._last, self.idx)
        idx, energy, fuel, t_f, t_soc, engine, charged, traction, clipped = _simulate_seconds(
            self._odo, self._power, last, self.idx, self.energy, self.fuel, self.l_set, p,
            self.decision_interval, log)
        self.idx, self.energy, self.fuel = idx, energy, fuel
        self.engine_on = np.where(live, engine, self.engine_on)
        self.charged_kwh += charged
        self.traction_kwh += traction
        self.clipped_kwh += clipped
        rp = self.reward_params
        finished = live & (idx >= self._last)
        unit = rp.unit_seconds(self.decision_interval)
        fuel_term = np.where(live, rp.c_fuel * t_f / unit, 0.0)
        soc_term = np.where(live, rp.c_soc * t_soc / unit, 0.0)
        action_term = np.where(live & (delta != 0), rp.c_action, 0.0)
        terminal = np.where(finished, self._terminal, 0.0)
        self.done = self.done | finished
        soc = self.soc
        self.min_soc = np.where(live, np.minimum(self.min_soc, soc), self.min_soc)
        self.soc_violation |= live & (t_soc > 0)
        return {
            "live": live,
            "reward": fuel_term + soc_term + action_term + terminal,
            "components": np.stack([fuel_term, soc_term, action_term, terminal], axis=-1),
            "t_f": t_f,
            "t_soc": t_soc,
            "done": finished,
        }


def n_decisions(trip: TripProfile, decision_interval: int = DEFAULT_DECISION_INTERVAL) -> int:
    return math.ceil((trip.n_records - 1) / decision_interval)


# --- synthetic trips -------------------------------------------------------

@dataclass(frozen=True)
class TripGenConfig:
    distance_range: tuple[float, float] = (38.0, 57.0)
    intensity_range: tuple[float, float] = (0.91, 1.44)
    hop_miles: tuple[float, float] = (0.15, 0.8)
    cruise_mph: tuple[float, float] = (18.0, 38.0)
    dwell_s: tuple[int, int] = (30, 240)
    highway_miles: float = 4.0
    highway_mph: float = 55.0
    accel_mph_per_s: float = 3.0
    aux_kw: float = 0.4
    extra: dict = field(default_factory=dict)


def _speed_profile(rng: np.random.Generator, distance: float, cfg: TripGenConfig) -> np.ndarray:
    """Per-second speeds (mph) for a depot -> stop-and-go delivery loop -> depot day."""
    speeds: list[float] = [0.0]

    def leg(miles, v_cruise):
        # trapezoid: ramp up, cruise, ramp down; whole seconds
        a = cfg.accel_mph_per_s
        n_ramp = max(1, int(math.ceil(v_cruise / a)))
        ramp = [v_cruise * (k + 1) / n_ramp for k in range(n_ramp)]
        ramp_miles = 2 * sum(ramp) / 3600.0
        n_cruise = max(0, int(round((miles - ramp_miles) * 3600.0 / v_cruise)))
        speeds.extend(ramp)
        speeds.extend([v_cruise] * n_cruise)
        speeds.extend(ramp[::-1][1:] + [0.0])

    highway = min(cfg.highway_miles, 0.15 * distance)
    leg(highway, cfg.highway_mph)
    covered = sum(speeds) / 3600.0
    while covered < distance - highway:
        hop = rng.uniform(*cfg.hop_miles)
        leg(hop, rng.uniform(*cfg.cruise_mph))
        speeds.extend([0.0] * int(rng.integers(cfg.dwell_s[0], cfg.dwell_s[1] + 1)))
        covered = sum(speeds) / 3600.0
    leg(highway, cfg.highway_mph)
    return np.asarray(speeds)


def _loop_positions(rng: np.random.Generator, progress: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed loop around a depot in the unit square; angle tracks trip progress."""
    cx, cy = rng.uniform(0.45, 0.55, size=2)
    r0 = rng.uniform(0.22, 0.3)
    theta = 2.0 * np.pi * progress
    r = np.full_like(theta, r0)
    for k in (2, 3, 5):
        r += r0 * rng.uniform(0.0, 0.08) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    x = np.clip(cx + r * np.cos(theta), 0.0, 1.0)
    y = np.clip(cy + r * np.sin(theta), 0.0, 1.0)
    return x, y


def synthesize_trip(rng: np.random.Generator, distance: float, intensity: float, trip_id: str = "trip",
                    cfg: TripGenConfig = TripGenConfig()) -> TripProfile:
    v = _speed_profile(rng, distance, cfg)
    step_miles = v / 3600.0
    odo = np.cumsum(step_miles)
    odo *= distance / odo[-1]
    odo[0] = 0.0
    accel = np.diff(v, prepend=0.0)
    # road load ~ rolling + aero + inertia, arbitrary units; rescaled to the target energy below
    raw = v * (1.0 + 0.0008 * v**2) + 6.0 * np.maximum(accel, 0.0) * v
    raw[0] = 0.0
    traction_target = intensity * distance * 3600.0
    aux = np.full_like(raw, cfg.aux_kw)
    aux[0] = 0.0
    power = raw * (traction_target - aux.sum()) / raw.sum() + aux
    odo = np.round(odo, 6)
    power = np.round(power, 6)
    # rounding can break exact monotonicity only through ties; enforce it
    odo = np.maximum.accumulate(odo)
    x, y = _loop_positions(rng, odo / odo[-1])
    t = np.arange(len(v), dtype=np.float64)
    return TripProfile(t=t, odometer=odo, power=power, x=np.round(x, 6), y=np.round(y, 6), trip_id=trip_id,
                       declared_distance=float(distance), declared_intensity=float(intensity))


def synthesize_trips(seed, count: int, distance_range=(38.0, 57.0), intensity_range=(0.91, 1.44),
                     cfg: TripGenConfig | None = None) -> list[TripProfile]:
    """Seeded fleet of synthetic delivery days with uniform distance and energy intensity."""
    if count < 1:
        raise InvalidParameterError("count must be >= 1")
    lo_d, hi_d = distance_range
    lo_i, hi_i = intensity_range
    if not (0 < lo_d <= hi_d) or not (0 < lo_i <= hi_i):
        raise InvalidParameterError("distance and intensity ranges must be positive and ordered")
    cfg = cfg or TripGenConfig(distance_range=tuple(distance_range), intensity_range=tuple(intensity_range))
    root = np.random.SeedSequence(seed)
    trips = []
    for k, child in enumerate(root.spawn(count)):
        rng = np.random.default_rng(child)
        dist = rng.uniform(lo_d, hi_d)
        inten = rng.uniform(lo_i, hi_i)
        trips.append(synthesize_trip(rng, dist, inten, trip_id=f"trip_{k:03d}", cfg=cfg))
    return trips


# --- trip files ------------------------------------------------------------

def save_trip_csv(trip: TripProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_CSV_HEADER)
        for row in zip(trip.t, trip.odometer, trip.power, trip.x, trip.y):
            w.writerow([f"{int(row[0])}"] + [f"{v:.6f}" for v in row[1:]])


def load_trip_csv(path, trip_id: str | None = None) -> TripProfile | None:
    """Parse one trip file; returns ``None`` for an empty file."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return None
    lines = text.splitlines()
    header = tuple(h.strip() for h in lines[0].split(","))
    if header != TRIP_CSV_HEADER:
        raise TripFormatError(f"{path}:1: expected header {','.join(TRIP_CSV_HEADER)}")
    cols = [[] for _ in TRIP_CSV_HEADER]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(TRIP_CSV_HEADER):
            raise TripFormatError(f"{path}:{lineno}: expected {len(TRIP_CSV_HEADER)} fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TripFormatError(f"{path}:{lineno}: {exc}") from None
        if cols[1] and vals[1] < cols[1][-1]:
            raise TripFormatError(f"{path}:{lineno}: odometer decreases ({vals[1]} < {cols[1][-1]})")
        if cols[0] and vals[0] != cols[0][-1] + 1:
            raise TripFormatError(f"{path}:{lineno}: t must increase by 1 s")
        for c, v in zip(cols, vals):
            c.append(v)
    if not cols[0]:
        return None
    arrs = [np.asarray(c) for c in cols]
    try:
        return TripProfile(*arrs, trip_id=trip_id or path.stem)
    except TripFormatError as exc:
        raise TripFormatError(f"{path}: {exc}") from None


def save_trips(trips, path) -> Path:
    """Write one CSV per trip plus ``manifest.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for tr in trips:
        fname = f"{tr.trip_id}.csv"
        save_trip_csv(tr, out / fname)
        manifest.append({
            "trip_id": tr.trip_id, "file": fname,
            "total_distance": tr.declared_distance if tr.declared_distance is not None else tr.total_distance,
            "energy_intensity": (tr.declared_intensity if tr.declared_intensity is not None
                                 else tr.energy_intensity),
        })
    (out / MANIFEST_NAME).write_text(json.dumps({"trips": manifest}, indent=1) + "\n")
    return out


def load_trips(path) -> list[TripProfile]:
    """Load a trip directory (manifest order, else sorted CSV names) or a single trip CSV."""
    path = Path(path)
    if path.is_file():
        trip = load_trip_csv(path)
        return [] if trip is None else [trip]
    manifest = path / MANIFEST_NAME
    if manifest.exists():
        entries = json.loads(manifest.read_text())["trips"]
        files = [(e["trip_id"], path / e["file"], e) for e in entries]
    else:
        files = [(p.stem, p, {}) for p in sorted(path.glob("*.csv"))]
    trips = []
    for trip_id, f, entry in files:
        trip = load_trip_csv(f, trip_id=trip_id)
        if trip is not None:
            if entry:
                trip = replace(trip, declared_distance=entry.get("total_distance"),
                               declared_intensity=entry.get("energy_intensity"))
            trips.append(trip)
    return trips


def trip_summary(trips) -> list[dict]:
    return [{
        "trip_id": tr.trip_id,
        "distance_mi": tr.total_distance,
        "intensity_kwh_mi": tr.energy_intensity,
        "energy_kwh": tr.traction_energy,
        "duration_h": tr.duration_s / 3600.0,
    } for tr in trips]


def params_to_dict(vehicle: VehicleParams, reward: RewardParams) -> dict:
    return {**asdict(vehicle), **asdict(reward)}
