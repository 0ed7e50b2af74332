"""Closed-loop mixed-traffic runs, scenario sweeps and oscillation metrics."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .core import LeadProfile
from .mpc import ConstraintSet, MpcWeights, SegmentController
from .platoon import PlatoonConfig, VehicleSpec
from .sysasm import HDV, VehicleMeasurement, encode_platoon_state, model_for, reference_trajectory
from .traffic import Trajectories, World, roll_out

log = logging.getLogger(__name__)

PLACEMENTS = ("random", "front", "middle", "rear", "explicit")
COMM_MODES = ("full", "degraded")
PARTITIONS = ("auto", "global", "segments")
SWEEP_AXES = ("penetration", "placement", "controller_count", "comm_mode")


@dataclass(frozen=True)
class Scenario:
    n_vehicles: int = 10
    penetration: float = 0.2
    truck_fraction: float = 0.2
    placement: str = "random"
    roster: str | None = None  # explicit codes (C/c/H/T) when placement == "explicit"
    comm_mode: str = "full"
    controllers: int | None = None  # cap on engaged controllers; None engages every CAV
    partition: str = "auto"
    seed: int = 0
    duration: float = 180.0
    dt: float = 0.12
    profile: LeadProfile = field(default_factory=LeadProfile)

    def __post_init__(self):
        if not (0 <= self.penetration <= 1 and 0 <= self.truck_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.comm_mode not in COMM_MODES:
            raise ValueError(f"comm_mode must be one of {COMM_MODES}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}")
        if self.placement == "explicit" and not self.roster:
            raise ValueError("explicit placement needs a roster string")
        if self.n_vehicles < 1 or self.dt <= 0 or self.duration <= 0:
            raise ValueError("invalid platoon size, interval or duration")
        if self.controllers is not None and self.controllers < 0:
            raise ValueError("controller count must be non-negative")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = asdict(self.profile)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if isinstance(d.get("profile"), dict):
            d["profile"] = LeadProfile(**d["profile"])
        return cls(**d)


def build_platoon(sc: Scenario) -> PlatoonConfig:
    """Roster for a scenario: CAV slots by placement, trucks among the HDV slots, controllers engaged."""
    rng = np.random.default_rng(sc.seed)
    if sc.placement == "explicit":
        codes = list(sc.roster)
        if len(codes) != sc.n_vehicles:
            raise ValueError(f"roster has {len(codes)} vehicles, scenario says {sc.n_vehicles}")
    else:
        n = sc.n_vehicles
        n_cav = int(round(sc.penetration * n))
        n_truck = min(int(round(sc.truck_fraction * n)), n - n_cav)
        if n_cav == 0:
            cav_slots = []
        elif sc.placement == "front":
            cav_slots = list(range(n_cav))
        elif sc.placement == "rear":
            cav_slots = [0] + list(range(n - n_cav + 1, n))
        elif sc.placement == "middle":
            start = 1 + ((n - 1) - (n_cav - 1)) // 2
            cav_slots = [0] + list(range(start, start + n_cav - 1))
        else:
            cav_slots = [0] + sorted(rng.choice(np.arange(1, n), n_cav - 1, replace=False).tolist())
        codes = ["H"] * n
        for s in cav_slots:
            codes[s] = "C"
        hdv_slots = [i for i in range(n) if codes[i] == "H"]
        for s in rng.choice(hdv_slots, n_truck, replace=False) if n_truck else []:
            codes[int(s)] = "T"
    cavs = [i for i, ch in enumerate(codes) if ch in "Cc"]
    if sc.controllers is not None:
        # nested subsets across controller counts: one seeded order, take a prefix
        order = np.random.default_rng(sc.seed + 7919).permutation(len(cavs))
        engaged = {cavs[j] for j in order[: min(sc.controllers, len(cavs))]}
        for i in cavs:
            codes[i] = "C" if i in engaged else "c"
    return PlatoonConfig.from_codes("".join(codes), tags={"scenario_seed": sc.seed})


def partition_platoon(platoon: PlatoonConfig, comm_mode: str = "full", partition: str = "auto"):
    """World-index member lists, one per MPC system, each led by an engaged CAV."""
    ctrl = platoon.controlled_indices()
    if not ctrl:
        return []
    n_world = len(platoon) + 1
    if partition == "auto":
        partition = "global" if len(platoon) <= 12 else "segments"
    if comm_mode == "degraded":
        out = []
        for k in ctrl:
            members = [k]
            if k + 1 < n_world and (k + 1) not in ctrl:
                members.append(k + 1)
            out.append(members)
        return out
    if partition == "global":
        return [list(range(ctrl[0], n_world))]
    bounds = ctrl + [n_world]
    return [list(range(bounds[j], bounds[j + 1])) for j in range(len(ctrl))]


def segment_config(platoon: PlatoonConfig, members: list[int]) -> PlatoonConfig:
    vehicles = []
    for j, k in enumerate(members):
        spec = platoon.vehicles[k - 1]
        if spec.is_controlled_cav:
            vehicles.append(VehicleSpec("cav", "car", True))
        else:
            # unengaged CAVs are modeled like human-driven cars
            vehicles.append(VehicleSpec("hdv", spec.vclass if spec.role == "hdv" else "car"))
    return PlatoonConfig(tuple(vehicles), leader_length=platoon.lengths[members[0] - 1])


class ClosedLoopController:
    """Rolling measurement buffers plus one SegmentController per system."""

    def __init__(self, platoon: PlatoonConfig, models, dt: float, weights: MpcWeights, constraints: ConstraintSet,
                 comm_mode: str = "full", partition: str = "auto"):
        self.platoon = platoon
        self.models = models
        self.weights = weights
        self.dt = dt
        self.groups = partition_platoon(platoon, comm_mode, partition)
        self.segments = []
        for members in self.groups:
            cfg = segment_config(platoon, members)
            self.segments.append((members, cfg, SegmentController.build(cfg, models, dt, weights, constraints)))
        P = max((model_for(v, models).context for v in platoon.vehicles if not v.is_controlled_cav),
                default=1) if models is not None else 1
        self.P = P
        self.lengths = np.asarray(platoon.lengths, dtype=float)
        self._ctx: np.ndarray | None = None
        self._vhist: list[np.ndarray] = []
        self.calls: list[float] = []  # per segment solve
        self.step_times: list[float] = []  # whole controller step, all segments
        self.diagnostics: list[dict] = []

    def _features(self, world: World) -> np.ndarray:
        gap = world.gaps()
        gap[0] = np.nan
        dv = np.zeros(world.n)
        dv[1:] = world.vel[:-1] - world.vel[1:]
        return np.column_stack([world.vel, gap, dv, world.acc, self.lengths])

    def __call__(self, world: World, k: int) -> dict:
        t_step = time.perf_counter()
        row = self._features(world)
        if self._ctx is None:
            self._ctx = np.repeat(row[None], self.P, axis=0)  # pre-roll equilibrium history
        else:
            self._ctx = np.concatenate([self._ctx[1:], row[None]])
        self._vhist.append(world.vel.copy())
        self._vhist = self._vhist[-self.weights.horizon:]
        vh = np.asarray(self._vhist)

        lifted = self._encode_all()
        jerks = {}
        for members, cfg, ctrl in self.segments:
            t0 = time.perf_counter()
            meas, lift = [], {}
            for j, kw in enumerate(members):
                kind = ctrl.sys.kinds[j]
                meas.append(VehicleMeasurement(world.vel[kw], world.acc[kw], row[kw, 1]))
                if kind == HDV:
                    lift[j] = lifted[(id(model_for(cfg.vehicles[j], self.models)), kw)]
            k0 = members[0]
            state = encode_platoon_state(meas, ctrl.sys, self.models, row[k0, 1], world.vel[k0 - 1], lifted=lift)
            hist = [vh[:, members[j] - 1] for j in ctrl.sys.cav_members()]
            res = ctrl.step(state, reference_trajectory(hist, ctrl.sys, self.weights.horizon))
            for g, j in enumerate(ctrl.sys.cav_members()):
                jerks[members[j]] = float(res.jerks[g])
            self.calls.append(time.perf_counter() - t0)
            d = res.diagnostics
            d.update(step=k, segment=members[0], control_time_s=self.calls[-1])
            self.diagnostics.append(d)
        self.step_times.append(time.perf_counter() - t_step)
        return jerks

    def _encode_all(self) -> dict:
        """Batch-encode every modeled HDV once per step, grouped by model."""
        todo: dict[int, tuple] = {}
        for members, cfg, ctrl in self.segments:
            for j, kw in enumerate(members):
                if ctrl.sys.kinds[j] == HDV:
                    mdl = model_for(cfg.vehicles[j], self.models)
                    todo.setdefault(id(mdl), (mdl, set()))[1].add(kw)
        out = {}
        for key, (mdl, ks) in todo.items():
            ks = sorted(ks)
            enc = mdl.encode(self._ctx[-mdl.context:, ks].transpose(1, 0, 2))
            for kw, s in zip(ks, enc):
                out[(key, kw)] = s
        return out


@dataclass
class SimLog:
    scenario: Scenario
    platoon: PlatoonConfig
    traj: Trajectories
    control_times: np.ndarray
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def collided(self) -> bool:
        return self.traj.collision is not None

    def roles(self) -> list[str]:
        out = ["lead"]
        for v in self.platoon.vehicles:
            if v.role == "cav":
                out.append("cav" if v.controlled else "cav_unengaged")
            else:
                out.append(f"hdv_{v.vclass}")
        return out

    def to_frame(self) -> pd.DataFrame:
        tr = self.traj
        steps, n = tr.position.shape
        solve = np.zeros((steps, n))
        for d in self.diagnostics:
            if d["step"] < steps:
                solve[d["step"], d["segment"]] += d["control_time_s"]
        return pd.DataFrame({
            "time_s": np.repeat(tr.time, n),
            "vehicle_id": np.tile(np.arange(n), steps),
            "role": np.tile(np.asarray(self.roles()), steps),
            "position_m": tr.position.reshape(-1),
            "velocity_mps": tr.velocity.reshape(-1),
            "accel_mps2": tr.acceleration.reshape(-1),
            "headway_m": tr.headway.reshape(-1),
            "jerk_mps3": tr.jerk.reshape(-1),
            "solve_time_s": solve.reshape(-1),
        })

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
        return path


def run_simulation(scenario: Scenario, model=None, weights: MpcWeights | None = None,
                   constraints: ConstraintSet | None = None, platoon: PlatoonConfig | None = None) -> SimLog:
    """Leader follows the profile; HDVs use IDM; engaged CAVs integrate MPC jerk commands."""
    weights = weights or MpcWeights()
    constraints = constraints or ConstraintSet()
    platoon = platoon or build_platoon(scenario)
    profile = replace(scenario.profile, duration=max(scenario.profile.duration, scenario.duration))
    controller = None
    if platoon.controlled_indices():
        if model is None:
            raise ValueError("a Koopman model is required when any CAV controller is engaged")
        controller = ClosedLoopController(platoon, model, scenario.dt, weights, constraints,
                                          scenario.comm_mode, scenario.partition)
    traj = roll_out(platoon, profile, scenario.dt, scenario.duration, controller,
                    a_bounds=(constraints.a_min, constraints.a_max), truncate_on_collision=True)
    if traj.collision:
        log.warning("run collided: %s", traj.collision["message"])
    times = np.asarray(controller.step_times) if controller else np.zeros(0)
    diags = controller.diagnostics if controller else []
    return SimLog(scenario, platoon, traj, times, diags)


# --------------------------------------------------------------------------- metrics


def rmse(predicted, truth) -> float:
    p, t = np.asarray(predicted, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("need at least one value")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class OscillationMetrics:
    v_std: float
    h_std: float
    peak_to_peak: np.ndarray
    mean_solve_time: float
    collided: bool = False

    def to_dict(self) -> dict:
        return {"v_std": self.v_std, "h_std": self.h_std, "peak_to_peak": self.peak_to_peak.tolist(),
                "mean_solve_time_s": self.mean_solve_time, "collided": self.collided}


def oscillation_metrics(log_or_traj) -> OscillationMetrics:
    """Population standard deviations over every (follower, step); the head vehicle is excluded."""
    if isinstance(log_or_traj, SimLog):
        traj, times, collided = log_or_traj.traj, log_or_traj.control_times, log_or_traj.collided
    else:
        traj, times, collided = log_or_traj, np.zeros(0), False
    v = traj.velocity[:, 1:]
    h = traj.headway[:, 1:]
    if v.size == 0:
        raise ValueError("empty log")
    return OscillationMetrics(float(np.std(v)), float(np.std(h)), np.ptp(v, axis=0),
                              float(times.mean()) if times.size else 0.0, collided)


def write_metrics(log_: SimLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = oscillation_metrics(log_)
    payload = {"scenario": log_.scenario.to_dict(), "roster": log_.platoon.codes(), **m.to_dict(),
               "collision": log_.traj.collision}
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


# --------------------------------------------------------------------------- sweeps


def _sweep_value(template: Scenario, axis: str, value) -> Scenario:
    if axis == "penetration":
        return replace(template, penetration=float(value))
    if axis == "placement":
        return replace(template, placement=str(value))
    if axis == "controller_count":
        return replace(template, controllers=int(value))
    return replace(template, comm_mode=str(value))


def _run_one(args):
    sc, model, weights, constraints = args
    m = oscillation_metrics(run_simulation(sc, model, weights, constraints))
    return m.v_std, m.h_std, m.mean_solve_time, m.collided


def sweep(template: Scenario, axis: str, values, model=None, repeats: int = 1, jobs: int = 1,
          weights: MpcWeights | None = None, constraints: ConstraintSet | None = None) -> pd.DataFrame:
    """Metrics per axis value, averaged over ``repeats`` seeds (template seed, +1, ...)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; allowed: {', '.join(SWEEP_AXES)}")
    values = list(values)
    tasks = []
    for v in values:
        for r in range(repeats):
            tasks.append((replace(_sweep_value(template, axis, v), seed=template.seed + r), model, weights,
                          constraints))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    rows = []
    for i, v in enumerate(values):
        chunk = np.asarray(results[i * repeats:(i + 1) * repeats], dtype=float)
        rows.append({axis: v, "v_std": chunk[:, 0].mean(), "h_std": chunk[:, 1].mean(),
                     "mean_solve_time_s": chunk[:, 2].mean(), "collisions": int(chunk[:, 3].sum()),
                     "repeats": repeats})
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------- plots


def write_plots(log_: SimLog, directory) -> list[Path]:
    """Time-space diagram coloured by speed, plus velocity and headway traces (SVG)."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "mixedkoop"  # stable element ids across reruns
    import matplotlib.pyplot as plt
    from matplotlib.collections import LineCollection

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr = log_.traj
    roles = log_.roles()
    out = []

    fig, ax = plt.subplots(figsize=(8, 5))
    segs, cols = [], []
    for k in range(tr.position.shape[1]):
        pts = np.column_stack([tr.time, tr.position[:, k]])
        segs.extend(np.stack([pts[:-1], pts[1:]], axis=1))
        cols.extend(0.5 * (tr.velocity[:-1, k] + tr.velocity[1:, k]))
    lc = LineCollection(segs, array=np.asarray(cols), cmap="jet_r", linewidths=0.8)
    ax.add_collection(lc)
    ax.autoscale()
    fig.colorbar(lc, ax=ax, label="velocity (m/s)")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("position (m)")
    out.append(directory / "time_space.svg")
    fig.savefig(out[-1], metadata={"Date": None})
    plt.close(fig)

    for name, data, label in (("velocity.svg", tr.velocity, "velocity (m/s)"),
                              ("headway.svg", tr.headway, "headway (m)")):
        fig, ax = plt.subplots(figsize=(8, 4))
        for k in range(data.shape[1]):
            if np.all(np.isnan(data[:, k])):
                continue
            style = "-" if roles[k] in ("cav", "lead") else ":"
            ax.plot(tr.time, data[:, k], style, lw=1.0 if style == "-" else 0.7)
        ax.set_xlabel("time (s)")
        ax.set_ylabel(label)
        out.append(directory / name)
        fig.savefig(out[-1], metadata={"Date": None})
        plt.close(fig)
    return out
