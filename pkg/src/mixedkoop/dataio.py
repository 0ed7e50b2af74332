"""Car-following trajectory ingest, sample windowing, splitting and synthetic data.

Canonical CSV columns (header required, one row per vehicle per frame)::

    time_s, vehicle_id, preceding_id, velocity_mps, accel_mps2, headway_m,
    preceding_velocity_mps, vehicle_length_m, vehicle_type

``preceding_id`` 0 means no leader. ``headway_m`` is the bumper-to-bumper gap.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import LeadProfile
from .platoon import PlatoonConfig, VehicleSpec
from .traffic import Trajectories, roll_out

log = logging.getLogger(__name__)

FEATURES = ("v", "h", "dv", "a", "l")
V, H, DV, A, L = range(5)
LEAD = 5  # extra column carried in stored windows: preceding-vehicle velocity

CSV_COLUMNS = (
    "time_s", "vehicle_id", "preceding_id", "velocity_mps", "accel_mps2", "headway_m",
    "preceding_velocity_mps", "vehicle_length_m", "vehicle_type",
)
DT_DATA = 0.12
CONTEXT = 31
HORIZON = 15


class DataError(ValueError):
    """Malformed or inconsistent trajectory data."""


@dataclass
class VehicleSeries:
    vehicle_id: int
    vehicle_type: str
    time: np.ndarray
    velocity: np.ndarray
    accel: np.ndarray
    headway: np.ndarray
    preceding_id: np.ndarray
    preceding_velocity: np.ndarray
    length: np.ndarray

    def __len__(self) -> int:
        return len(self.time)


@dataclass
class Episode:
    """Continuous following of one leader; arrays are aligned per frame."""

    follower_id: int
    leader_id: int
    time: np.ndarray
    features: np.ndarray  # (n, 5) in FEATURES order
    lead_velocity: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.time[-1] - self.time[0]) if len(self.time) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.time)


# --------------------------------------------------------------------------- CSV


def load_trajectories(path, schema: dict | None = None) -> dict[int, VehicleSeries]:
    """Read a trajectory CSV into per-vehicle, time-ordered series.

    ``schema`` maps canonical column names to the names used in the file, e.g.
    ``{"velocity_mps": "xVelocity"}`` for a HighD-derived export.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"trajectory file not found: {path}")
    df = pd.read_csv(path)
    if schema:
        df = df.rename(columns={v: k for k, v in schema.items()})
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s): {', '.join(missing)}")

    ids = set(int(i) for i in df["vehicle_id"].unique())
    dangling = sorted(set(int(i) for i in df["preceding_id"].unique()) - ids - {0})
    if dangling:
        raise DataError(f"{path}: preceding_id {dangling[0]} does not match any vehicle_id")

    out: dict[int, VehicleSeries] = {}
    for vid, grp in df.groupby("vehicle_id", sort=True):
        t = grp["time_s"].to_numpy(dtype=float)
        if np.any(np.diff(t) <= 0):
            raise DataError(f"{path}: timestamps of vehicle {vid} are not strictly increasing")
        out[int(vid)] = VehicleSeries(
            vehicle_id=int(vid),
            vehicle_type=str(grp["vehicle_type"].iloc[0]),
            time=t,
            velocity=grp["velocity_mps"].to_numpy(dtype=float),
            accel=grp["accel_mps2"].to_numpy(dtype=float),
            headway=grp["headway_m"].to_numpy(dtype=float),
            preceding_id=grp["preceding_id"].to_numpy(dtype=int),
            preceding_velocity=grp["preceding_velocity_mps"].to_numpy(dtype=float),
            length=grp["vehicle_length_m"].to_numpy(dtype=float),
        )
    return out


def save_trajectories(series: dict[int, VehicleSeries], path) -> Path:
    """Write series in the canonical CSV layout (full float precision, LF endings)."""
    frames = []
    for s in series.values():
        frames.append(pd.DataFrame({
            "time_s": s.time,
            "vehicle_id": s.vehicle_id,
            "preceding_id": s.preceding_id,
            "velocity_mps": s.velocity,
            "accel_mps2": s.accel,
            "headway_m": s.headway,
            "preceding_velocity_mps": s.preceding_velocity,
            "vehicle_length_m": s.length,
            "vehicle_type": s.vehicle_type,
        }))
    df = pd.concat(frames, ignore_index=True).sort_values(["time_s", "vehicle_id"], kind="stable")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    return path


def trajectories_to_series(traj: Trajectories, platoon: PlatoonConfig) -> dict[int, VehicleSeries]:
    """Convert world-indexed rollout arrays to per-vehicle series (ids are world index + 1)."""
    n_world = traj.position.shape[1]
    gap = traj.headway
    kinds = ["car"] + [("cav" if v.role == "cav" else v.vclass) for v in platoon.vehicles]
    out = {}
    for k in range(n_world):
        steps = traj.n_steps
        out[k + 1] = VehicleSeries(
            vehicle_id=k + 1,
            vehicle_type=kinds[k],
            time=traj.time.copy(),
            velocity=traj.velocity[:, k].copy(),
            accel=traj.acceleration[:, k].copy(),
            headway=gap[:, k].copy() if k else np.full(steps, np.nan),
            preceding_id=np.full(steps, k if k else 0, dtype=int),
            preceding_velocity=traj.velocity[:, k - 1].copy() if k else np.full(steps, np.nan),
            length=np.full(steps, traj.lengths[k]),
        )
    return out


# --------------------------------------------------------------------------- episodes


def extract_cf_pairs(series: dict[int, VehicleSeries], min_duration: float = 30.0,
                     max_headway: float = 150.0) -> list[Episode]:
    """Split each follower's record into continuous single-leader episodes.

    A frame belongs to an episode when it has a leader and ``0 < headway <= max_headway``;
    episodes break at leader changes and at time gaps longer than 1.5 nominal frames.
    """
    episodes = []
    for s in series.values():
        if len(s) < 2:
            continue
        dt_nom = float(np.median(np.diff(s.time)))
        ok = (s.preceding_id != 0) & np.isfinite(s.headway) & (s.headway > 0) & (s.headway <= max_headway)
        ok &= np.isfinite(s.preceding_velocity)
        breaks = np.zeros(len(s), dtype=bool)
        breaks[1:] = (np.diff(s.time) > 1.5 * dt_nom) | (np.diff(s.preceding_id) != 0)
        start = None
        for i in range(len(s) + 1):
            end_here = i == len(s) or not ok[i] or (breaks[i] and start is not None)
            if start is not None and end_here:
                _append_episode(episodes, s, start, i, min_duration)
                start = None
            if i < len(s) and ok[i] and start is None:
                start = i
    return episodes


def _append_episode(episodes, s: VehicleSeries, i0: int, i1: int, min_duration: float) -> None:
    if s.time[i1 - 1] - s.time[i0] + 1e-9 < min_duration:
        return
    sl = slice(i0, i1)
    feats = np.column_stack([
        s.velocity[sl], s.headway[sl], s.preceding_velocity[sl] - s.velocity[sl],
        s.accel[sl], s.length[sl],
    ])
    episodes.append(Episode(s.vehicle_id, int(s.preceding_id[i0]), s.time[sl].copy(), feats,
                            s.preceding_velocity[sl].copy()))


# --------------------------------------------------------------------------- windows


@dataclass
class Samples:
    """Stacked windows: ``data[n, row, :5]`` features, ``data[n, row, 5]`` lead velocity.

    Each window has ``context + horizon + 1`` rows. Row ``context - 1`` is the current
    step T; rows T+1..T+horizon are the prediction targets; the final row is a trailing
    guard frame kept so every target frame has an observed successor.
    """

    data: np.ndarray
    context: int = CONTEXT
    horizon: int = HORIZON

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[1] != self.span or self.data.shape[2] != 6:
            raise ValueError(f"expected data of shape (n, {self.span}, 6), got {self.data.shape}")

    @property
    def span(self) -> int:
        return self.context + self.horizon + 1

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, idx) -> "SampleWindow | Samples":
        if isinstance(idx, (int, np.integer)):
            return SampleWindow(self.data[idx], self.context, self.horizon)
        return Samples(self.data[idx], self.context, self.horizon)

    @property
    def context_features(self) -> np.ndarray:
        return self.data[:, : self.context, :5]

    @property
    def future_lead_v(self) -> np.ndarray:
        """Preceding-vehicle velocity at T .. T+F-1, the inputs driving the prediction."""
        T = self.context - 1
        return self.data[:, T: T + self.horizon, LEAD]

    @property
    def targets(self) -> np.ndarray:
        """(v, h) at T+1 .. T+F."""
        T = self.context - 1
        return self.data[:, T + 1: T + 1 + self.horizon, :2]

    @staticmethod
    def concat(parts: list["Samples"]) -> "Samples":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return Samples(np.concatenate([p.data for p in parts]), parts[0].context, parts[0].horizon)


@dataclass
class SampleWindow:
    data: np.ndarray
    context: int = CONTEXT
    horizon: int = HORIZON

    @property
    def context_features(self) -> np.ndarray:
        return self.data[: self.context, :5]

    @property
    def future_lead_v(self) -> np.ndarray:
        T = self.context - 1
        return self.data[T: T + self.horizon, LEAD]

    @property
    def targets(self) -> np.ndarray:
        T = self.context - 1
        return self.data[T + 1: T + 1 + self.horizon, :2]

    def as_samples(self) -> Samples:
        return Samples(self.data[None], self.context, self.horizon)


def make_samples(episode: Episode, dt_data: float = DT_DATA, stride: int = 1,
                 context: int = CONTEXT, horizon: int = HORIZON) -> Samples:
    """Slide a ``context + horizon + 1`` frame window over an episode.

    Episodes recorded faster than ``dt_data`` are decimated by the integer ratio first.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    feats, lead = episode.features, episode.lead_velocity
    if len(episode) > 1:
        dt_ep = float(np.median(np.diff(episode.time)))
        factor = int(round(dt_data / dt_ep))
        if factor < 1 or abs(factor * dt_ep - dt_data) > 1e-6 * max(1.0, dt_data):
            raise DataError(f"episode interval {dt_ep:g} s is not an integer divisor of {dt_data:g} s")
        feats, lead = feats[::factor], lead[::factor]
    rows = np.column_stack([feats, lead])
    span = context + horizon + 1
    n = len(rows) - span
    if n < 0:
        return Samples(np.zeros((0, span, 6)), context, horizon)
    starts = np.arange(0, n + 1, stride)
    windows = np.stack([rows[s: s + span] for s in starts])
    return Samples(windows, context, horizon)


# --------------------------------------------------------------------------- split


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(len(FEATURES)), np.ones(len(FEATURES)))

    @classmethod
    def fit(cls, samples: Samples) -> "Normalizer":
        flat = samples.data[:, :, :5].reshape(-1, 5)
        mean, std = flat.mean(axis=0), flat.std(axis=0)
        for name, sd in zip(FEATURES, std):
            if not sd > 1e-12:
                raise DataError(f"feature {name!r} has zero variance in the training split")
        return cls(mean, std)

    def normalize_window(self, data: np.ndarray) -> np.ndarray:
        """Normalize stored windows (features + lead velocity column, which shares v's stats)."""
        out = np.empty_like(data, dtype=float)
        out[..., :5] = (data[..., :5] - self.mean) / self.std
        out[..., LEAD] = (data[..., LEAD] - self.mean[V]) / self.std[V]
        return out

    def normalize(self, x, cols=slice(None)):
        return (np.asarray(x) - self.mean[cols]) / self.std[cols]

    def denormalize(self, x, cols=slice(None)):
        return np.asarray(x) * self.std[cols] + self.mean[cols]

    def to_dict(self) -> dict:
        return {"features": list(FEATURES), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["mean"], d["std"])


@dataclass
class DatasetSplit:
    train: Samples
    val: Samples
    test: Samples
    normalizer: Normalizer
    seed: int
    indices: dict = field(default_factory=dict)

    def sizes(self) -> dict:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    def save(self, directory) -> Path:
        """Write ``samples.bin`` (little-endian float64, original order) and ``split.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n = sum(self.sizes().values())
        data = np.zeros((n,) + self.train.data.shape[1:])
        for name, part in (("train", self.train), ("val", self.val), ("test", self.test)):
            data[self.indices[name]] = part.data
        data.astype("<f8").tofile(directory / "samples.bin")
        meta = {
            "format": "mixedkoop-samples/1",
            "shape": list(data.shape),
            "dtype": "<f8",
            "columns": list(FEATURES) + ["lead_v"],
            "context": self.train.context,
            "horizon": self.train.horizon,
            "headway": "bumper-to-bumper gap (m)",
            "seed": self.seed,
            "sizes": self.sizes(),
            "indices": {k: list(map(int, v)) for k, v in self.indices.items()},
            "normalization": self.normalizer.to_dict(),
        }
        (directory / "split.json").write_text(json.dumps(meta, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "DatasetSplit":
        directory = Path(directory)
        meta_path = directory / "split.json"
        if not meta_path.exists():
            raise DataError(f"dataset manifest not found: {meta_path}")
        meta = json.loads(meta_path.read_text())
        data = np.fromfile(directory / "samples.bin", dtype="<f8").reshape(meta["shape"])
        P, F = meta["context"], meta["horizon"]
        parts = {k: Samples(data[np.asarray(v, dtype=int)], P, F) for k, v in meta["indices"].items()}
        return cls(parts["train"], parts["val"], parts["test"],
                   Normalizer.from_dict(meta["normalization"]), meta["seed"],
                   {k: np.asarray(v, dtype=int) for k, v in meta["indices"].items()})


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def split_and_normalize(samples: Samples, seed: int = 0) -> DatasetSplit:
    """Shuffle deterministically, split 7:1:2 and fit z-score stats on the train part."""
    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    idx = {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
           "test": np.sort(order[n_train + n_val:])}
    train = samples[idx["train"]]
    return DatasetSplit(train, samples[idx["val"]], samples[idx["test"]], Normalizer.fit(train), seed, idx)


# --------------------------------------------------------------------------- synthetic


def generate_synthetic(platoon: PlatoonConfig, profile: LeadProfile = LeadProfile(),
                       dt_data: float = DT_DATA, duration: float | None = None) -> dict[int, VehicleSeries]:
    """IDM platoon behind a profiled head vehicle, as per-vehicle series.

    CAVs in ``platoon`` drive as unengaged (IDM car) vehicles here. Collision raises
    :class:`~mixedkoop.core.CollisionError` carrying the time and vehicle index.
    """
    human = PlatoonConfig(tuple(VehicleSpec(v.role, v.vclass, False) for v in platoon.vehicles),
                          leader_length=platoon.leader_length)
    traj = roll_out(human, profile, dt_data, duration)
    return trajectories_to_series(traj, platoon)


def random_platoon(n: int, truck_fraction: float, rng: np.random.Generator) -> PlatoonConfig:
    n_truck = int(round(truck_fraction * n))
    kinds = np.array(["T"] * n_truck + ["H"] * (n - n_truck))
    return PlatoonConfig.from_codes("".join(rng.permutation(kinds)))


def synthetic_corpus(n_runs: int = 6, n_vehicles: int = 8, seed: int = 0, dt_data: float = DT_DATA,
                     duration: float = 180.0, truck_fraction: float = 0.25,
                     context: int = CONTEXT, horizon: int = HORIZON, stride: int = 2) -> Samples:
    """Windows from several IDM platoons under randomised oscillating head vehicles.

    Run 0 always uses the reference disturbance; later runs draw base speed, amplitude and
    angular rate around it so the data also covers the gentler motion of controlled vehicles.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for run in range(n_runs):
        if run == 0:
            profile = LeadProfile(duration=duration)
        else:
            profile = LeadProfile(base_speed=float(rng.uniform(20.0, 28.0)),
                                  amplitude=float(rng.uniform(0.5, 5.0)),
                                  angular_rate=float(rng.uniform(0.08, 0.35)),
                                  onset=float(rng.uniform(2.0, 10.0)), duration=duration)
        platoon = random_platoon(n_vehicles, truck_fraction, rng)
        series = generate_synthetic(platoon, profile, dt_data, duration)
        for ep in extract_cf_pairs(series, min_duration=(context + horizon) * dt_data):
            parts.append(make_samples(ep, dt_data, stride, context, horizon))
    return Samples.concat(parts)


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "split.json").read_bytes()).hexdigest()
