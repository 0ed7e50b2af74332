"""Single-lane world advance shared by the synthetic data generator and the closed-loop simulator.

Every vehicle is integrated with forward Euler at the sampling interval:
``p' = p + v dt`` and ``v' = max(0, v + a dt)``. Human drivers (and CAVs without an
engaged controller) take ``a`` from IDM; controlled CAVs carry ``a`` as a state and
integrate the commanded jerk, saturated to the acceleration bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CollisionError, LeadProfile, idm_acceleration, idm_equilibrium_gap, leading_velocity
from .platoon import PlatoonConfig


@dataclass
class Trajectories:
    """World-indexed arrays of shape (steps, n_world); index 0 is the head vehicle."""

    time: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    lengths: np.ndarray
    collision: dict | None = None

    @property
    def headway(self) -> np.ndarray:
        """Bumper-to-bumper gap to the predecessor; NaN for the head vehicle."""
        gap = np.full_like(self.position, np.nan)
        gap[:, 1:] = self.position[:, :-1] - self.position[:, 1:] - self.lengths[None, :-1]
        return gap

    @property
    def n_steps(self) -> int:
        return len(self.time)


class World:
    """Mutable platoon state plus the synchronous advance rule."""

    def __init__(self, platoon: PlatoonConfig, profile: LeadProfile, dt: float,
                 a_bounds: tuple[float, float] = (-6.0, 6.0), init_speed: float | None = None):
        self.platoon = platoon
        self.profile = profile
        self.dt = float(dt)
        self.a_bounds = a_bounds
        n = len(platoon) + 1
        self.lengths = np.asarray(platoon.lengths, dtype=float)
        self.controlled = np.zeros(n, dtype=bool)
        self.controlled[platoon.controlled_indices()] = True
        self._idm_groups: dict = {}
        for k, spec in enumerate(platoon.vehicles, start=1):
            if not self.controlled[k]:
                self._idm_groups.setdefault(spec.idm, []).append(k)
        self._idm_groups = {p: np.asarray(ix) for p, ix in self._idm_groups.items()}

        v_init = leading_velocity(0.0, profile) if init_speed is None else init_speed
        self.t = 0.0
        self.step_index = 0
        self.vel = np.full(n, float(v_init))
        self.pos = np.zeros(n)
        for k, spec in enumerate(platoon.vehicles, start=1):
            self.pos[k] = self.pos[k - 1] - self.lengths[k - 1] - idm_equilibrium_gap(v_init, spec.idm)
        self.acc = np.zeros(n)
        self.acc[~self.controlled] = self._human_accel()[~self.controlled]
        self.acc[0] = 0.0

    @property
    def n(self) -> int:
        return len(self.pos)

    def gaps(self) -> np.ndarray:
        """Gap of each world index to its predecessor (index 0 gets +inf)."""
        g = np.full(self.n, np.inf)
        g[1:] = self.pos[:-1] - self.pos[1:] - self.lengths[:-1]
        return g

    def _human_accel(self) -> np.ndarray:
        acc = np.zeros(self.n)
        gap = self.gaps()
        bad = np.nonzero(gap[1:] <= 0)[0]
        if bad.size:
            k = int(bad[0]) + 1
            raise CollisionError(f"collision: vehicle {k} gap {gap[k]:.3f} m at t={self.t:.2f} s",
                                 time_s=self.t, vehicle_id=k)
        dv = np.zeros(self.n)
        dv[1:] = self.vel[:-1] - self.vel[1:]
        for params, ix in self._idm_groups.items():
            acc[ix] = idm_acceleration(self.vel[ix], gap[ix], dv[ix], params)
        return acc

    def step(self, jerks: dict | None = None) -> None:
        """Advance all vehicles by one interval; ``jerks`` maps world index -> m/s^3."""
        dt = self.dt
        jerk = np.zeros(self.n)
        if jerks:
            for k, u in jerks.items():
                if not self.controlled[k]:
                    raise ValueError(f"vehicle {k} is not a controlled CAV")
                jerk[k] = u
        new_pos = self.pos + self.vel * dt
        new_vel = np.maximum(self.vel + self.acc * dt, 0.0)
        new_acc = np.clip(self.acc + jerk * dt, *self.a_bounds)
        self.t = (self.step_index + 1) * dt
        self.step_index += 1
        new_vel[0] = leading_velocity(min(self.t, self.profile.duration), self.profile)
        self.pos, self.vel = new_pos, new_vel
        human = self._human_accel()
        self.acc = np.where(self.controlled, new_acc, human)
        self.acc[0] = 0.0
        self._last_jerk = jerk

    def snapshot(self) -> dict:
        return {"t": self.t, "pos": self.pos.copy(), "vel": self.vel.copy(), "acc": self.acc.copy()}


def lead_acceleration(velocity: np.ndarray, dt: float) -> np.ndarray:
    """Forward-difference acceleration of the head vehicle (last sample repeated)."""
    acc = np.zeros_like(velocity)
    acc[:-1] = np.diff(velocity) / dt
    if len(velocity) > 1:
        acc[-1] = acc[-2]
    return acc


def roll_out(platoon: PlatoonConfig, profile: LeadProfile, dt: float, duration: float | None = None,
             controller=None, a_bounds=(-6.0, 6.0), truncate_on_collision: bool = False) -> Trajectories:
    """Run the world for ``duration / dt`` logged steps.

    ``controller(world, k)`` may return a jerk dict for the controlled CAVs; it is called
    at every logged step ``k`` before the advance. On a collision the run either raises
    :class:`CollisionError` or, with ``truncate_on_collision``, returns the rows logged so
    far with ``collision`` filled in.
    """
    duration = profile.duration if duration is None else duration
    steps = int(round(duration / dt))
    world = World(platoon, profile, dt, a_bounds=a_bounds)
    n = world.n
    pos = np.zeros((steps, n))
    vel = np.zeros((steps, n))
    acc = np.zeros((steps, n))
    jerk = np.zeros((steps, n))
    time = np.arange(steps) * dt
    collision = None
    for k in range(steps):
        pos[k], vel[k], acc[k] = world.pos, world.vel, world.acc
        jerks = None
        if controller is not None:
            jerks = controller(world, k)
        if jerks:
            for i, u in jerks.items():
                jerk[k, i] = u
        if k < steps - 1:
            try:
                world.step(jerks)
            except CollisionError as exc:
                if not truncate_on_collision:
                    raise
                collision = {"time_s": exc.time_s, "vehicle_index": exc.vehicle_id, "message": str(exc)}
                steps = k + 1
                break
    pos, vel, acc, jerk, time = pos[:steps], vel[:steps], acc[:steps], jerk[:steps], time[:steps]
    acc[:, 0] = lead_acceleration(vel[:, 0], dt)
    return Trajectories(time, pos, vel, acc, jerk, world.lengths.copy(), collision)
