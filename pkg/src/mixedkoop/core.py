"""Vehicle kinematics, the Intelligent Driver Model and the lead-vehicle disturbance.

All quantities are SI: metres, seconds, m/s, m/s^2 and m/s^3 (jerk).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class CollisionError(RuntimeError):
    """Raised when a bumper-to-bumper gap becomes non-positive."""

    def __init__(self, message: str, time_s: float | None = None, vehicle_id: int | None = None):
        super().__init__(message)
        self.time_s = time_s
        self.vehicle_id = vehicle_id


@dataclass(frozen=True)
class KinematicState:
    position: float
    velocity: float
    acceleration: float = 0.0


@dataclass(frozen=True)
class IdmParams:
    max_accel: float
    comfort_decel: float
    min_gap: float
    time_headway: float
    desired_speed: float
    vehicle_length: float
    delta: float = 4.0

    def __post_init__(self):
        for name in ("max_accel", "comfort_decel", "min_gap", "time_headway",
                     "desired_speed", "vehicle_length", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive, got {getattr(self, name)}")


# Calibrated human-driver parameters (car / truck).
CAR = IdmParams(max_accel=1.13, comfort_decel=4.0, min_gap=8.16, time_headway=1.13,
                desired_speed=35.96, vehicle_length=4.24)
TRUCK = IdmParams(max_accel=1.5, comfort_decel=4.0, min_gap=9.66, time_headway=1.72,
                  desired_speed=54.25, vehicle_length=11.82)

IDM_BY_CLASS = {"car": CAR, "truck": TRUCK}


@dataclass(frozen=True)
class LeadProfile:
    """Constant speed until ``onset``, then a sinusoidal slow-down/speed-up cycle."""

    base_speed: float = 25.0
    amplitude: float = 5.0
    angular_rate: float = 0.1667
    onset: float = 4.8
    duration: float = 180.0

    def __post_init__(self):
        if not self.amplitude < self.base_speed:
            raise ValueError("amplitude must be below base_speed so the leader never reverses")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    def constant(self) -> "LeadProfile":
        """The same profile with the oscillation switched off."""
        return replace(self, amplitude=0.0)


def step_cav_kinematics(state: KinematicState, jerk: float, dt: float) -> KinematicState:
    """Advance a jerk-controlled triple integrator by one forward-Euler step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return KinematicState(
        position=state.position + state.velocity * dt,
        velocity=state.velocity + state.acceleration * dt,
        acceleration=state.acceleration + jerk * dt,
    )


def idm_desired_gap(v, dv, params: IdmParams):
    """Dynamic desired gap ``s*``; ``dv`` is preceding minus own velocity."""
    closing = -np.asarray(dv, dtype=float)
    v = np.asarray(v, dtype=float)
    s_star = (params.min_gap + v * params.time_headway
              + v * closing / (2.0 * math.sqrt(params.max_accel * params.comfort_decel)))
    return np.maximum(s_star, params.min_gap)


def idm_acceleration(v, gap, dv, params: IdmParams):
    """IDM acceleration for own speed ``v``, bumper-to-bumper ``gap`` and ``dv = v_pred - v``.

    Works elementwise on arrays. Raises :class:`CollisionError` on any gap <= 0.
    """
    gap_arr = np.asarray(gap, dtype=float)
    if np.any(gap_arr <= 0):
        raise CollisionError(f"non-positive gap {float(np.min(gap_arr)):.4f} m")
    v_arr = np.asarray(v, dtype=float)
    if np.any(v_arr < 0):
        raise ValueError("velocity must be non-negative")
    s_star = idm_desired_gap(v_arr, dv, params)
    acc = params.max_accel * (1.0 - (v_arr / params.desired_speed) ** params.delta
                              - (s_star / gap_arr) ** 2)
    if np.ndim(acc) == 0:
        return float(acc)
    return acc


def idm_equilibrium_gap(v: float, params: IdmParams) -> float:
    """Gap at which IDM acceleration vanishes for steady speed ``v`` (dv = 0)."""
    if not 0 <= v < params.desired_speed:
        raise ValueError("equilibrium exists only for 0 <= v < desired_speed")
    return (params.min_gap + v * params.time_headway) / math.sqrt(
        1.0 - (v / params.desired_speed) ** params.delta)


def leading_velocity(t, profile: LeadProfile = LeadProfile()):
    """Velocity of the head vehicle at time ``t`` (scalar or array)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < -1e-9) or np.any(t_arr > profile.duration + 1e-9):
        raise ValueError(f"t must lie in [0, {profile.duration}] s")
    phase = np.maximum(t_arr - profile.onset, 0.0)
    v = profile.base_speed - profile.amplitude * np.sin(profile.angular_rate * phase)
    if np.ndim(v) == 0:
        return float(v)
    return v
