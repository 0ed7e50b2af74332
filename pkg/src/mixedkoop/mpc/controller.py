"""Condensed MPC for one platoon segment: cost, constraints and the receding-horizon step."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..sysasm import (CAV_FIRST, HDV, PlatoonState, PredictionMatrices, ReferenceTrajectory, SystemMatrices,
                      assemble_system, build_prediction_matrices, encode_platoon_state, reference_trajectory)
from .qp import QpError, QpInfeasibleError, QpProblem, QpSolution, solve_qp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcWeights:
    q_cav_v: float = 10.0
    q_hdv_dv: float = 20.0
    r_u: float = 2.0
    horizon: int = 10

    def __post_init__(self):
        if not (self.q_cav_v > 0 and self.q_hdv_dv > 0 and self.r_u > 0):
            raise ValueError("MPC weights must be strictly positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def es_weights(self, sys: SystemMatrices) -> np.ndarray:
        """Diagonal of the per-step output weight: CAV velocity and HDV velocity difference."""
        q = np.zeros(sys.n_es)
        for member, quantity in sys.es_labels:
            kind = sys.kinds[member]
            if kind != HDV and quantity == "v":
                q[sys.es_index(member, "v")] = self.q_cav_v
            elif kind == HDV and quantity == "dv":
                q[sys.es_index(member, "dv")] = self.q_hdv_dv
        return q


@dataclass(frozen=True)
class ConstraintSet:
    h_min: float = 20.0
    h_max: float = 150.0
    v_min: float = 0.0
    v_max: float = 150.0
    a_min: float = -6.0
    a_max: float = 6.0
    u_min: float = -6.0
    u_max: float = 6.0
    slack_weight: float = 1e4

    def __post_init__(self):
        for lo, hi in ((self.h_min, self.h_max), (self.v_min, self.v_max),
                       (self.a_min, self.a_max), (self.u_min, self.u_max)):
            if not lo < hi:
                raise ValueError("each constraint pair needs min < max")
        if self.slack_weight <= 0:
            raise ValueError("slack weight must be positive")


def build_qp(state: PlatoonState, sys: SystemMatrices, pred: PredictionMatrices, ref: ReferenceTrajectory,
             weights: MpcWeights, constraints: ConstraintSet, soft: bool = False) -> QpProblem:
    """Condensed QP over the stacked jerk sequence ``U`` (time-major, one entry per CAV).

    Headway and velocity rows on the predicted outputs are hard in the default mode; with
    ``soft`` each (vehicle, quantity) pair gets one slack shared over the horizon, penalised
    by ``rho * (xi + xi^2 / 2)``. CAV acceleration rows and the jerk box stay hard.
    """
    S = np.asarray(state.S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise ValueError("non-finite platoon state")
    N, m, G = pred.horizon, pred.n_es, pred.n_cav
    q = np.tile(weights.es_weights(sys), N)
    free = pred.AA @ S + pred.cc  # predicted ES with U = 0
    QB = q[:, None] * pred.BB
    H = 2.0 * (pred.BB.T @ QB + weights.r_u * np.eye(N * G))
    F = 2.0 * (free - ref.stacked) @ QB

    rows, rhs, labels, soft_group = [], [], [], []

    def add(coef, bound, label, group):
        if not np.any(coef) and bound >= 0:
            return  # input-independent and already satisfied
        rows.append(coef)
        rhs.append(bound)
        labels.append(label)
        soft_group.append(group)

    c = constraints
    for member, quantity in sys.es_labels:
        kind = sys.kinds[member]
        r0 = sys.es_index(member, quantity)
        for i in range(N):
            r = i * m + r0
            bb, ff = pred.BB[r], free[r]
            if quantity == "h":
                add(-bb, ff - c.h_min, (member, "h_min", i), (member, "h"))
                add(bb, c.h_max - ff, (member, "h_max", i), (member, "h"))
            elif quantity == "v":
                add(-bb, ff - c.v_min, (member, "v_min", i), (member, "v"))
                add(bb, c.v_max - ff, (member, "v_max", i), (member, "v"))
            elif quantity == "a":
                add(-bb, ff - c.a_min, (member, "a_min", i), None)
                add(bb, c.a_max - ff, (member, "a_max", i), None)
            elif quantity == "p" and kind == CAV_FIRST and np.isfinite(state.lead_gap):
                # gap to the external predecessor, which is assumed to hold its speed
                gap_free = state.lead_gap + (i + 1) * sys.dt * state.lead_velocity - ff
                add(bb, gap_free - c.h_min, (member, "lead_gap_min", i), (member, "h"))
    Gm = np.asarray(rows).reshape(-1, N * G)
    gv = np.asarray(rhs, dtype=float)
    lb = np.full(N * G, c.u_min)
    ub = np.full(N * G, c.u_max)
    if not soft:
        return QpProblem(H, F, Gm, gv, lb, ub, n_u=N * G, soft=False, row_labels=labels)

    groups = sorted({g for g in soft_group if g is not None}, key=str)
    ns = len(groups)
    col = {g: k for k, g in enumerate(groups)}
    Gs = np.zeros((len(rows), ns))
    for r, g in enumerate(soft_group):
        if g is not None:
            Gs[r, col[g]] = -1.0
    Hs = np.zeros((N * G + ns, N * G + ns))
    Hs[:N * G, :N * G] = H
    Hs[N * G:, N * G:] = c.slack_weight * np.eye(ns)
    Fs = np.concatenate([F, np.full(ns, c.slack_weight)])
    return QpProblem(Hs, Fs, np.hstack([Gm, Gs]), gv, np.concatenate([lb, np.zeros(ns)]),
                     np.concatenate([ub, np.full(ns, np.inf)]), n_u=N * G, soft=True,
                     row_labels=labels + [("slack", g) for g in groups])


@dataclass
class ControlResult:
    jerks: np.ndarray  # first-step command per CAV member
    plan: np.ndarray  # (N_P, G)
    predicted_es: np.ndarray  # (N_P, n_es)
    solution: QpSolution | None
    solve_time: float
    fallback: bool = False
    message: str = ""

    @property
    def diagnostics(self) -> dict:
        s = self.solution
        return {
            "iterations": s.iterations if s else 0,
            "kkt_residual": s.kkt_residual if s else float("nan"),
            "slack_norm": s.slack_norm if s else 0.0,
            "soft": bool(s.soft) if s else False,
            "fallback": self.fallback,
            "solve_time_s": self.solve_time,
        }


@dataclass
class SegmentController:
    """One MPC instance: frozen matrices for a roster plus the warm start between steps."""

    sys: SystemMatrices
    pred: PredictionMatrices
    weights: MpcWeights = field(default_factory=MpcWeights)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    tol: float = 1e-6
    max_iter: int = 200
    _warm: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, config, models, dt: float, weights: MpcWeights | None = None,
              constraints: ConstraintSet | None = None, **kwargs) -> "SegmentController":
        weights = weights or MpcWeights()
        sys = assemble_system(config, models, dt)
        return cls(sys, build_prediction_matrices(sys, weights.horizon), weights,
                   constraints or ConstraintSet(), **kwargs)

    def step(self, state: PlatoonState, ref: ReferenceTrajectory) -> ControlResult:
        t0 = time.perf_counter()
        N, G = self.pred.horizon, self.pred.n_cav
        sol, message = None, ""
        try:
            try:
                qp = build_qp(state, self.sys, self.pred, ref, self.weights, self.constraints, soft=False)
                sol = solve_qp(qp, self.tol, self.max_iter, self._warm)
            except QpInfeasibleError:
                qp = build_qp(state, self.sys, self.pred, ref, self.weights, self.constraints, soft=True)
                warm = None if self._warm is None else np.concatenate([self._warm, np.zeros(qp.n - N * G)])
                sol = solve_qp(qp, self.tol, self.max_iter, warm)
        except (QpError, ValueError, np.linalg.LinAlgError) as exc:
            message = f"{type(exc).__name__}: {exc}"
            log.warning("MPC solve failed, applying zero jerk: %s", message)
        elapsed = time.perf_counter() - t0
        if sol is None:
            self._warm = None
            plan = np.zeros((N, G))
            es = (self.pred.AA @ state.S + self.pred.cc).reshape(N, -1)
            return ControlResult(np.zeros(G), plan, es, None, elapsed, True, message)
        u = sol.u.copy()
        self._warm = np.concatenate([u[G:], u[-G:]])
        es = (self.pred.AA @ state.S + self.pred.BB @ u + self.pred.cc).reshape(N, -1)
        return ControlResult(u[:G].copy(), u.reshape(N, G), es, sol, elapsed)

    def reset(self) -> None:
        self._warm = None


def control_step(measurements, models, config, weights: MpcWeights | None = None,
                 constraints: ConstraintSet | None = None, dt: float = 0.12,
                 velocity_history: list | None = None, lead_gap: float = np.nan,
                 lead_velocity: float = np.nan, controller: SegmentController | None = None) -> ControlResult:
    """Encode, assemble, reference, build and solve; returns the first-step jerks.

    ``velocity_history[g]`` holds predecessor velocities of CAV ``g``; without it the
    references fall back to each predecessor's current velocity. Pass a ``controller``
    to reuse its matrices and warm start across calls.
    """
    ctrl = controller or SegmentController.build(config, models, dt, weights, constraints)
    sys = ctrl.sys
    state = encode_platoon_state(measurements, sys, models, lead_gap, lead_velocity)
    if velocity_history is None:
        velocity_history = []
        for member in sys.cav_members():
            if member == 0:
                velocity_history.append([lead_velocity])
            else:
                velocity_history.append([float(sys.output(state.S)[sys.es_index(member - 1, "v")])])
    ref = reference_trajectory(velocity_history, sys, ctrl.weights.horizon)
    return ctrl.step(state, ref)
