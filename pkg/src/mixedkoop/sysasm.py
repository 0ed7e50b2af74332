"""Block-structured linear predictive model of a CAV-led platoon segment.

Stored state ``S`` per member, front to back:

* first CAV: ``(p, v, a)`` with ``p`` measured from its own position at the current step,
* HDV: lifted Koopman state ``s`` (``d`` entries, normalized units),
* later CAV: ``(h, v, a)`` with ``h' = h + (v_pred - v) dt``.

The emitted output ``ES`` lists, per member, ``(p, v, a)`` / ``(h, v, dv)`` / ``(h, v, a)`` in
physical units with ``dv = v_pred - v``. Normalization offsets make the model affine, so the
matrices carry a constant ``drift`` (state update) and ``output_offset`` (read-out).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .koopman import KoopmanModel
from .platoon import PlatoonConfig

CAV_FIRST, HDV, CAV_LATER = "cav_first", "hdv", "cav_later"


def _member_kinds(config: PlatoonConfig) -> list[str]:
    if not config.vehicles or config.vehicles[0].role != "cav":
        raise ValueError("the first vehicle of a controlled system must be a CAV "
                         "(an HDV at the front has no modeled predecessor)")
    kinds = []
    for i, spec in enumerate(config.vehicles):
        cav = spec.is_controlled_cav
        if i == 0 and not cav:
            raise ValueError("the first CAV of a controlled system must have an engaged controller")
        kinds.append(CAV_FIRST if i == 0 else (CAV_LATER if cav else HDV))
    return kinds


def model_for(spec, models) -> KoopmanModel:
    """Pick the Koopman model for a vehicle; ``models`` is one shared model or a class map."""
    if isinstance(models, KoopmanModel):
        return models
    return models[spec.vclass] if spec.vclass in models else models["car"]


@dataclass
class SystemMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    drift: np.ndarray
    output_offset: np.ndarray
    kinds: list[str]
    state_slices: list[slice]
    es_slices: list[slice]
    es_labels: list[tuple[int, str]]  # (member, quantity) per ES row
    dt: float
    config: PlatoonConfig = field(repr=False)

    @property
    def n_state(self) -> int:
        return self.A.shape[0]

    @property
    def n_es(self) -> int:
        return self.C.shape[0]

    @property
    def n_cav(self) -> int:
        return self.B.shape[1]

    def cav_members(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k != HDV]

    def es_index(self, member: int, quantity: str) -> int:
        return self.es_labels.index((member, quantity))

    def step(self, S: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ S + self.B @ np.asarray(u, dtype=float) + self.drift

    def output(self, S: np.ndarray) -> np.ndarray:
        return self.C @ S + self.output_offset


def assemble_system(config: PlatoonConfig, models, dt: float) -> SystemMatrices:
    """Global ``(A_S, B_S, C_S)`` plus affine offsets for one controlled segment."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    kinds = _member_kinds(config)
    member_models = [model_for(spec, models) if k == HDV else None for spec, k in zip(config.vehicles, kinds)]
    sizes = [m.dim if k == HDV else 3 for k, m in zip(kinds, member_models)]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n, m_es, G = int(offsets[-1]), 3 * len(kinds), kinds.count(CAV_FIRST) + kinds.count(CAV_LATER)
    A = np.zeros((n, n))
    B = np.zeros((n, G))
    C = np.zeros((m_es, n))
    drift = np.zeros(n)
    off = np.zeros(m_es)
    sl = [slice(offsets[i], offsets[i + 1]) for i in range(len(kinds))]
    es_sl = [slice(3 * i, 3 * i + 3) for i in range(len(kinds))]
    labels: list[tuple[int, str]] = []

    def velocity_row(i: int):
        """Physical velocity of member ``i`` as (row over S, constant)."""
        row = np.zeros(n)
        if kinds[i] == HDV:
            mdl = member_models[i]
            mu, sd = mdl.v_scale
            row[sl[i]] = sd * mdl.C[0]
            return row, mu
        row[sl[i].start + 1] = 1.0
        return row, 0.0

    cav_col = 0
    for i, kind in enumerate(kinds):
        o = sl[i].start
        if kind in (CAV_FIRST, CAV_LATER):
            A[o:o + 3, o:o + 3] = [[1.0, dt, 0.0], [0.0, 1.0, dt], [0.0, 0.0, 1.0]]
            B[o + 2, cav_col] = dt
            cav_col += 1
            if kind == CAV_LATER:
                vp, cp = velocity_row(i - 1)
                A[o] += dt * vp
                A[o, o + 1] = -dt
                drift[o] += dt * cp
            # ES rows: (p|h, v, a) are copies of the stored triple
            C[es_sl[i], o:o + 3] = np.eye(3)
            labels += [(i, "p" if kind == CAV_FIRST else "h"), (i, "v"), (i, "a")]
        else:
            mdl = member_models[i]
            mu_v, sd_v = mdl.v_scale
            mu_h, sd_h = mdl.h_scale
            b = mdl.B[:, 0]
            A[sl[i], sl[i]] = mdl.A
            # input u = (v_pred - mu_v) / sd_v, normalized with this vehicle's stats
            vp, cp = velocity_row(i - 1)
            A[sl[i]] += np.outer(b, vp / sd_v)
            drift[sl[i]] += b * (cp - mu_v) / sd_v
            e = es_sl[i].start
            C[e, sl[i]] = sd_h * mdl.C[1]
            off[e] = mu_h
            C[e + 1, sl[i]] = sd_v * mdl.C[0]
            off[e + 1] = mu_v
            C[e + 2] = vp
            C[e + 2, sl[i]] -= sd_v * mdl.C[0]
            off[e + 2] = cp - mu_v
            labels += [(i, "h"), (i, "v"), (i, "dv")]
    return SystemMatrices(A, B, C, drift, off, kinds, sl, es_sl, labels, float(dt), config)


@dataclass
class PredictionMatrices:
    """``ES(t+i) = AA_i S + BB_i U + cc_i`` for i = 1..N_P, rows stacked by step."""

    AA: np.ndarray
    BB: np.ndarray
    cc: np.ndarray
    horizon: int
    n_es: int
    n_cav: int


def build_prediction_matrices(sys: SystemMatrices, N_P: int) -> PredictionMatrices:
    if N_P < 1:
        raise ValueError("prediction horizon must be >= 1")
    m, n, G = sys.n_es, sys.n_state, sys.n_cav
    AA = np.zeros((N_P * m, n))
    BB = np.zeros((N_P * m, N_P * G))
    cc = np.zeros(N_P * m)
    # CA^k products, k = 0..N_P
    CAk = [sys.C.copy()]
    for _ in range(N_P):
        CAk.append(CAk[-1] @ sys.A)
    drift_acc = np.zeros(m)
    for i in range(1, N_P + 1):
        rows = slice((i - 1) * m, i * m)
        AA[rows] = CAk[i]
        drift_acc = drift_acc + CAk[i - 1] @ sys.drift
        cc[rows] = drift_acc + sys.output_offset
        for j in range(i):
            BB[rows, j * G:(j + 1) * G] = CAk[i - j - 1] @ sys.B
    return PredictionMatrices(AA, BB, cc, N_P, m, G)


# --------------------------------------------------------------------------- state


@dataclass
class VehicleMeasurement:
    velocity: float
    acceleration: float = 0.0
    headway: float = np.nan
    context: np.ndarray | None = None  # (P, 5) raw features ending at the current step


@dataclass
class PlatoonState:
    S: np.ndarray
    lead_gap: float  # first CAV to its external predecessor
    lead_velocity: float


def encode_platoon_state(measurements: list[VehicleMeasurement], sys: SystemMatrices, models,
                         lead_gap: float = np.nan, lead_velocity: float = np.nan,
                         lifted: dict[int, np.ndarray] | None = None) -> PlatoonState:
    """Stack fresh measurements into ``S``; HDVs are lifted through their model's encoder.

    ``lifted`` may carry already-encoded HDV states keyed by member index.
    """
    if len(measurements) != len(sys.kinds):
        raise ValueError(f"expected {len(sys.kinds)} measurements, got {len(measurements)}")
    S = np.zeros(sys.n_state)
    todo: dict[int, list[int]] = {}
    for i, (kind, meas) in enumerate(zip(sys.kinds, measurements)):
        o = sys.state_slices[i].start
        if kind == CAV_FIRST:
            S[o:o + 3] = (0.0, meas.velocity, meas.acceleration)
        elif kind == CAV_LATER:
            S[o:o + 3] = (meas.headway, meas.velocity, meas.acceleration)
        elif lifted is not None and i in lifted:
            S[sys.state_slices[i]] = lifted[i]
        else:
            if meas.context is None:
                raise ValueError(f"missing context window for member {i} (HDV)")
            todo.setdefault(id(model_for(sys.config.vehicles[i], models)), []).append(i)
    for ids in todo.values():
        mdl = model_for(sys.config.vehicles[ids[0]], models)
        ctx = np.stack([np.asarray(measurements[i].context, dtype=float)[-mdl.context:] for i in ids])
        if ctx.shape[1] < mdl.context:
            raise ValueError(f"context window of member {ids[0]} is shorter than {mdl.context} steps")
        enc = mdl.encode(ctx)
        for i, s in zip(ids, enc):
            S[sys.state_slices[i]] = s
    if not np.all(np.isfinite(S)):
        raise ValueError("non-finite platoon state")
    return PlatoonState(S, float(lead_gap), float(lead_velocity))


# --------------------------------------------------------------------------- reference


@dataclass
class ReferenceTrajectory:
    es_ref: np.ndarray  # (N_P, n_es)
    cav_speed: np.ndarray  # per CAV member

    @property
    def stacked(self) -> np.ndarray:
        return self.es_ref.reshape(-1)


def reference_trajectory(history: list, sys: SystemMatrices, N_P: int) -> ReferenceTrajectory:
    """CAV speed references from their predecessors' recent velocities.

    ``history[g]`` holds the predecessor velocity samples of CAV ``g`` (oldest first). Short
    histories are padded with their earliest value to N_P samples before averaging.
    """
    cavs = sys.cav_members()
    if len(history) != len(cavs):
        raise ValueError(f"need one history per CAV ({len(cavs)}), got {len(history)}")
    ref = np.zeros((N_P, sys.n_es))
    speeds = np.zeros(len(cavs))
    for g, (member, h) in enumerate(zip(cavs, history)):
        h = np.asarray(h, dtype=float).reshape(-1)
        if h.size == 0:
            raise ValueError(f"empty velocity history for CAV {g}")
        h = h[-N_P:]
        if h.size < N_P:
            h = np.concatenate([np.full(N_P - h.size, h[0]), h])
        speeds[g] = h.mean()
        ref[:, sys.es_index(member, "v")] = speeds[g]
    return ReferenceTrajectory(ref, speeds)


def structural_self_test(sys: SystemMatrices, tol: float = 0.0) -> None:
    """Check that each stored entry only reaches the ES rows the layout allows.

    Own rows for every member, plus the follower's ``dv`` row for a member's velocity.
    CAV entries must map one-to-one onto their own ES triple. Raises ``AssertionError``.
    """
    allowed = np.zeros((sys.n_es, sys.n_state), dtype=bool)
    for i, kind in enumerate(sys.kinds):
        allowed[sys.es_slices[i], sys.state_slices[i]] = True
        if i + 1 < len(sys.kinds) and sys.kinds[i + 1] == HDV:
            allowed[sys.es_index(i + 1, "dv"), sys.state_slices[i]] = True
    for col in range(sys.n_state):
        e = np.zeros(sys.n_state)
        e[col] = 1.0
        changed = np.abs(sys.output(e) - sys.output(np.zeros(sys.n_state))) > tol
        bad = np.nonzero(changed & ~allowed[:, col])[0]
        if bad.size:
            raise AssertionError(f"state entry {col} reaches unexpected ES rows {bad.tolist()}")
    for i, kind in enumerate(sys.kinds):
        if kind == HDV:
            continue
        o, es = sys.state_slices[i].start, sys.es_slices[i].start
        for k in range(3):
            e = np.zeros(sys.n_state)
            e[o + k] = 1.0
            hit = sys.C @ e
            own = hit[sys.es_slices[i]]
            if not (own[k] == 1.0 and np.count_nonzero(own) == 1):
                raise AssertionError(f"CAV member {i} entry {k} does not map onto ES row {es + k}")
