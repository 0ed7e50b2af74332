"""Independent per-vehicle reference implementations used by several test modules."""

import numpy as np

from mixedkoop.platoon import PlatoonConfig


def member_kinds(codes: str) -> list[str]:
    return ["cav_first" if i == 0 else ("cav_later" if c == "C" else "hdv") for i, c in enumerate(codes)]


def vehicle_model(models, code):
    if not isinstance(models, dict):
        return models
    return models["truck" if code == "T" else "car"]


def physical_velocity(kind, state, model):
    if kind == "hdv":
        mu, sd = model.v_scale
        return sd * (model.C[0] @ state) + mu
    return state[1]


def step_members(codes, states, models, u, dt):
    """Advance each member on its own: CAV triple integrator, HDV one Koopman step."""
    kinds = member_kinds(codes)
    out, g = [], 0
    for i, (kind, x) in enumerate(zip(kinds, states)):
        mdl = vehicle_model(models, codes[i]) if kind == "hdv" else None
        if kind != "cav_first":
            pm = vehicle_model(models, codes[i - 1]) if kinds[i - 1] == "hdv" else None
            vp = physical_velocity(kinds[i - 1], states[i - 1], pm)
        if kind == "hdv":
            mu, sd = mdl.v_scale
            out.append(mdl.A @ x + mdl.B[:, 0] * (vp - mu) / sd)
            continue
        p_or_h, v, a = x
        nxt = np.array([p_or_h + v * dt if kind == "cav_first" else p_or_h + (vp - v) * dt,
                        v + a * dt, a + u[g] * dt])
        out.append(nxt)
        g += 1
    return out


def member_outputs(codes, states, models):
    kinds = member_kinds(codes)
    es = []
    for i, (kind, x) in enumerate(zip(kinds, states)):
        if kind != "hdv":
            es.extend(x)
            continue
        mdl = vehicle_model(models, codes[i])
        mu_v, sd_v = mdl.v_scale
        mu_h, sd_h = mdl.h_scale
        v = sd_v * (mdl.C[0] @ x) + mu_v
        pm = vehicle_model(models, codes[i - 1]) if kinds[i - 1] == "hdv" else None
        vp = physical_velocity(kinds[i - 1], states[i - 1], pm)
        es.extend([sd_h * (mdl.C[1] @ x) + mu_h, v, vp - v])
    return np.array(es)


def random_roster(rng, max_len=12) -> str:
    n = int(rng.integers(1, max_len + 1))
    rest = "".join(rng.choice(list("CHHT"), size=n - 1))
    return "C" + rest


def random_states(rng, codes, models):
    states = []
    for i, kind in enumerate(member_kinds(codes)):
        if kind == "hdv":
            states.append(rng.normal(size=vehicle_model(models, codes[i]).dim))
        else:
            states.append(np.array([rng.uniform(5, 60) if kind == "cav_later" else 0.0,
                                    rng.uniform(15, 30), rng.normal()]))
    return states


def config(codes) -> PlatoonConfig:
    return PlatoonConfig.from_codes(codes)
