"""Multi-step prediction scores in the per-horizon layout (0.6 s / 1.2 s / 1.8 s / average)."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .dataio import DT_DATA, DV, H, Samples, V

REPORT_STEPS = (5, 10, 15)
REPORT_COLUMNS = ("horizon_s", "v_rmse", "h_rmse")


def constant_velocity_baseline(samples: Samples, dt: float = DT_DATA) -> np.ndarray:
    """Hold the last observed speed; integrate the headway with the last velocity difference."""
    T = samples.context - 1
    cur = samples.data[:, T]
    f = np.arange(1, samples.horizon + 1) * dt
    v = np.repeat(cur[:, V, None], samples.horizon, axis=1)
    h = cur[:, H, None] + f[None] * cur[:, DV, None]
    return np.stack([v, h], axis=-1)


def koopman_predictions(model, samples: Samples) -> np.ndarray:
    ctx = samples.context_features[:, -model.context:]
    return model.predict(ctx, samples.future_lead_v)


def horizon_table(pred: np.ndarray, targets: np.ndarray, dt: float = DT_DATA,
                  steps=REPORT_STEPS) -> pd.DataFrame:
    """RMSE at each reporting step plus the pooled average over the full horizon."""
    pred, targets = np.asarray(pred, dtype=float), np.asarray(targets, dtype=float)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {targets.shape}")
    F = pred.shape[1]
    rows = []
    for k in (s for s in steps if s <= F):
        err = pred[:, k - 1] - targets[:, k - 1]
        rows.append({"horizon_s": f"{k * dt:.1f}", "v_rmse": float(np.sqrt(np.mean(err[:, 0] ** 2))),
                     "h_rmse": float(np.sqrt(np.mean(err[:, 1] ** 2)))})
    err = pred - targets
    rows.append({"horizon_s": "average", "v_rmse": float(np.sqrt(np.mean(err[..., 0] ** 2))),
                 "h_rmse": float(np.sqrt(np.mean(err[..., 1] ** 2)))})
    return pd.DataFrame(rows, columns=list(REPORT_COLUMNS))
