"""Reconstruction / prediction / linear-evolution losses and dynamic loss weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..dataio import LEAD

COMPONENTS = ("L_C", "L_P", "L_E")


@dataclass
class LossWeights:
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    history: list[tuple[float, float, float]] = field(default_factory=list)


def lifted_paths(net, batch: torch.Tensor, forced=None):
    """Encode every offset window and roll the linear model out from the first one.

    ``batch`` holds normalized windows ``(n, P + F + 1, 6)``. Returns
    ``(s_enc, s_pred, es_true)`` with shapes ``(n, F+1, d)``, ``(n, F, d)``, ``(n, F+1, 2)``:
    ``s_enc[:, f]`` encodes the window ending at T+f (ground-truth context at every offset).
    """
    P, F = net.config.context, net.config.horizon
    n = batch.shape[0]
    ctx = torch.stack([batch[:, f:f + P, :5] for f in range(F + 1)], dim=1)
    s_enc = net.encode(ctx.reshape(n * (F + 1), P, 5), forced).reshape(n, F + 1, -1)
    u = batch[:, P - 1:P - 1 + F, LEAD]
    s_pred = net.evolve(s_enc[:, 0], u)
    es_true = batch[:, P - 1:P + F, :2]
    return s_enc, s_pred, es_true


def loss_components(net, s_enc, s_pred, es_true):
    L_C = torch.mean((net.decode(s_enc) - es_true) ** 2)
    L_P = torch.mean((net.decode(s_pred) - es_true[:, 1:]) ** 2)
    L_E = torch.mean((s_pred[:, -1] - s_enc[:, -1]) ** 2)
    return L_C, L_P, L_E


def loss_total(net, batch: torch.Tensor, weights: LossWeights | tuple = (1.0, 1.0, 1.0)):
    """Weighted sum ``a_C L_C + a_P L_P + a_E L_E`` and the three components."""
    alpha = weights.alpha if isinstance(weights, LossWeights) else tuple(weights)
    comps = loss_components(net, *lifted_paths(net, batch))
    total = sum(a * c for a, c in zip(alpha, comps))
    return total, dict(zip(COMPONENTS, comps))


def dwa_update(history, temperature: float = 2.0, total: float = 3.0) -> LossWeights:
    """Dynamic weight averaging from per-epoch component losses (oldest first).

    Weights are ``total * softmax(r_k / T)`` with ``r_k`` the ratio of the last two epochs'
    losses; uniform until two epochs exist.
    """
    history = [tuple(map(float, h)) for h in history]
    if len(history) < 2:
        return LossWeights((1.0, 1.0, 1.0), history)
    last, prev = history[-1], history[-2]
    ratios = [l / p if p > 0 else 1.0 for l, p in zip(last, prev)]
    m = max(r / temperature for r in ratios)
    ex = [math.exp(r / temperature - m) for r in ratios]
    z = sum(ex)
    return LossWeights(tuple(total * e / z for e in ex), history)
