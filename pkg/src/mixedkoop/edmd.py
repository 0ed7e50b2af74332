"""Closed-form Koopman identification over a radial-basis dictionary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from .dataio import DatasetSplit, LEAD, Normalizer, Samples, V, H
from .koopman import KoopmanModel, evolve, load_checkpoint, save_checkpoint

RANK_TOL = 1e-10


class RankDeficiencyError(ValueError):
    pass


@dataclass(frozen=True)
class RbfDictionary:
    centers: np.ndarray  # (L, k)
    widths: np.ndarray  # (L,)
    include_state: bool = True

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        widths = np.broadcast_to(np.asarray(self.widths, dtype=float), (centers.shape[0],)).copy()
        if centers.shape[0] < 1:
            raise ValueError("dictionary needs at least one center")
        if np.any(widths <= 0):
            raise ValueError("RBF widths must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)

    @property
    def state_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def dim(self) -> int:
        return len(self.widths) + (self.state_dim if self.include_state else 0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return lift_rbf(x, self)


def lift_rbf(x: np.ndarray, dictionary: RbfDictionary) -> np.ndarray:
    """``[x; exp(-|x - c_j|^2 / w_j^2)]``; ``x`` may be one state or a batch ``(n, k)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    d2 = ((xb[:, None, :] - dictionary.centers[None]) ** 2).sum(-1)
    phi = np.exp(-d2 / dictionary.widths[None] ** 2)
    if dictionary.include_state:
        phi = np.concatenate([xb, phi], axis=1)
    return phi[0] if single else phi


def default_dictionary(states: np.ndarray, n_centers: int = 20, seed: int = 0,
                       include_state: bool = True) -> RbfDictionary:
    """k-means centers over the training states; one shared width (median center spacing)."""
    states = np.asarray(states, dtype=float)
    centers, _ = kmeans2(states, n_centers, minit="++", seed=seed)
    width = float(np.median(pdist(centers))) if n_centers > 1 else float(np.std(states)) or 1.0
    return RbfDictionary(centers, np.full(n_centers, width), include_state)


@dataclass
class EdmdFit:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    residual: float
    row_residuals: np.ndarray  # residual norm per lifted coordinate
    singular_values: np.ndarray

    def to_model(self, normalizer: Normalizer | None = None, encoder=None) -> KoopmanModel:
        return KoopmanModel(self.A, self.B, self.C, normalizer or Normalizer.identity(), encoder,
                            meta={"variant": "edmd", "residual": self.residual})


def fit_edmd(X: np.ndarray, U: np.ndarray, Y: np.ndarray,
             lift: Callable[[np.ndarray], np.ndarray], observed=(0, 1)) -> EdmdFit:
    """Least-squares ``[A B]`` over snapshot pairs, then the read-out ``C``.

    ``X``/``Y`` are ``(n, k)`` states at t and t+1, ``U`` the ``(n,)`` or ``(n, m)`` inputs.
    The lifted state block must have full row rank; a degenerate input block (for example
    identically zero inputs) falls back to the minimum-norm solution.
    """
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    U = np.asarray(U, dtype=float).reshape(len(X), -1)
    PX, PY = lift(X), lift(Y)
    n, d = PX.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} snapshot pairs for a {d}-dimensional lifting, got {n}")
    sv = np.linalg.svd(PX, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    if rank < d:
        raise RankDeficiencyError(f"lifted snapshot matrix is rank deficient by {d - rank} of {d} dimension(s)")

    Z = np.concatenate([PX, U], axis=1)
    K, *_ = np.linalg.lstsq(Z, PY, rcond=RANK_TOL)
    K = K.T
    A, B = K[:, :d], K[:, d:]
    R = PY - Z @ K.T
    Cmat, *_ = np.linalg.lstsq(PY, Y[:, list(observed)], rcond=RANK_TOL)
    return EdmdFit(A, B, Cmat.T, float(np.linalg.norm(R)), np.linalg.norm(R, axis=0), sv)


def predict_edmd(model: KoopmanModel, x0: np.ndarray, lead_u: np.ndarray, lift=None) -> np.ndarray:
    """Forecast ``C s_f`` for f = 1..F from state ``x0`` under inputs ``lead_u``.

    ``lift`` defaults to the model's RBF dictionary, or the identity when it has none.
    Inputs and outputs are in the units the model was fitted in.
    """
    lead_u = np.asarray(lead_u, dtype=float)
    if lead_u.shape[-1] < 1:
        raise ValueError("need at least one input step")
    if lift is None:
        enc = model.encoder
        lift = enc.dictionary if isinstance(enc, RbfEncoder) else (lambda x: np.asarray(x, dtype=float))
    return evolve(lift(x0), lead_u, model.A, model.B) @ model.C.T


class RbfEncoder:
    """Lifts the normalized current (v, h); the trajectory context is not used."""

    kind = "rbf"
    context = 1

    def __init__(self, dictionary: RbfDictionary):
        self.dictionary = dictionary

    def encode(self, contexts: np.ndarray, normalizer: Normalizer) -> np.ndarray:
        es = normalizer.normalize(contexts[:, -1, :2], cols=[V, H])
        return lift_rbf(es, self.dictionary)


def vehicle_snapshots(samples: Samples, normalizer: Normalizer):
    """Consecutive-frame (x_t, u_t, x_t+1) triples from every window, in normalized units."""
    data = samples.data
    X = normalizer.normalize(data[:, :-1, :2], cols=[V, H]).reshape(-1, 2)
    Y = normalizer.normalize(data[:, 1:, :2], cols=[V, H]).reshape(-1, 2)
    U = normalizer.normalize(data[:, :-1, LEAD], cols=V).reshape(-1)
    return X, U, Y


def fit_vehicle_edmd(split: DatasetSplit, n_centers: int = 20, seed: int = 0,
                     max_pairs: int = 50000) -> KoopmanModel:
    """EDMD car-following model on a dataset split (state: normalized v, h; input: lead v)."""
    X, U, Y = vehicle_snapshots(split.train, split.normalizer)
    # overlapping windows repeat frames; thin them deterministically
    if len(X) > max_pairs:
        keep = np.random.default_rng(seed).choice(len(X), max_pairs, replace=False)
        keep.sort()
        X, U, Y = X[keep], U[keep], Y[keep]
    dictionary = default_dictionary(X, n_centers, seed)
    fit = fit_edmd(X, U, Y, dictionary)
    return KoopmanModel(fit.A, fit.B, fit.C, split.normalizer, RbfEncoder(dictionary),
                        meta={"variant": "edmd", "residual": fit.residual, "n_centers": n_centers})


def save_edmd(model: KoopmanModel, path, extra: dict | None = None):
    enc = model.encoder
    manifest = {
        "variant": "edmd",
        "encoder": {"kind": "rbf", "include_state": enc.dictionary.include_state},
        "normalization": model.normalizer.to_dict(),
        "meta": model.meta,
        **(extra or {}),
    }
    tensors = {"A": model.A, "B": model.B, "C": model.C,
               "rbf.centers": enc.dictionary.centers, "rbf.widths": enc.dictionary.widths}
    return save_checkpoint(path, manifest, tensors)


def load_edmd(path) -> KoopmanModel:
    manifest, t = load_checkpoint(path)
    dictionary = RbfDictionary(t["rbf.centers"], t["rbf.widths"], manifest["encoder"]["include_state"])
    return KoopmanModel(t["A"], t["B"], t["C"], Normalizer.from_dict(manifest["normalization"]),
                        RbfEncoder(dictionary), meta=manifest.get("meta", {}))
