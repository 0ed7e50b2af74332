"""Finite Koopman models shared by EDMD and the deep predictor.

A model lifts a vehicle's explicit state (plus, for the deep encoder, its recent
trajectory context) to ``s`` in R^d and then evolves it linearly,
``s[f] = A s[f-1] + B u[f-1]``, where ``u`` is the normalized preceding-vehicle velocity.
``C`` reads normalized ``(v, h)`` back out; denormalization happens only at the boundary.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .dataio import DataError, Normalizer, V, H

CHECKPOINT_FORMAT = "mixedkoop-checkpoint/1"


class Encoder(Protocol):
    kind: str
    context: int

    def encode(self, contexts: np.ndarray, normalizer: Normalizer) -> np.ndarray:
        """Raw ``(n, context, 5)`` feature windows ending at the current step -> ``(n, d)``."""


@dataclass
class KoopmanModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    normalizer: Normalizer
    encoder: Encoder | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(-1, 1)
        self.C = np.asarray(self.C, dtype=float)
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape != (d, 1) or self.C.shape != (2, d):
            raise ValueError(f"inconsistent Koopman block shapes A{self.A.shape} B{self.B.shape} C{self.C.shape}")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def context(self) -> int:
        return self.encoder.context if self.encoder is not None else 1

    @property
    def v_scale(self) -> tuple[float, float]:
        return float(self.normalizer.mean[V]), float(self.normalizer.std[V])

    @property
    def h_scale(self) -> tuple[float, float]:
        return float(self.normalizer.mean[H]), float(self.normalizer.std[H])

    def encode(self, contexts: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            raise ValueError("model has no encoder attached")
        contexts = np.asarray(contexts, dtype=float)
        if contexts.ndim == 2:
            return self.encoder.encode(contexts[None], self.normalizer)[0]
        return self.encoder.encode(contexts, self.normalizer)

    def normalize_lead(self, lead_v):
        mu, sd = self.v_scale
        return (np.asarray(lead_v, dtype=float) - mu) / sd

    def decode(self, s: np.ndarray) -> np.ndarray:
        """Lifted state(s) ``(..., d)`` -> physical ``(..., 2)`` as (v, h)."""
        out = np.asarray(s) @ self.C.T
        return self.normalizer.denormalize(out, cols=[V, H])

    def rollout(self, s0: np.ndarray, lead_v: np.ndarray) -> np.ndarray:
        """Lifted trajectory for physical lead velocities ``(..., F)``."""
        return evolve(s0, self.normalize_lead(lead_v), self.A, self.B)

    def predict(self, contexts: np.ndarray, lead_v: np.ndarray) -> np.ndarray:
        """``(n, F, 2)`` physical (v, h) predictions for raw contexts and lead velocities."""
        return self.decode(self.rollout(self.encode(contexts), lead_v))


def evolve(s0: np.ndarray, inputs: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Stepwise recurrence; ``s0`` is ``(..., d)``, ``inputs`` ``(..., F)`` -> ``(..., F, d)``."""
    s = np.asarray(s0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    b = np.asarray(B, dtype=float).reshape(-1)
    out = np.empty(inputs.shape + (s.shape[-1],))
    for f in range(inputs.shape[-1]):
        s = s @ A.T + inputs[..., f, None] * b
        out[..., f, :] = s
    return out


def evolve_closed_form(s0: np.ndarray, inputs: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Closed-form expansion ``s[F] = A^F s0 + sum_f A^(f-1) B u[F-f]`` for every horizon."""
    s0 = np.asarray(s0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    b = np.asarray(B, dtype=float).reshape(-1)
    F = inputs.shape[-1]
    d = A.shape[0]
    powers = [np.eye(d)]
    for _ in range(F):
        powers.append(powers[-1] @ A)
    out = np.empty(inputs.shape + (d,))
    for k in range(1, F + 1):
        acc = s0 @ powers[k].T
        for f in range(1, k + 1):
            acc = acc + inputs[..., k - f, None] * (powers[f - 1] @ b)
        out[..., k - 1, :] = acc
    return out


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    magnitudes: np.ndarray
    modes: np.ndarray  # (2, d): C projected on the eigenvectors
    unstable: bool

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "magnitudes": self.magnitudes.tolist(),
            "spectral_radius": float(self.magnitudes[0]) if len(self.magnitudes) else 0.0,
            "unstable_autonomous_part": bool(self.unstable),
        }


def koopman_spectrum(model: KoopmanModel) -> SpectrumReport:
    A = model.A
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.all(np.isfinite(A)):
        raise np.linalg.LinAlgError("A has non-finite entries")
    lam, vecs = np.linalg.eig(A)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    mags = np.abs(lam)
    return SpectrumReport(lam, mags, model.C @ vecs, bool(mags.max(initial=0) > 1.0))


# --------------------------------------------------------------------------- checkpoint container


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Zip archive: ``manifest.json`` plus ``tensors.bin`` of concatenated little-endian float64.

    The manifest's ``tensors`` table lists name, shape and element offset of every array.
    """
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    manifest = dict(manifest, format=CHECKPOINT_FORMAT, dtype="<f8", tensors=table)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        zf.writestr("tensors.bin", b"".join(chunks))
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("tensors.bin")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer(io.BytesIO(blob).getbuffer(), dtype="<f8")
    tensors = {}
    for entry in manifest["tensors"]:
        o, c = entry["offset"], entry["count"]
        tensors[entry["name"]] = flat[o:o + c].reshape(entry["shape"]).astype(float)
    return manifest, tensors


def load_koopman_model(path) -> KoopmanModel:
    """Rebuild whichever model kind a checkpoint holds (EDMD or deep)."""
    manifest, _ = load_checkpoint(path)
    kind = manifest.get("encoder", {}).get("kind")
    if kind == "rbf":
        from .edmd import load_edmd
        return load_edmd(path)
    from .adapkoopnet import load_predictor
    return load_predictor(path).export_koopman_blocks()
