"""Training loop, the physical-units prediction wrapper and checkpoint I/O."""

from __future__ import annotations

import copy
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from ..dataio import DatasetSplit, Normalizer, Samples, SampleWindow, V, H
from ..koopman import KoopmanModel, load_checkpoint, save_checkpoint
from .losses import COMPONENTS, dwa_update, lifted_paths, loss_components, loss_total
from .network import AdapKoopnet, ModelConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def _as_samples(windows) -> Samples:
    if isinstance(windows, SampleWindow):
        return windows.as_samples()
    if isinstance(windows, Samples):
        return windows
    raise TypeError("expected Samples or SampleWindow")


class DeepEncoder:
    """Numpy-facing encoder handle around a trained network (inference mode)."""

    kind = "adapkoopnet"

    def __init__(self, net: AdapKoopnet):
        self.net = net

    @property
    def context(self) -> int:
        return self.net.config.context

    def encode(self, contexts: np.ndarray, normalizer: Normalizer) -> np.ndarray:
        x = torch.as_tensor(normalizer.normalize(contexts), dtype=torch.float64)
        self.net.eval()
        with torch.no_grad():
            return self.net.encode(x).numpy()


class Predictor:
    def __init__(self, net: AdapKoopnet, normalizer: Normalizer, history: list | None = None,
                 epoch: int = 0, meta: dict | None = None):
        self.net = net
        self.normalizer = normalizer
        self.history = history or []
        self.epoch = epoch
        self.meta = meta or {}

    @property
    def config(self) -> ModelConfig:
        return self.net.config

    def _tensor(self, samples: Samples) -> torch.Tensor:
        cfg = self.config
        if samples.context != cfg.context or samples.horizon != cfg.horizon:
            raise ValueError(f"windows are ({samples.context}, {samples.horizon}); model expects "
                             f"({cfg.context}, {cfg.horizon})")
        return torch.as_tensor(self.normalizer.normalize_window(samples.data), dtype=torch.float64)

    def _run(self, windows, forced=None) -> np.ndarray:
        samples = _as_samples(windows)
        x = self._tensor(samples)
        P, F = self.config.context, self.config.horizon
        self.net.eval()
        with torch.no_grad():
            out = self.net(x[:, :P, :5], x[:, P - 1:P - 1 + F, 5], forced).numpy()
        pred = self.normalizer.denormalize(out, cols=[V, H])
        return pred[0] if isinstance(windows, SampleWindow) else pred

    def predict_multistep(self, windows) -> np.ndarray:
        """Physical (v, h) for T+1..T+F; ``(F, 2)`` for one window, ``(n, F, 2)`` for many."""
        return self._run(windows)

    def predict_with_forced_scenario(self, windows, forced) -> np.ndarray:
        """Same as :meth:`predict_multistep` with the scenario distribution replaced by ``forced``."""
        if not self.net.uses_context:
            raise ValueError("this variant has no scenario branch")
        forced = np.asarray(forced, dtype=float)
        if (forced.shape != (self.config.scenario_count,) or np.any(forced < 0)
                or abs(forced.sum() - 1.0) > 1e-6):
            raise ValueError(f"forced scenario must be a probability vector of length {self.config.scenario_count}")
        return self._run(windows, torch.as_tensor(forced))

    def scenario_probs(self, windows) -> np.ndarray:
        samples = _as_samples(windows)
        x = self._tensor(samples)
        self.net.eval()
        with torch.no_grad():
            _, h_ds = self.net.characteristics(x[:, :self.config.context, :5])
        return h_ds.numpy()

    def attention_maps(self, window: SampleWindow) -> dict[str, np.ndarray]:
        """Raw attention weights (DTI, DSR, DCSE) and the scenario distribution for one window."""
        x = self._tensor(window.as_samples())
        trace: dict = {}
        self.net.eval()
        with torch.no_grad():
            self.net.characteristics(x[:, :self.config.context, :5], trace=trace)
        return {k: v[0].numpy() for k, v in trace.items()}

    def export_koopman_blocks(self) -> KoopmanModel:
        net = self.net
        with torch.no_grad():
            A = net.A.detach().numpy().copy()
            B = net.B.detach().numpy().copy()
            C = net.decoder.weight.detach().numpy().copy()
        meta = {"variant": self.config.variant, "epoch": self.epoch, **self.meta}
        return KoopmanModel(A, B, C, self.normalizer, DeepEncoder(net), meta)

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> Path:
        manifest = {
            "variant": self.config.variant,
            "encoder": {"kind": "adapkoopnet"},
            "config": self.config.to_dict(),
            "normalization": self.normalizer.to_dict(),
            "loss_history": self.history,
            "epoch": self.epoch,
            "meta": self.meta,
        }
        tensors = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        return save_checkpoint(path, manifest, tensors)


def load_predictor(path) -> Predictor:
    manifest, tensors = load_checkpoint(path)
    cfg = ModelConfig(**manifest["config"])
    net = AdapKoopnet(cfg)
    net.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return Predictor(net, Normalizer.from_dict(manifest["normalization"]), manifest.get("loss_history", []),
                     manifest.get("epoch", 0), manifest.get("meta", {}))


def _evaluate(net, data: torch.Tensor, batch: int = 512) -> dict:
    net.eval()
    sums = dict.fromkeys(COMPONENTS, 0.0)
    n = data.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch):
            b = data[i:i + batch]
            comps = loss_components(net, *lifted_paths(net, b))
            for k, c in zip(COMPONENTS, comps):
                sums[k] += float(c) * b.shape[0]
    out = {k: v / max(n, 1) for k, v in sums.items()}
    out["loss"] = sum(out[k] for k in COMPONENTS)
    return out


def train(split: DatasetSplit, config: ModelConfig, resume: Predictor | None = None,
          epochs: int | None = None, time_budget_s: float | None = None) -> tuple[Predictor, list[dict]]:
    """Mini-batch Adam on the weighted three-part loss with per-epoch DWA and LR decay.

    The returned predictor carries the weights of the best validation epoch. With
    ``resume`` the epoch counter, loss history and weights continue from that checkpoint.
    """
    if len(split.train) == 0:
        raise ValueError("empty training split")
    norm = split.normalizer
    tr = torch.as_tensor(norm.normalize_window(split.train.data), dtype=torch.float64)
    va = torch.as_tensor(norm.normalize_window(split.val.data), dtype=torch.float64) if len(split.val) else tr[:0]

    if resume is not None:
        net, start_epoch, history = resume.net, resume.epoch, list(resume.history)
        config = net.config
    else:
        net, start_epoch, history = AdapKoopnet(config), 0, []
    total_epochs = config.max_epochs if epochs is None else start_epoch + epochs
    opt = torch.optim.Adam(net.parameters(), lr=config.lr * config.lr_decay ** start_epoch)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
    gen = torch.Generator().manual_seed(config.seed + start_epoch)

    best_val, best_state = math.inf, None
    if history:
        best_val = min(h.get("val_loss", math.inf) for h in history)
    t_start = time.perf_counter()
    for epoch in range(start_epoch, total_epochs):
        weights = dwa_update([tuple(h[k] for k in COMPONENTS) for h in history])
        net.train()
        perm = torch.randperm(tr.shape[0], generator=gen)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        for bi, i in enumerate(range(0, tr.shape[0], config.batch)):
            b = tr[perm[i:i + config.batch]]
            total, comps = loss_total(net, b, weights)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"loss became {total.item()} at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            total.backward()
            opt.step()
            for k in COMPONENTS:
                sums[k] += comps[k].item() * b.shape[0]
        sched.step()
        row = {k: v / tr.shape[0] for k, v in sums.items()}
        row.update(epoch=epoch + 1, alpha=list(weights.alpha), lr=opt.param_groups[0]["lr"])
        row["train_loss"] = sum(a * row[k] for a, k in zip(weights.alpha, COMPONENTS))
        if va.shape[0]:
            ev = _evaluate(net, va)
            row.update(val_loss=ev["loss"], val_L_C=ev["L_C"], val_L_P=ev["L_P"], val_L_E=ev["L_E"])
        else:
            row["val_loss"] = row["train_loss"]
        history.append(row)
        log.info("epoch %d loss %.5f val %.5f", epoch + 1, row["train_loss"], row["val_loss"])
        if row["val_loss"] < best_val:
            best_val, best_state = row["val_loss"], copy.deepcopy(net.state_dict())
        if time_budget_s is not None and time.perf_counter() - t_start > time_budget_s:
            log.info("time budget reached after epoch %d", epoch + 1)
            total_epochs = epoch + 1
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    best = min(history, key=lambda h: h["val_loss"])
    meta = {"val_L_C": best.get("val_L_C"), "best_epoch": best["epoch"]}
    return Predictor(net, norm, history, history[-1]["epoch"], meta), history
