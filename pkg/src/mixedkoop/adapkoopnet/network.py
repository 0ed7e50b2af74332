"""Network blocks: driving-characteristics extraction, state encoder, fusion gate, Koopman evolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn

VARIANTS = ("adapkoopnet", "koopnet", "s-adapkoopnet")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    attention_heads: int = 4
    d_att: int = 64
    scenario_count: int = 3
    context: int = 31
    horizon: int = 15
    encoder_layers: int = 3
    dropout: float = 0.2
    batch: int = 256
    max_epochs: int = 25
    lr: float = 1e-5
    lr_decay: float = 0.6
    width_scale: float = 1.0
    ffn_mult: int = 2
    a_init_noise: float = 0.01
    variant: str = "adapkoopnet"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("d_model", "attention_heads", "d_att", "scenario_count", "context", "horizon",
                     "encoder_layers", "batch", "max_epochs", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1 and self.width_scale > 0 and 0 <= self.dropout < 1):
            raise ValueError("invalid optimisation settings")
        if self.width % 2:
            raise ValueError("model width must be even for the temporal encoding")

    @property
    def width(self) -> int:
        return max(2, int(round(self.d_model * self.width_scale)))

    @property
    def att_width(self) -> int:
        return max(1, int(round(self.d_att * self.width_scale)))

    @classmethod
    def paper(cls, variant: str = "adapkoopnet") -> "ModelConfig":
        cfg = cls(variant=variant)
        return replace(cfg, width_scale=0.5) if variant == "s-adapkoopnet" else cfg

    @classmethod
    def desk(cls, variant: str = "adapkoopnet", **overrides) -> "ModelConfig":
        base = dict(d_model=8, attention_heads=2, d_att=8, context=8, horizon=4, batch=64,
                    max_epochs=5, lr=3e-3, lr_decay=0.9, dropout=0.0, variant=variant)
        if variant == "s-adapkoopnet":
            base["width_scale"] = 0.5
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def temporal_encoding(P: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even columns, cos on odd ones, rows are time steps."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    t = np.arange(P, dtype=float)[:, None]
    i = np.arange(d_model // 2, dtype=float)[None, :]
    angle = t / np.power(10000.0, 2.0 * i / d_model)
    te = np.zeros((P, d_model))
    te[:, 0::2] = np.sin(angle)
    te[:, 1::2] = np.cos(angle)
    return te


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, d_att: int, dropout: float):
        super().__init__()
        self.heads, self.d_att = heads, d_att
        self.q = nn.Linear(d_model, heads * d_att, bias=False)
        self.k = nn.Linear(d_model, heads * d_att, bias=False)
        self.v = nn.Linear(d_model, heads * d_att, bias=False)
        self.out = nn.Linear(heads * d_att, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor):
        n, P, _ = x.shape
        split = lambda t: t.view(n, P, self.heads, self.d_att).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_att), dim=-1)
        mixed = (self.drop(weights) @ v).transpose(1, 2).reshape(n, P, self.heads * self.d_att)
        return self.out(mixed), weights


class EncoderBlock(nn.Module):
    """Attention + residual + LayerNorm, then position-wise feedforward + residual + LayerNorm."""

    def __init__(self, d_model: int, heads: int, d_att: int, d_ff: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, d_att, dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor):
        att, weights = self.attn(x)
        h = self.ln1(self.drop(att) + x)
        return self.ln2(self.drop(self.ff2(torch.relu(self.ff1(h)))) + h), weights


class AdapKoopnet(nn.Module):
    """Context window + current (v, h) -> lifted state; linear evolution; bias-free read-out.

    All tensors are in normalized units. ``koopnet`` drops the characteristics branch and
    feeds the state encoding straight into the fusion gate.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, P = config.width, config.context
        heads, d_att, S = config.attention_heads, config.att_width, config.scenario_count
        self.uses_context = config.variant != "koopnet"
        gen = torch.Generator().manual_seed(config.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            if self.uses_context:
                self.embed = nn.Linear(5, d)
                self.register_buffer("te", torch.as_tensor(temporal_encoding(P, d)))
                self.dti = EncoderBlock(d, heads, d_att, config.ffn_mult * d, config.dropout)
                self.se = nn.Parameter(torch.as_tensor(temporal_encoding(P + 1, d)[P]).clone())
                self.dsr = EncoderBlock(d, heads, d_att, config.ffn_mult * d, config.dropout)
                self.scenario_head = nn.Linear(d, S)
                self.ds_fc = nn.Parameter(torch.empty(d, S).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d),
                                                                     generator=gen))
            self.state_embed = nn.Linear(2, d)
            self.state_layers = nn.ModuleList(nn.Linear(d, d) for _ in range(config.encoder_layers))
            gate_in = 2 * d if self.uses_context else d
            self.gate_value = nn.Linear(gate_in, d)
            self.gate = nn.Linear(gate_in, d)
            self.A = nn.Parameter(torch.eye(d) + config.a_init_noise
                                  * torch.empty(d, d).uniform_(-1, 1, generator=gen))
            self.B = nn.Parameter(torch.empty(d, 1).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d), generator=gen))
            self.decoder = nn.Linear(d, 2, bias=False)
            self.drop = nn.Dropout(config.dropout)
        self.double()

    @property
    def dim(self) -> int:
        return self.config.width

    # -- driving characteristics ------------------------------------------------

    def ite(self, ctx: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.embed(ctx)) + self.te[: ctx.shape[1]]

    def dsr_forward(self, h_dti: torch.Tensor):
        n = h_dti.shape[0]
        x = torch.cat([self.se.expand(n, 1, -1), h_dti], dim=1)
        out, weights = self.dsr(x)
        h_ds = torch.softmax(self.scenario_head(out[:, 0]), dim=-1)
        return out[:, 1:], out[:, 0], h_ds, weights

    def dcse_forward(self, h_tc: torch.Tensor, h_ds: torch.Tensor):
        scores = torch.einsum("npd,ds,ns->np", h_tc, self.ds_fc, h_ds)
        w = torch.softmax(scores, dim=-1)
        return torch.einsum("np,npd->nd", w, h_tc), w

    def characteristics(self, ctx: torch.Tensor, forced: torch.Tensor | None = None, trace: dict | None = None):
        """Returns (dc, H_DS). ``forced`` replaces H_DS before the scenario transformation."""
        h_dti, w_dti = self.dti(self.ite(ctx))
        h_tc, _, h_ds, w_dsr = self.dsr_forward(h_dti)
        used = h_ds if forced is None else forced.to(h_ds).expand_as(h_ds)
        dc, w_dcse = self.dcse_forward(h_tc, used)
        if trace is not None:
            trace.update(dti=w_dti, dsr=w_dsr, dcse=w_dcse, scenario=h_ds)
        return dc, h_ds

    # -- state encoding ------------------------------------------------------------

    def encode_state(self, es: torch.Tensor, dc: torch.Tensor | None) -> torch.Tensor:
        z = torch.relu(self.state_embed(es))
        for layer in self.state_layers:
            z = self.drop(torch.tanh(layer(z)))
        if self.uses_context:
            z = torch.cat([dc, z], dim=-1)
        return self.gate_value(z) * torch.sigmoid(self.gate(z))

    def encode(self, ctx: torch.Tensor, forced: torch.Tensor | None = None) -> torch.Tensor:
        """Lifted state from a normalized context window whose last row is the current step."""
        dc = self.characteristics(ctx, forced)[0] if self.uses_context else None
        return self.encode_state(ctx[:, -1, :2], dc)

    # -- linear part -----------------------------------------------------------------

    def evolve(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        """``s_f = A s_{f-1} + B u_{f-1}`` for f = 1..F; ``u`` is ``(n, F)``."""
        out = []
        b = self.B[:, 0]
        for f in range(u.shape[1]):
            s = s @ self.A.T + u[:, f, None] * b
            out.append(s)
        return torch.stack(out, dim=1)

    def decode(self, s: torch.Tensor) -> torch.Tensor:
        return self.decoder(s)

    def forward(self, ctx: torch.Tensor, u: torch.Tensor, forced: torch.Tensor | None = None) -> torch.Tensor:
        return self.decode(self.evolve(self.encode(ctx, forced), u))
