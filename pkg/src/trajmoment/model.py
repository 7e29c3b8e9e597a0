"""Encoder-decoder set-prediction localizer.

Trajectory clips and query tokens are projected to a shared width, encoded
jointly, and read out by ``num_queries`` learned decoder queries. Each query
emits a normalized (center, width) span and a foreground/background
distribution; a linear head on the encoded clip rows gives per-clip saliency.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .features import DimensionMismatch, read_block, write_block

CHECKPOINT_MAGIC = b"TRJC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden_d: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 10
    attn_heads: int = 8
    ffn_dim: int = 1024
    dropout_transformer: float = 0.1
    dropout_projection: float = 0.5
    traj_feat_dim: int = 3328
    query_feat_dim: int = 512
    use_positional: bool = True

    def __post_init__(self):
        for f in ("hidden_d", "num_queries", "attn_heads", "ffn_dim", "traj_feat_dim", "query_feat_dim"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if self.hidden_d % self.attn_heads:
            raise ValueError(f"hidden_d {self.hidden_d} not divisible by {self.attn_heads} heads")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_positions(mask: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sine/cosine encodings of each row's relative position within its valid span.

    ``mask`` is (B, L) with True on real rows; position k of n real rows maps
    to 2*pi*(k + 0.5)/n, so encodings follow normalized time.
    """
    m = mask.to(torch.float64)
    n = m.sum(1, keepdim=True).clamp(min=1)
    t = (torch.cumsum(m, 1) - 0.5) / n * (2 * math.pi)
    i = torch.arange(dim, dtype=torch.float64)
    freq = torch.pow(10000.0, 2 * torch.div(i, 2, rounding_mode="floor") / dim)
    angle = t[..., None] / freq
    pe = torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return (pe * m[..., None]).to(dtype)


class ProjectionLayer(nn.Module):
    def __init__(self, in_dim, out_dim, dropout, relu):
        super().__init__()
        self.norm = nn.LayerNorm(in_dim)
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(in_dim, out_dim)
        self.relu = relu

    def forward(self, x):
        x = self.linear(self.dropout(self.norm(x)))
        return F.relu(x) if self.relu else x


class InputProjection(nn.Sequential):
    def __init__(self, in_dim, d, dropout):
        super().__init__(ProjectionLayer(in_dim, d, dropout, relu=True),
                         ProjectionLayer(d, d, dropout, relu=False))


class MultiHeadAttention(nn.Module):
    def __init__(self, d, heads, dropout):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, k, v, key_mask=None):
        # q: (B, Lq, d); k, v: (B, Lk, d); key_mask: (B, Lk) True where valid
        B, Lq, d = q.shape
        Lk = k.shape[1]
        h = self.heads
        qh = self.q_proj(q).view(B, Lq, h, d // h).transpose(1, 2)
        kh = self.k_proj(k).view(B, Lk, h, d // h).transpose(1, 2)
        vh = self.v_proj(v).view(B, Lk, h, d // h).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(-1))
        out = (attn @ vh).transpose(1, 2).reshape(B, Lq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d, ffn_dim, dropout):
        super().__init__()
        self.linear1 = nn.Linear(d, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.linear2(self.dropout(F.relu(self.linear1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn_dim, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads, dropout)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)

    def forward(self, src, pos, mask):
        x = src + pos
        src = self.norm1(src + self.drop1(self.self_attn(x, x, x, mask)))
        return self.norm2(src + self.drop2(self.ffn(src)))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn_dim, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads, dropout)
        self.cross_attn = MultiHeadAttention(d, heads, dropout)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)
        self.drop3 = nn.Dropout(dropout)

    def forward(self, tgt, query_pos, memory, pos, mask):
        qk = tgt + query_pos
        tgt = self.norm1(tgt + self.drop1(self.self_attn(qk, qk, qk)))
        mem = memory + pos
        tgt = self.norm2(tgt + self.drop2(self.cross_attn(tgt + query_pos, mem, mem, mask)))
        return self.norm3(tgt + self.drop3(self.ffn(tgt)))


class SpanHead(nn.Module):
    """3-layer perceptron with ReLU between layers."""

    def __init__(self, d):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(d, d), nn.Linear(d, d), nn.Linear(d, 2)])

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


@dataclass
class ModelOutput:
    """Single-query output, numpy arrays."""

    spans: np.ndarray        # (N, 2) normalized center, width
    class_probs: np.ndarray  # (N, 2) foreground, background
    saliency: np.ndarray     # (num_clips,)


class MomentLocalizer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        d = c.hidden_d
        self.traj_proj = InputProjection(c.traj_feat_dim, d, c.dropout_projection)
        self.query_proj = InputProjection(c.query_feat_dim, d, c.dropout_projection)
        self.encoder = nn.ModuleList(
            [EncoderLayer(d, c.attn_heads, c.ffn_dim, c.dropout_transformer) for _ in range(c.enc_layers)])
        self.decoder = nn.ModuleList(
            [DecoderLayer(d, c.attn_heads, c.ffn_dim, c.dropout_transformer) for _ in range(c.dec_layers)])
        self.decoder_norm = nn.LayerNorm(d)
        self.query_embed = nn.Parameter(torch.empty(c.num_queries, d))
        self.span_head = SpanHead(d)
        self.class_head = nn.Linear(d, 2)
        self.saliency_head = nn.Linear(d, 1)

    def positions(self, mask, dtype):
        if not self.config.use_positional:
            return torch.zeros(*mask.shape, self.config.hidden_d, dtype=dtype)
        return sinusoidal_positions(mask, self.config.hidden_d, dtype)

    def project_inputs(self, traj, query):
        if traj.shape[-1] != self.config.traj_feat_dim:
            raise DimensionMismatch(f"trajectory width {traj.shape[-1]} != {self.config.traj_feat_dim}")
        if query.shape[-1] != self.config.query_feat_dim:
            raise DimensionMismatch(f"query width {query.shape[-1]} != {self.config.query_feat_dim}")
        if traj.shape[-2] == 0:
            raise DimensionMismatch("trajectory has no clips")
        if query.shape[-2] == 0:
            raise DimensionMismatch("query has no tokens")
        return torch.cat([self.traj_proj(traj), self.query_proj(query)], dim=-2)

    def forward(self, traj, query, traj_mask=None, query_mask=None):
        """Batched forward.

        traj: (B, Lc, Dt), query: (B, Lq, Dq); masks are True on real rows.
        Returns a dict with ``spans`` (B, N, 2), ``logits`` (B, N, 2),
        ``probs`` (B, N, 2) and ``saliency`` (B, Lc).
        """
        B, Lc, _ = traj.shape
        Lq = query.shape[1]
        dtype = traj.dtype
        if traj_mask is None:
            traj_mask = torch.ones(B, Lc, dtype=torch.bool)
        if query_mask is None:
            query_mask = torch.ones(B, Lq, dtype=torch.bool)
        src = self.project_inputs(traj, query)
        pos = torch.cat([self.positions(traj_mask, dtype), self.positions(query_mask, dtype)], dim=1)
        mask = torch.cat([traj_mask, query_mask], dim=1)
        for layer in self.encoder:
            src = layer(src, pos, mask)
        memory = src

        query_pos = self.query_embed[None].expand(B, -1, -1).to(dtype)
        tgt = torch.zeros_like(query_pos)
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, memory, pos, mask)
        hs = self.decoder_norm(tgt)

        logits = self.class_head(hs)
        return {
            "spans": self.span_head(hs).sigmoid(),
            "logits": logits,
            "probs": logits.softmax(-1),
            "saliency": self.saliency_head(memory[:, :Lc]).squeeze(-1),
        }

    @torch.no_grad()
    def predict(self, traj: np.ndarray, query: np.ndarray) -> ModelOutput:
        """Eval-mode forward on one trajectory/query pair."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = self(torch.as_tensor(traj, dtype=dtype)[None], torch.as_tensor(query, dtype=dtype)[None])
        self.train(was_training)
        return ModelOutput(out["spans"][0].numpy(), out["probs"][0].numpy(), out["saliency"][0].numpy())


def init_params(config: ModelConfig, seed: int = 0) -> MomentLocalizer:
    """Build a model with Xavier-uniform weights and zero biases, fixed by ``seed``."""
    model = MomentLocalizer(config)
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if p.dim() > 1:
            nn.init.xavier_uniform_(p, generator=gen)
        elif name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            nn.init.ones_(p)
    return model


def forward(traj, query, model: MomentLocalizer, train_mode: bool = False, seed: int | None = None) -> ModelOutput:
    """Single-pair forward; dropout only in train mode and then seeded."""
    if not train_mode:
        return model.predict(traj, query)
    dtype = next(model.parameters()).dtype
    model.train()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        with torch.no_grad():
            out = model(torch.as_tensor(traj, dtype=dtype)[None], torch.as_tensor(query, dtype=dtype)[None])
    return ModelOutput(out["spans"][0].numpy(), out["probs"][0].numpy(), out["saliency"][0].numpy())


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON header, then one TRJF block per tensor


def save_checkpoint(model: MomentLocalizer, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    header = {
        "config": asdict(model.config),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for v in state.values():
        arr = v.detach().cpu().numpy().astype(np.float32)
        write_block(buf, arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[MomentLocalizer, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, n = struct.unpack("<HI", f.read(6))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(n))
        model = MomentLocalizer(ModelConfig.from_dict(header["config"]))
        state = {}
        for t in header["tensors"]:
            state[t["name"]] = torch.from_numpy(read_block(f).reshape(t["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header.get("extra", {})
