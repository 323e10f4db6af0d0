"""Block-causal attention mask and the lightweight cross-attention decoder.

Attention is bidirectional within a cluster and unidirectional between
clusters: query q may attend key k iff cluster(k) <= cluster(q). The
decoder takes encoder features (projected to decoder width) as its
queries and predicts, at the token for (cluster i, slot j), the content
of (cluster i+1, slot j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass
class BlockCausalMask:
    """allow[q][k] is True iff key k's cluster is not after query q's."""

    allow: np.ndarray  # (T, T) bool

    @property
    def num_tokens(self) -> int:
        return self.allow.shape[0]


def build_mask(cluster_ids: np.ndarray) -> BlockCausalMask:
    """Mask from per-token cluster ids; ids must be non-decreasing."""
    ids = np.asarray(cluster_ids, dtype=np.int64).reshape(-1)
    if ids.size and np.any(np.diff(ids) < 0):
        t = int(np.flatnonzero(np.diff(ids) < 0)[0])
        raise ValueError(f"cluster ids decrease at token {t + 1}")
    return BlockCausalMask(allow=ids[None, :] <= ids[:, None])


def render_mask(mask: BlockCausalMask) -> str:
    """Text grid, one row per query: '#' where attention is allowed, '·' where not."""
    return "\n".join("".join("#" if a else "·" for a in row) for row in mask.allow)


@dataclass
class DecoderConfig:
    layers: int = 4
    width: int = 512
    heads: int = 8
    feature_dim: int = 512  # encoder width D
    patch_dim: int = 48     # prediction length s
    mlp_ratio: int = 4
    use_self_attn: bool = True  # the cross-attention sublayer is always on

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        for name in ("layers", "width", "heads", "feature_dim", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class MaskedAttention(nn.Module):
    """Multi-head softmax attention with a boolean allow-mask."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor, allow: torch.Tensor):
        tq, tk = q_in.shape[0], kv_in.shape[0]
        if allow.shape != (tq, tk):
            raise ValueError(
                f"mask shape {tuple(allow.shape)} does not match ({tq}, {tk})"
            )
        q = self.q_proj(q_in).view(tq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(kv_in).view(tk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(kv_in).view(tk, self.heads, self.head_dim).transpose(0, 1)
        att = (q @ k.transpose(-2, -1)) * self.scale
        att = att.masked_fill(~allow[None, :, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(0, 1).reshape(tq, -1)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        width, hidden = config.width, config.width * config.mlp_ratio
        self.use_self_attn = config.use_self_attn
        if config.use_self_attn:
            self.norm_self = nn.LayerNorm(width)
            self.self_attn = MaskedAttention(width, config.heads)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = MaskedAttention(width, config.heads)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width)
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor, allow: torch.Tensor):
        if self.use_self_attn:
            normed = self.norm_self(x)
            x = x + self.self_attn(normed, normed, allow)
        x = x + self.cross_attn(self.norm_cross(x), memory, allow)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class Decoder(nn.Module):
    """Predicts the next cluster's tokens from block-causally masked features."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.feature_dim, config.width)
        self.layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, config.patch_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def decode(self, features: torch.Tensor, cluster_ids: np.ndarray) -> torch.Tensor:
        """(T, s) predictions; row t is the forecast for the same slot of the
        cluster after token t's cluster."""
        mask = build_mask(cluster_ids)
        if features.shape[0] != mask.num_tokens:
            raise ValueError(
                f"{features.shape[0]} feature rows but {mask.num_tokens} cluster ids"
            )
        allow = torch.from_numpy(mask.allow)
        memory = self.in_proj(features)
        x = memory
        for layer in self.layers:
            x = layer(x, memory, allow)
        return self.head(self.final_norm(x))

    forward = decode
