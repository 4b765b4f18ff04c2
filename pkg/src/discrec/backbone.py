"""Encoder-decoder transformer backbone.

Pre-norm blocks with ReLU feed-forwards and bucketed relative position bias
added to the self-attention scores (bidirectional buckets on the encoder,
causal on the decoder; cross-attention carries no bias). One bias table per
stack is shared by all of its layers. Layers accept an optional pre-layer
hook so a variant can re-fuse hidden states at every depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class BackboneConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 6
    head_dim: int = 64
    ffn_dim: int = 1024
    dropout: float = 0.1
    rel_pos_buckets: int = 32
    rel_pos_max_distance: int = 128


def relative_position_bucket(
    relative_position: torch.Tensor, bidirectional: bool, num_buckets: int, max_distance: int
) -> torch.Tensor:
    """Map signed distances to log-spaced buckets (T5 scheme)."""
    ret = torch.zeros_like(relative_position)
    n = -relative_position
    if bidirectional:
        num_buckets //= 2
        ret = ret + (n < 0).long() * num_buckets
        n = n.abs()
    else:
        n = n.clamp(min=0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    large = max_exact + (
        torch.log(n.float().clamp(min=1) / max_exact)
        / math.log(max_distance / max_exact)
        * (num_buckets - max_exact)
    ).long()
    large = large.clamp(max=num_buckets - 1)
    return ret + torch.where(is_small, n, large)


class RelativeBias(nn.Module):
    def __init__(self, config: BackboneConfig, bidirectional: bool):
        super().__init__()
        self.table = nn.Embedding(config.rel_pos_buckets, config.heads)
        self.bidirectional = bidirectional
        self.num_buckets = config.rel_pos_buckets
        self.max_distance = config.rel_pos_max_distance

    def forward(self, q_len: int, k_len: int) -> torch.Tensor:
        ctx = torch.arange(q_len)[:, None]
        mem = torch.arange(k_len)[None, :]
        buckets = relative_position_bucket(
            mem - ctx, self.bidirectional, self.num_buckets, self.max_distance
        )
        return self.table(buckets).permute(2, 0, 1).unsqueeze(0)  # (1, H, q, k)


class Attention(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        inner = config.heads * config.head_dim
        self.heads, self.head_dim = config.heads, config.head_dim
        self.q_proj = nn.Linear(config.model_dim, inner)
        self.k_proj = nn.Linear(config.model_dim, inner)
        self.v_proj = nn.Linear(config.model_dim, inner)
        self.out_proj = nn.Linear(inner, config.model_dim)
        self.attn_dropout = nn.Dropout(config.dropout)

    def forward(self, q_in, kv_in, additive_mask=None, position_bias=None):
        b, s_q, _ = q_in.shape
        s_k = kv_in.shape[1]

        def split(x):
            return x.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(q_in)), split(self.k_proj(kv_in)), split(self.v_proj(kv_in))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if position_bias is not None:
            scores = scores + position_bias.to(scores.dtype)
        if additive_mask is not None:
            scores = scores + additive_mask.to(scores.dtype)
        probs = torch.softmax(scores, dim=-1)
        out = self.attn_dropout(probs) @ v
        out = out.transpose(1, 2).reshape(b, s_q, -1)
        return self.out_proj(out), probs


class FeedForward(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.model_dim, config.ffn_dim),
            nn.ReLU(),
            nn.Linear(config.ffn_dim, config.model_dim),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.attn = Attention(config)
        self.ffn = FeedForward(config)
        self.ln_attn = nn.LayerNorm(config.model_dim)
        self.ln_ffn = nn.LayerNorm(config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, additive_mask, position_bias):
        h = self.ln_attn(x)
        attn_out, probs = self.attn(h, h, additive_mask, position_bias)
        x = x + self.dropout(attn_out)
        x = x + self.dropout(self.ffn(self.ln_ffn(x)))
        return x, probs


class DecoderLayer(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.self_attn = Attention(config)
        self.cross_attn = Attention(config)
        self.ffn = FeedForward(config)
        self.ln_self = nn.LayerNorm(config.model_dim)
        self.ln_cross = nn.LayerNorm(config.model_dim)
        self.ln_ffn = nn.LayerNorm(config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, memory, causal_mask, memory_mask, position_bias):
        h = self.ln_self(x)
        attn_out, _ = self.self_attn(h, h, causal_mask, position_bias)
        x = x + self.dropout(attn_out)
        cross_out, _ = self.cross_attn(self.ln_cross(x), memory, memory_mask, None)
        x = x + self.dropout(cross_out)
        x = x + self.dropout(self.ffn(self.ln_ffn(x)))
        return x


def key_padding_mask(real: torch.Tensor) -> torch.Tensor:
    """(B, S) boolean of real tokens -> additive (B, 1, 1, S) 0/-inf mask."""
    mask = torch.zeros(real.shape, dtype=torch.get_default_dtype(), device=real.device)
    mask = mask.masked_fill(~real, -math.inf)
    return mask[:, None, None, :]


def causal_mask(s: int, device=None) -> torch.Tensor:
    m = torch.full((s, s), -math.inf, device=device)
    return m.triu(1)[None, None]


class Encoder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.bias = RelativeBias(config, bidirectional=True)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))
        self.final_ln = nn.LayerNorm(config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, real_tokens, pre_layer_hook=None, collect_attention=False):
        additive = key_padding_mask(real_tokens)
        bias = self.bias(x.shape[1], x.shape[1])
        x = self.dropout(x)
        maps = []
        for layer in self.layers:
            if pre_layer_hook is not None:
                x = pre_layer_hook(x)
            x, probs = layer(x, additive, bias)
            if collect_attention:
                maps.append(probs)
        x = self.final_ln(x)
        return (x, maps) if collect_attention else x


class Decoder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.bias = RelativeBias(config, bidirectional=False)
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.layers))
        self.final_ln = nn.LayerNorm(config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, y, memory, memory_real, pre_layer_hook=None):
        s = y.shape[1]
        cmask = causal_mask(s, device=y.device)
        mmask = key_padding_mask(memory_real)
        bias = self.bias(s, s)
        y = self.dropout(y)
        for layer in self.layers:
            if pre_layer_hook is not None:
                y = pre_layer_hook(y)
            y = layer(y, memory, cmask, mmask, bias)
        return self.final_ln(y)
