"""Item-aware dual-branch embedding module.

Flattened semantic-ID sequences lose item boundaries; this module restores
them at the embedding layer. A shared (L+2)-row position table marks each
token's index inside its item (plus EOS/BOS rows). The semantic branch passes
token embeddings through untouched; the collaborative branch runs one
transformer block whose attention is masked to tokens of the same item; a
learned gate softmax-mixes the two branches per token. Encoder-side attention
is bidirectional, decoder-side causal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .vocab import BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID

PAD_MEMBER = -1  # membership sentinel excluded from all attention

GATE_SOFTMAX = "softmax"
GATE_SUM = "sum"
GATE_SELF = "self"


@dataclass
class DualBranchConfig:
    model_dim: int = 128
    heads: int = 2
    head_dim: int = 64
    ffn_dim: int = 1024
    dropout: float = 0.1
    gate_init_std: float = 0.02
    # variant knobs; the default tuple is the full module
    use_ipe: bool = True
    use_transformer: bool = True
    gate_mode: str = GATE_SOFTMAX
    single_query: bool = False
    token_average: bool = False
    shared_branches: bool = False


def ipe_for_input(T: int, L: int) -> list[int]:
    """1-based IPE rows for an encoder layout: [1..L] per item, then EOS row L+1."""
    if T < 0 or L < 1:
        raise ValueError("need T >= 0 and L >= 1")
    return [l for _ in range(T) for l in range(1, L + 1)] + [L + 1]


def ipe_for_target(L: int) -> list[int]:
    """1-based IPE rows for a decoder layout: BOS row L+2, then 1..L."""
    if L < 1:
        raise ValueError("need L >= 1")
    return [L + 2] + list(range(1, L + 1))


def input_memberships(T: int, L: int) -> list[int]:
    """Item index per encoder token; EOS attaches to the last item."""
    members = [p // L for p in range(L * T)]
    members.append(T - 1 if T > 0 else 0)
    return members


def target_memberships(L: int) -> list[int]:
    """Item index per decoder token; BOS attaches to the single target item."""
    return [0] * (L + 1)


def item_membership(token_ids: torch.Tensor, levels: int) -> torch.Tensor:
    """Item index per token from the ids alone (PAD -> -1).

    Code tokens belong to item floor(k / levels) where k counts code tokens so
    far; EOS attaches to the item of the last code token before it, BOS to the
    (single) target item.
    """
    squeeze = token_ids.ndim == 1
    ids = token_ids.unsqueeze(0) if squeeze else token_ids
    is_code = ids >= NUM_SPECIALS
    before = torch.cumsum(is_code.long(), dim=-1) - is_code.long()
    members = torch.where(is_code, before // levels, torch.zeros_like(before))
    eos = ids == EOS_ID
    members = torch.where(eos, ((before - 1) // levels).clamp(min=0), members)
    members = torch.where(ids == BOS_ID, torch.zeros_like(members), members)
    members = torch.where(ids == PAD_ID, torch.full_like(members, PAD_MEMBER), members)
    return members.squeeze(0) if squeeze else members


def ipe_indices(token_ids: torch.Tensor, levels: int) -> torch.Tensor:
    """1-based IPE row per token (PAD -> 0 sentinel, zeroed by the caller)."""
    squeeze = token_ids.ndim == 1
    ids = token_ids.unsqueeze(0) if squeeze else token_ids
    is_code = ids >= NUM_SPECIALS
    before = torch.cumsum(is_code.long(), dim=-1) - is_code.long()
    rows = torch.where(is_code, before % levels + 1, torch.zeros_like(before))
    rows = torch.where(ids == EOS_ID, torch.full_like(rows, levels + 1), rows)
    rows = torch.where(ids == BOS_ID, torch.full_like(rows, levels + 2), rows)
    return rows.squeeze(0) if squeeze else rows


def item_local_mask(memberships: torch.Tensor, causal: bool = False) -> torch.Tensor:
    """Additive mask: 0 where both tokens share an item (and j <= i if causal),
    -inf elsewhere; PAD rows/columns are -inf except the diagonal."""
    squeeze = memberships.ndim == 1
    m = memberships.unsqueeze(0) if squeeze else memberships
    valid = m != PAD_MEMBER
    same = (m.unsqueeze(-1) == m.unsqueeze(-2)) & valid.unsqueeze(-1) & valid.unsqueeze(-2)
    if causal:
        s = m.shape[-1]
        lower = torch.ones(s, s, dtype=torch.bool, device=m.device).tril()
        same = same & lower
    mask = torch.where(same, 0.0, -math.inf).to(torch.get_default_dtype())
    idx = torch.arange(m.shape[-1], device=m.device)
    mask[..., idx, idx] = 0.0
    return mask.squeeze(0) if squeeze else mask


def localized_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor,
    return_probs: bool = False,
):
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    q, k, v: (..., S, d_k); mask broadcasts against the (..., S, S) scores.
    Mask construction guarantees at least the diagonal is open per row.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]) + mask
    probs = torch.softmax(scores, dim=-1)
    out = probs @ v
    return (out, probs) if return_probs else out


class BranchTransformer(nn.Module):
    """One pre-norm attention block (MHA + FFN) with residuals.

    Dropout is applied only to the attention and FFN outputs. With
    single_query the attention queries are replaced by one learned vector
    shared by every position, so each item's tokens receive one pooled view
    of the item (broadcast happens through the shared mask rows).
    """

    def __init__(self, config: DualBranchConfig):
        super().__init__()
        d, inner = config.model_dim, config.heads * config.head_dim
        self.heads, self.head_dim = config.heads, config.head_dim
        self.q_proj = nn.Linear(d, inner)
        self.k_proj = nn.Linear(d, inner)
        self.v_proj = nn.Linear(d, inner)
        self.out_proj = nn.Linear(inner, d)
        self.ln_attn = nn.LayerNorm(d)
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_dim), nn.ReLU(), nn.Linear(config.ffn_dim, d)
        )
        self.dropout = nn.Dropout(config.dropout)
        self.single_query = config.single_query
        self.token_average = config.token_average
        if self.single_query:
            self.query_seed = nn.Parameter(torch.randn(d) * 0.02)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, return_probs: bool = False):
        b, s, _ = x.shape
        h = self.ln_attn(x)
        if self.single_query:
            q_in = self.query_seed.to(h.dtype).expand(b, s, -1)
        else:
            q_in = h
        q, k, v = self._split(self.q_proj(q_in)), self._split(self.k_proj(h)), self._split(self.v_proj(h))
        attn, probs = localized_attention(q, k, v, mask.unsqueeze(1), return_probs=True)
        attn = attn.transpose(1, 2).reshape(b, s, -1)
        x = x + self.dropout(self.out_proj(attn))
        x = x + self.dropout(self.ffn(self.ln_ffn(x)))
        if self.token_average:
            # uniform average over each item's (visible) tokens: the mask's
            # softmax rows are exactly the within-item averaging weights
            weights = torch.softmax(mask, dim=-1)
            x = weights @ x
        return (x, probs) if return_probs else x


class DynamicFusionGate(nn.Module):
    """Per-token softmax over branch/gate inner products -> convex mix."""

    def __init__(self, config: DualBranchConfig):
        super().__init__()
        d = config.model_dim
        self.mode = config.gate_mode
        if self.mode == GATE_SOFTMAX:
            self.g_seman = nn.Parameter(torch.randn(d) * config.gate_init_std)
            self.g_colla = nn.Parameter(torch.randn(d) * config.gate_init_std)
        elif self.mode == GATE_SELF:
            self.self_seman = nn.Linear(d, d)
            self.self_colla = nn.Linear(d, d)
        elif self.mode != GATE_SUM:
            raise ValueError(f"unknown gate mode {self.mode!r}")

    def forward(
        self,
        b_seman: torch.Tensor,
        b_colla: torch.Tensor,
        score_bias: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        if self.mode == GATE_SUM:
            out = b_seman + b_colla
            weights = None
        elif self.mode == GATE_SELF:
            out = b_seman * torch.sigmoid(self.self_seman(b_seman)) + b_colla * torch.sigmoid(
                self.self_colla(b_colla)
            )
            weights = None
        else:
            scores = torch.stack(
                [b_seman @ self.g_seman.to(b_seman.dtype), b_colla @ self.g_colla.to(b_colla.dtype)],
                dim=-1,
            )
            if score_bias is not None:
                scores = scores + score_bias
            weights = torch.softmax(scores, dim=-1)
            out = weights[..., :1] * b_seman + weights[..., 1:] * b_colla
        return (out, weights) if return_weights else out


def fuse(b_seman, b_colla, gate: DynamicFusionGate, return_weights: bool = False):
    return gate(b_seman, b_colla, return_weights=return_weights)


class DualBranchModule(nn.Module):
    """The dual-branch computation for one side (encoder or decoder)."""

    def __init__(self, config: DualBranchConfig, ipe: nn.Embedding, causal: bool):
        super().__init__()
        self.config = config
        self.ipe = ipe  # shared table, owned by DualBranchState
        self.causal = causal
        self.branch = BranchTransformer(config) if config.use_transformer else None
        self.gate = DynamicFusionGate(config)

    def gather_ipe(self, rows: torch.Tensor) -> torch.Tensor:
        """rows are 1-based (0 = PAD sentinel); PAD gets a zero vector."""
        gathered = self.ipe(rows.clamp(min=1) - 1)
        return gathered * (rows > 0).unsqueeze(-1).to(gathered.dtype)

    def semantic_branch(self, embeddings: torch.Tensor) -> torch.Tensor:
        return embeddings

    def collaborative_branch(
        self, embeddings: torch.Tensor, ipe_rows: torch.Tensor, mask: torch.Tensor,
        return_probs: bool = False,
    ):
        x = embeddings + self.gather_ipe(ipe_rows)
        if self.branch is None:
            return (x, None) if return_probs else x
        return self.branch(x, mask, return_probs=return_probs)

    def forward(
        self,
        embeddings: torch.Tensor,
        ipe_rows: torch.Tensor,
        memberships: torch.Tensor,
        gate_score_bias: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        """Fuse both branches; PAD positions pass through unchanged."""
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = embeddings.unsqueeze(0)
            ipe_rows = ipe_rows.unsqueeze(0)
            memberships = memberships.unsqueeze(0)
        mask = item_local_mask(memberships, causal=self.causal).to(embeddings.dtype)
        b_seman = self.semantic_branch(embeddings)
        b_colla = self.collaborative_branch(embeddings, ipe_rows, mask)
        fused, weights = self.gate(b_seman, b_colla, score_bias=gate_score_bias, return_weights=True)
        pad = (memberships == PAD_MEMBER).unsqueeze(-1)
        out = torch.where(pad, embeddings, fused)
        if squeeze:
            out = out.squeeze(0)
            weights = weights.squeeze(0) if weights is not None else None
        return (out, weights) if return_weights else out


class DualBranchState(nn.Module):
    """Shared IPE table plus per-side branch modules and gates.

    The position table is always shared between sides; branch transformer and
    gate parameters are separate unless shared_branches is set.
    """

    def __init__(self, levels: int, config: DualBranchConfig):
        super().__init__()
        self.levels = levels
        self.config = config
        self.ipe = nn.Embedding(levels + 2, config.model_dim)
        nn.init.normal_(self.ipe.weight, std=0.02)
        if not config.use_ipe:
            nn.init.zeros_(self.ipe.weight)
            self.ipe.weight.requires_grad_(False)
        self.encoder_side = DualBranchModule(config, self.ipe, causal=False)
        self.decoder_side = DualBranchModule(config, self.ipe, causal=True)
        if config.shared_branches:
            # share parameters across sides; causality still differs per side
            self.decoder_side.branch = self.encoder_side.branch
            self.decoder_side.gate = self.encoder_side.gate

    def side(self, name: str) -> DualBranchModule:
        if name == "encoder":
            return self.encoder_side
        if name == "decoder":
            return self.decoder_side
        raise ValueError(f"side must be 'encoder' or 'decoder', got {name!r}")

    def apply_tokens(self, name: str, embeddings: torch.Tensor, token_ids: torch.Tensor, **kw):
        """Variant entry point: derive layout from token ids and run one side."""
        rows = ipe_indices(token_ids, self.levels)
        members = item_membership(token_ids, self.levels)
        return self.side(name)(embeddings, rows, members, **kw)


def dual_branch_forward(
    embeddings: torch.Tensor, side: str, state: DualBranchState, **kw
):
    """Run one side over an unpadded layout inferred from the sequence length.

    Encoder sequences have length L*T+1 (code tokens then EOS); decoder
    sequences have length L+1 (BOS then code tokens).
    """
    s = embeddings.shape[-2]
    levels = state.levels
    if side == "encoder":
        if (s - 1) % levels:
            raise ValueError(f"encoder length {s} does not match L*T+1 for L={levels}")
        T = (s - 1) // levels
        rows = torch.tensor(ipe_for_input(T, levels))
        members = torch.tensor(input_memberships(T, levels))
    else:
        if s != levels + 1:
            raise ValueError(f"decoder length {s} != L+1 for L={levels}")
        rows = torch.tensor(ipe_for_target(levels))
        members = torch.tensor(target_memberships(levels))
    if embeddings.ndim == 3:
        rows = rows.expand(embeddings.shape[0], -1)
        members = members.expand(embeddings.shape[0], -1)
    return state.side(side)(embeddings, rows, members, **kw)
