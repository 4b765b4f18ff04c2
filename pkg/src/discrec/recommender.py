"""Sequence-to-sequence recommender over semantic-ID token streams.

The model embeds flattened code-token histories, optionally routes them
through the dual-branch module at the embedding layer, runs the
encoder-decoder backbone, and scores each generation step against the token
embedding table. A variant registry covers the ablations (module pieces
removed) and the exploratory designs (module at all layers, pooled-query
attention, item-averaged outputs, self-gating, plain positional or item-ID
embeddings).
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import load_checkpoint, save_checkpoint, state_from_numpy, state_to_numpy
from .backbone import BackboneConfig, Decoder, Encoder
from .dual_branch import (
    DualBranchConfig,
    DualBranchState,
    GATE_SELF,
    GATE_SUM,
    ipe_indices,
    item_membership,
)
from .tokenizer import tokenize_sequence, tokenize_target
from .vocab import BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID, TokenVocabulary

VARIANTS = (
    "DiscRec",
    "WoIPE",
    "WoTF",
    "WoGating",
    "Baseline",
    "WithPE",
    "WithIE",
    "AllLayer",
    "OneQuery",
    "TokenAvg",
    "SelfGating",
)

_MODULE_VARIANTS = {"DiscRec", "WoIPE", "WoTF", "WoGating", "AllLayer", "OneQuery", "TokenAvg", "SelfGating"}


@dataclass
class RecommenderConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branch_heads: int = 2
    branch_head_dim: int = 64
    branch_ffn_dim: int = 1024
    branch_dropout: float = 0.1
    shared_branches: bool = False
    variant: str = "DiscRec"
    max_len: int = 20
    seed: int = 0

    def branch_config(self) -> DualBranchConfig:
        return DualBranchConfig(
            model_dim=self.backbone.model_dim,
            heads=self.branch_heads,
            head_dim=self.branch_head_dim,
            ffn_dim=self.branch_ffn_dim,
            dropout=self.branch_dropout,
            shared_branches=self.shared_branches,
            use_ipe=self.variant != "WoIPE",
            use_transformer=self.variant != "WoTF",
            gate_mode=GATE_SUM if self.variant == "WoGating" else (GATE_SELF if self.variant == "SelfGating" else "softmax"),
            single_query=self.variant == "OneQuery",
            token_average=self.variant == "TokenAvg",
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecommenderConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


@dataclass
class Batch:
    enc_tokens: torch.Tensor  # (B, S_enc) left-padded
    dec_tokens: torch.Tensor  # (B, L+1): BOS then target codes
    labels: torch.Tensor  # (B, L)


class SequenceBatcher:
    """Turn (history, target) samples into padded id tensors.

    Encoder rows are `[PAD..., codes..., EOS]` of fixed length L*max_len+1.
    The WithIE variant appends one extended id per item (vocabulary.size +
    catalog index) after the item's codes, giving length (L+1)*max_len+1.
    """

    def __init__(
        self,
        id_map: dict[str, tuple[int, ...]],
        vocabulary: TokenVocabulary,
        max_len: int,
        variant: str = "DiscRec",
        item_index: dict[str, int] | None = None,
    ):
        self.id_map = id_map
        self.vocabulary = vocabulary
        self.max_len = max_len
        self.variant = variant
        self.item_index = item_index or {item: i for i, item in enumerate(sorted(id_map))}
        per_item = vocabulary.levels + (1 if variant == "WithIE" else 0)
        self.enc_len = per_item * max_len + 1

    def encode_history(self, history) -> list[int]:
        items = list(history)[-self.max_len :]
        if self.variant == "WithIE":
            tokens: list[int] = []
            for item in items:
                tokens.extend(tokenize_sequence([item], self.id_map, self.vocabulary))
                tokens.append(self.vocabulary.size + self.item_index[item])
        else:
            tokens = tokenize_sequence(items, self.id_map, self.vocabulary)
        tokens.append(EOS_ID)
        return [PAD_ID] * (self.enc_len - len(tokens)) + tokens

    def batch(self, samples) -> Batch:
        enc = torch.tensor([self.encode_history(s.history) for s in samples], dtype=torch.long)
        targets = [tokenize_target(s.target, self.id_map, self.vocabulary) for s in samples]
        dec = torch.tensor([[BOS_ID] + t for t in targets], dtype=torch.long)
        labels = torch.tensor(targets, dtype=torch.long)
        return Batch(enc, dec, labels)


class GenerativeRecommender(nn.Module):
    def __init__(self, vocabulary: TokenVocabulary, config: RecommenderConfig, n_items: int = 0):
        super().__init__()
        if config.variant not in VARIANTS:
            raise ValueError(f"unknown variant {config.variant!r}; valid: {', '.join(VARIANTS)}")
        self.vocabulary = vocabulary
        self.config = config
        self.n_items = n_items
        d = config.backbone.model_dim
        self.token_emb = nn.Embedding(vocabulary.size, d, padding_idx=PAD_ID)
        nn.init.normal_(self.token_emb.weight, std=0.02)
        with torch.no_grad():
            self.token_emb.weight[PAD_ID].zero_()
        self.encoder = Encoder(config.backbone)
        self.decoder = Decoder(config.backbone)
        self.module: DualBranchState | None = None
        if config.variant in _MODULE_VARIANTS:
            self.module = DualBranchState(vocabulary.levels, config.branch_config())
        if config.variant == "WithPE":
            enc_len = vocabulary.levels * config.max_len + 1
            self.position_table = nn.Embedding(enc_len, d)
            nn.init.normal_(self.position_table.weight, std=0.02)
        if config.variant == "WithIE":
            if n_items <= 0:
                raise ValueError("WithIE needs the catalog size (n_items)")
            self.item_table = nn.Embedding(n_items, d)
            nn.init.normal_(self.item_table.weight, std=0.02)

    # --- embedding lookups -------------------------------------------------
    def _embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        if self.config.variant == "WithIE":
            table = torch.cat([self.token_emb.weight, self.item_table.weight], dim=0)
            return F.embedding(ids, table)
        return self.token_emb(ids)

    def embed_input(self, code_tokens) -> torch.Tensor:
        """Rows of the token table for [X..., EOS]."""
        ids = torch.tensor(list(code_tokens) + [EOS_ID], dtype=torch.long)
        if ids.max() >= self.vocabulary.size:
            raise ValueError("token id outside vocabulary")
        return self.token_emb(ids)

    def embed_target(self, code_tokens) -> torch.Tensor:
        """Rows of the token table for [BOS, Y...]."""
        ids = torch.tensor([BOS_ID] + list(code_tokens), dtype=torch.long)
        if ids.max() >= self.vocabulary.size:
            raise ValueError("token id outside vocabulary")
        return self.token_emb(ids)

    # --- forward pieces ----------------------------------------------------
    def _module_hook(self, side: str, token_ids: torch.Tensor):
        rows = ipe_indices(token_ids, self.vocabulary.levels)
        members = item_membership(token_ids, self.vocabulary.levels)

        def hook(h: torch.Tensor) -> torch.Tensor:
            return self.module.side(side)(h, rows, members)

        return hook

    def encode_ids(self, enc_tokens: torch.Tensor, collect_attention: bool = False):
        real = enc_tokens != PAD_ID
        e = self._embed_ids(enc_tokens)
        hook = None
        if self.module is not None:
            if self.config.variant == "AllLayer":
                hook = self._module_hook("encoder", enc_tokens)
            else:
                e = self.module.apply_tokens("encoder", e, enc_tokens)
        elif self.config.variant == "WithPE":
            positions = torch.arange(enc_tokens.shape[-1], device=enc_tokens.device)
            e = e + self.position_table(positions)
        return self.encoder(e, real, pre_layer_hook=hook, collect_attention=collect_attention), real

    def decode_ids(self, h_enc: torch.Tensor, memory_real: torch.Tensor, dec_tokens: torch.Tensor):
        e = self.token_emb(dec_tokens)
        hook = None
        if self.module is not None:
            if self.config.variant == "AllLayer":
                hook = self._module_hook("decoder", dec_tokens)
            else:
                e = self.module.apply_tokens("decoder", e, dec_tokens)
        return self.decoder(e, h_enc, memory_real, pre_layer_hook=hook)

    def token_logits(self, h_dec: torch.Tensor) -> torch.Tensor:
        """Inner products with the token table; specials masked out."""
        logits = h_dec @ self.token_emb.weight.t()
        special_mask = torch.zeros(self.vocabulary.size, dtype=logits.dtype, device=logits.device)
        special_mask[:NUM_SPECIALS] = -math.inf
        return logits + special_mask

    def forward(self, batch: Batch) -> torch.Tensor:
        """Logits (B, L, vocab) for the L generation steps."""
        h_enc, real = self.encode_ids(batch.enc_tokens)
        h_dec = self.decode_ids(h_enc, real, batch.dec_tokens)
        return self.token_logits(h_dec[:, : self.vocabulary.levels])


def rec_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood summed over the L target tokens, batch-averaged."""
    if logits.ndim == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    b, steps, v = logits.shape
    nll = F.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), reduction="none")
    return nll.view(b, steps).sum(dim=1).mean()


def build_variant(
    vocabulary: TokenVocabulary, config: RecommenderConfig, n_items: int = 0
) -> GenerativeRecommender:
    """Construct a model for the configured variant, seeded for reproducibility."""
    torch.manual_seed(config.seed)
    return GenerativeRecommender(vocabulary, config, n_items=n_items)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    log_csv: str | None = None


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # (epoch, step, loss)
    epoch_loss: list = field(default_factory=list)

    def smoothed_epoch_losses(self) -> list[float]:
        return list(self.epoch_loss)


class NumericFailure(RuntimeError):
    """Training hit a non-finite loss; the model holds the last good state."""


def train_recommender(
    train_samples,
    model: GenerativeRecommender,
    batcher: SequenceBatcher,
    config: TrainConfig,
) -> TrainHistory:
    """Minimize the generation loss over (history, target) pairs.

    Batches are reshuffled each epoch from a seeded generator; dropout draws
    from the global torch RNG seeded here, so runs are reproducible
    bit-for-bit on one machine. On a non-finite loss the model is rolled back
    to the last epoch snapshot and NumericFailure is raised.
    """
    if not train_samples:
        raise ValueError("no training samples")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    data = batcher.batch(train_samples)
    n = data.enc_tokens.shape[0]
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = TrainHistory()
    last_good = copy.deepcopy(model.state_dict())
    writer = None
    log_fh = None
    if config.log_csv:
        Path(config.log_csv).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(config.log_csv, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "step", "loss", "lr", "seed"])
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            perm = torch.randperm(n, generator=gen)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                batch = Batch(data.enc_tokens[idx], data.dec_tokens[idx], data.labels[idx])
                logits = model(batch)
                loss = rec_loss(logits, batch.labels)
                if not torch.isfinite(loss):
                    model.load_state_dict(last_good)
                    raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                value = float(loss.item())
                epoch_losses.append(value)
                history.steps.append((epoch, step, value))
                if writer:
                    writer.writerow([epoch, step, f"{value:.6f}", config.lr, config.seed])
            history.epoch_loss.append(float(np.mean(epoch_losses)))
            last_good = copy.deepcopy(model.state_dict())
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return history


@dataclass
class TrainedRecommender:
    model: GenerativeRecommender
    config: RecommenderConfig
    id_map_hash: str
    n_items: int
    levels: int
    codebook_size: int

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            {
                "kind": "recommender",
                "config": self.config.to_dict(),
                "id_map_hash": self.id_map_hash,
                "n_items": self.n_items,
                "levels": self.levels,
                "codebook_size": self.codebook_size,
                "state": state_to_numpy(self.model.state_dict()),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedRecommender":
        payload = load_checkpoint(path)
        if payload.get("kind") != "recommender":
            raise ValueError(f"{path} is not a recommender checkpoint")
        config = RecommenderConfig.from_dict(payload["config"])
        vocabulary = TokenVocabulary(payload["levels"], payload["codebook_size"])
        model = GenerativeRecommender(vocabulary, config, n_items=payload["n_items"])
        model.load_state_dict(state_from_numpy(payload["state"]))
        model.eval()
        return cls(
            model=model,
            config=config,
            id_map_hash=payload["id_map_hash"],
            n_items=payload["n_items"],
            levels=payload["levels"],
            codebook_size=payload["codebook_size"],
        )
