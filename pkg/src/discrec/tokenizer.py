"""Residual-quantization tokenizer: learn hierarchical semantic IDs for items.

An MLP encoder maps each item embedding to a latent code vector, which L
codebooks quantize level by level on the residual left over from the previous
level. The reconstruction decodes the summed selected code vectors back to the
embedding space. After training, every catalog item gets a unique L-tuple of
codes; collisions are resolved by bumping the last-level code to the nearest
unused entry. A prefix tree over the assigned IDs backs constrained decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .artifacts import load_checkpoint, save_checkpoint, state_from_numpy, state_to_numpy


@dataclass
class TokenizerConfig:
    levels: int = 4
    codebook_size: int = 256
    code_dim: int = 32
    beta: float = 0.25
    hidden_layers: int = 3
    steps: int = 20_000
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    dead_code_patience: int = 1000
    kmeans_init: bool = True
    log_every: int = 100

    def validate(self) -> None:
        if self.levels < 1 or self.codebook_size < 1 or self.code_dim < 1:
            raise ValueError("levels, codebook_size, and code_dim must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _interp_dims(d_in: int, d_out: int, hidden_layers: int) -> list[int]:
    # monotone linear interpolation between the endpoint widths
    steps = hidden_layers + 1
    return [round(d_in + (d_out - d_in) * i / steps) for i in range(steps + 1)]


def argmin_lowest_index(distances: torch.Tensor) -> torch.Tensor:
    """Argmin over the last dim; exact ties resolve to the lowest index."""
    return torch.argmin(distances, dim=-1)


def pairwise_sq_dists(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Exact expansion (B, K): identical codebook rows give bitwise-equal columns."""
    return (x.unsqueeze(-2) - codebook.unsqueeze(0)).pow(2).sum(-1)


class RqVae(nn.Module):
    """Encoder, L residual codebooks, and decoder."""

    def __init__(self, input_dim: int, config: TokenizerConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.input_dim = input_dim
        self.encoder = _mlp(_interp_dims(input_dim, config.code_dim, config.hidden_layers))
        self.decoder = _mlp(_interp_dims(config.code_dim, input_dim, config.hidden_layers))
        self.codebooks = nn.Parameter(
            torch.randn(config.levels, config.codebook_size, config.code_dim) * 0.1
        )

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.input_dim:
            raise ValueError(f"expected embeddings of dim {self.input_dim}, got {z.shape[-1]}")
        return self.encoder(z)

    def decode(self, r_hat: torch.Tensor) -> torch.Tensor:
        if r_hat.shape[-1] != self.config.code_dim:
            raise ValueError(f"expected code vectors of dim {self.config.code_dim}, got {r_hat.shape[-1]}")
        return self.decoder(r_hat)

    def quantize(
        self, r: torch.Tensor, detach_lookup: bool = True
    ) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
        """Residual quantization of r against the L codebooks.

        Returns (codes (…, L), residuals [v_1..v_L], r_hat = sum of selected
        codes). With detach_lookup the residual recursion subtracts detached
        code vectors, so residual gradients flow only along the encoder path;
        values are unaffected.
        """
        return quantize(r, self.codebooks, detach_lookup=detach_lookup)

    def training_forward(self, z: torch.Tensor):
        """Straight-through pass: decoder input is r + sg(r_hat - r)."""
        r = self.encode(z)
        codes, residuals, r_hat = self.quantize(r)
        z_hat = self.decode(r + (r_hat - r).detach())
        return z_hat, codes, residuals


def quantize(
    r: torch.Tensor, codebooks: torch.Tensor, detach_lookup: bool = False
) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
    """Select per-level nearest codes on successive residuals (v_1 = r).

    codes[l] = argmin_k ||v_l - e_l_k||^2 with ties to the lowest index,
    v_{l+1} = v_l - e_l[codes[l]], r_hat = sum_l e_l[codes[l]].
    """
    if codebooks.ndim != 3 or codebooks.shape[1] == 0:
        raise ValueError("codebooks must be a nonempty (L, K, d) tensor")
    squeeze = r.ndim == 1
    if squeeze:
        r = r.unsqueeze(0)
    levels = codebooks.shape[0]
    v = r
    codes, residuals, selected = [], [], []
    for level in range(levels):
        residuals.append(v)
        dists = pairwise_sq_dists(v, codebooks[level])
        c = argmin_lowest_index(dists)
        codes.append(c)
        e = codebooks[level][c]
        selected.append(e)
        v = v - (e.detach() if detach_lookup else e)
    codes_t = torch.stack(codes, dim=-1)
    r_hat = torch.stack(selected, dim=0).sum(0)
    if squeeze:
        codes_t = codes_t.squeeze(0)
        residuals = [x.squeeze(0) for x in residuals]
        r_hat = r_hat.squeeze(0)
    return codes_t, residuals, r_hat


def tokenization_loss(
    z: torch.Tensor,
    z_hat: torch.Tensor,
    residuals: list[torch.Tensor],
    codes: torch.Tensor,
    codebooks: torch.Tensor,
    beta: float,
) -> torch.Tensor:
    """Reconstruction plus per-level codebook and commitment terms.

    ||z_hat - z||^2 + sum_l ||sg[v_l] - e_l||^2 + beta * ||v_l - sg[e_l]||^2,
    averaged over the batch. The first quantization term reaches only the
    codebooks, the second only the encoder path.
    """
    terms = tokenization_loss_terms(z, z_hat, residuals, codes, codebooks, beta)
    return terms["reconstruction"] + terms["codebook"] + terms["commitment"]


def tokenization_loss_terms(
    z: torch.Tensor,
    z_hat: torch.Tensor,
    residuals: list[torch.Tensor],
    codes: torch.Tensor,
    codebooks: torch.Tensor,
    beta: float,
) -> dict[str, torch.Tensor]:
    if z.ndim == 1:
        z, z_hat = z.unsqueeze(0), z_hat.unsqueeze(0)
        residuals = [v.unsqueeze(0) for v in residuals]
        codes = codes.unsqueeze(0)
    recon = (z_hat - z).pow(2).sum(-1).mean()
    codebook_term = z.new_zeros(())
    commit_term = z.new_zeros(())
    for level, v in enumerate(residuals):
        e = codebooks[level][codes[..., level]]
        codebook_term = codebook_term + (v.detach() - e).pow(2).sum(-1).mean()
        commit_term = commit_term + beta * (v - e.detach()).pow(2).sum(-1).mean()
    return {"reconstruction": recon, "codebook": codebook_term, "commitment": commit_term}


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Plain Lloyd's algorithm with k-means++ seeding; deterministic given rng."""
    n, d = x.shape
    if n == 0:
        return rng.standard_normal((k, d)) * 0.1
    if n < k:
        jitter = rng.standard_normal((k, d)) * (x.std() + 1e-4) * 0.05
        return x[rng.integers(0, n, size=k)] + jitter
    centers = np.empty((k, d))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(1))
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(1)
        new_centers = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new_centers[j] = members.mean(0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


@dataclass
class TrainedTokenizer:
    """A trained RqVae plus the catalog normalization it was fit on."""

    model: RqVae
    mean: np.ndarray
    std: np.ndarray
    config: TokenizerConfig
    input_dim: int
    final_loss: float = 0.0
    log: list = field(default_factory=list)
    dead_code_refreshes: int = 0

    def standardize(self, z: np.ndarray) -> torch.Tensor:
        return torch.from_numpy((z - self.mean) / self.std).float()

    @torch.no_grad()
    def codes_for(self, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Quantize raw embeddings; returns (codes (N, L), last-level residuals)."""
        self.model.eval()
        z = self.standardize(np.atleast_2d(embeddings))
        r = self.model.encode(z)
        codes, residuals, _ = self.model.quantize(r, detach_lookup=False)
        return codes.numpy(), residuals[-1].numpy()

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            {
                "kind": "tokenizer",
                "config": asdict(self.config),
                "input_dim": self.input_dim,
                "state": state_to_numpy(self.model.state_dict()),
                "mean": self.mean,
                "std": self.std,
                "final_loss": self.final_loss,
                "dead_code_refreshes": self.dead_code_refreshes,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedTokenizer":
        payload = load_checkpoint(path)
        if payload.get("kind") != "tokenizer":
            raise ValueError(f"{path} is not a tokenizer checkpoint")
        config = TokenizerConfig(**payload["config"])
        model = RqVae(payload["input_dim"], config)
        model.load_state_dict(state_from_numpy(payload["state"]))
        model.eval()
        return cls(
            model=model,
            mean=payload["mean"],
            std=payload["std"],
            config=config,
            input_dim=payload["input_dim"],
            final_loss=payload["final_loss"],
            dead_code_refreshes=payload["dead_code_refreshes"],
        )


def train_tokenizer(item_embeddings: dict[str, np.ndarray], config: TokenizerConfig) -> TrainedTokenizer:
    """Fit the quantizer on the catalog embeddings.

    Embeddings are standardized per dimension over the catalog (the transform
    is stored with the checkpoint). Codebooks start from per-level k-means on
    the first batch of encoder outputs, and codes unused for
    dead_code_patience consecutive steps are re-seeded from current encoder
    outputs. Deterministic given config.seed.
    """
    config.validate()
    if not item_embeddings:
        raise ValueError("need at least one item embedding")
    item_order = sorted(item_embeddings)
    raw = np.stack([item_embeddings[i] for i in item_order]).astype(np.float64)
    mean = raw.mean(0)
    std = raw.std(0)
    std[std < 1e-8] = 1.0
    data = torch.from_numpy((raw - mean) / std).float()
    n_items, input_dim = data.shape

    torch.manual_seed(config.seed)
    model = RqVae(input_dim, config)
    rng = np.random.default_rng(config.seed)

    def next_batch(state: list[np.ndarray]) -> torch.Tensor:
        take = min(config.batch_size, n_items)
        if len(state[0]) < take:
            state[0] = rng.permutation(n_items)
        idx, state[0] = state[0][:take], state[0][take:]
        return data[torch.from_numpy(np.ascontiguousarray(idx))]

    perm_state = [np.array([], dtype=np.int64)]

    if config.kmeans_init:
        with torch.no_grad():
            first = next_batch(perm_state)
            v = model.encode(first).numpy().astype(np.float64)
            for level in range(config.levels):
                centers = _kmeans(v, config.codebook_size, rng)
                model.codebooks.data[level] = torch.from_numpy(centers).float()
                d2 = ((v[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
                v = v - centers[d2.argmin(1)]
        perm_state = [np.array([], dtype=np.int64)]

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    last_used = np.zeros((config.levels, config.codebook_size), dtype=np.int64)
    refreshes = 0
    log: list[dict] = []
    final_loss = math.nan
    model.train()
    for step in range(1, config.steps + 1):
        batch = next_batch(perm_state)
        z_hat, codes, residuals = model.training_forward(batch)
        terms = tokenization_loss_terms(batch, z_hat, residuals, codes, model.codebooks, config.beta)
        loss = terms["reconstruction"] + terms["codebook"] + terms["commitment"]
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite tokenizer loss at step {step}: "
                f"recon={terms['reconstruction'].item():.4g} "
                f"codebook={terms['codebook'].item():.4g} commit={terms['commitment'].item():.4g}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        with torch.no_grad():
            flat = codes.reshape(-1, config.levels).numpy()
            for level in range(config.levels):
                last_used[level, np.unique(flat[:, level])] = step
            stale = np.argwhere(step - last_used >= config.dead_code_patience)
            if len(stale):
                r = model.encode(batch)
                for level, code in stale:
                    pick = int(rng.integers(0, r.shape[0]))
                    model.codebooks.data[level, code] = r[pick]
                    last_used[level, code] = step
                    refreshes += 1

        final_loss = float(loss.item())
        if step % config.log_every == 0 or step == config.steps:
            log.append({
                "step": step,
                "loss": final_loss,
                "reconstruction": float(terms["reconstruction"].item()),
            })
    model.eval()
    return TrainedTokenizer(
        model=model,
        mean=mean,
        std=std,
        config=config,
        input_dim=input_dim,
        final_loss=final_loss,
        log=log,
        dead_code_refreshes=refreshes,
    )


@dataclass
class CollisionReport:
    n_items: int
    reassigned: list[str]
    unassignable: list[str]

    @property
    def collision_rate(self) -> float:
        if self.n_items == 0:
            return 0.0
        return (len(self.reassigned) + len(self.unassignable)) / self.n_items


def assign_ids(
    item_embeddings: dict[str, np.ndarray], tokenizer: TrainedTokenizer
) -> tuple[dict[str, tuple[int, ...]], CollisionReport]:
    """Give every item a unique semantic ID.

    Items are processed in sorted-id order; when a full L-tuple is already
    taken, the later item scans last-level codes by distance to its final
    residual (ties to the lowest index) and takes the nearest unused one.
    Items whose whole last-level scan is exhausted are reported unassignable
    and excluded.
    """
    item_order = sorted(item_embeddings)
    raw = np.stack([item_embeddings[i] for i in item_order])
    codes, last_residuals = tokenizer.codes_for(raw)
    last_codebook = tokenizer.model.codebooks.detach().numpy()[-1]

    id_map: dict[str, tuple[int, ...]] = {}
    taken: set[tuple[int, ...]] = set()
    reassigned: list[str] = []
    unassignable: list[str] = []
    for idx, item in enumerate(item_order):
        full = tuple(int(c) for c in codes[idx])
        if full not in taken:
            id_map[item] = full
            taken.add(full)
            continue
        prefix = full[:-1]
        d2 = ((last_codebook - last_residuals[idx]) ** 2).sum(1)
        placed = False
        for k in np.argsort(d2, kind="stable"):
            candidate = prefix + (int(k),)
            if candidate not in taken:
                id_map[item] = candidate
                taken.add(candidate)
                reassigned.append(item)
                placed = True
                break
        if not placed:
            unassignable.append(item)
    return id_map, CollisionReport(len(item_order), reassigned, unassignable)


class PrefixTree:
    """Trie over assigned semantic IDs; leaves carry the item id."""

    __slots__ = ("children", "item", "levels")

    def __init__(self, levels: int):
        self.children: dict[int, PrefixTree] = {}
        self.item: str | None = None
        self.levels = levels

    def insert(self, codes: tuple[int, ...], item: str) -> None:
        if len(codes) != self.levels:
            raise ValueError(f"id length {len(codes)} != {self.levels}")
        node = self
        for c in codes:
            node = node.children.setdefault(int(c), PrefixTree(self.levels))
        if node.item is not None:
            raise ValueError(f"duplicate semantic id {codes} for {node.item!r} and {item!r}")
        node.item = item

    def node(self, prefix: tuple[int, ...]) -> "PrefixTree | None":
        node = self
        for c in prefix:
            node = node.children.get(int(c))
            if node is None:
                return None
        return node

    def valid_children(self, prefix: tuple[int, ...]) -> list[int]:
        node = self.node(prefix)
        return sorted(node.children) if node else []

    def contains(self, codes: tuple[int, ...]) -> bool:
        node = self.node(codes)
        return node is not None and node.item is not None

    def item_for(self, codes: tuple[int, ...]) -> str:
        node = self.node(codes)
        if node is None or node.item is None:
            raise KeyError(f"no item with semantic id {codes}")
        return node.item

    def __len__(self) -> int:
        if self.item is not None:
            return 1
        return sum(len(child) for child in self.children.values())


def build_prefix_tree(id_map: dict[str, tuple[int, ...]]) -> PrefixTree:
    if not id_map:
        raise ValueError("cannot build a prefix tree from an empty id map")
    levels = len(next(iter(id_map.values())))
    tree = PrefixTree(levels)
    for item, codes in id_map.items():
        tree.insert(tuple(codes), item)
    return tree


def tokenize_sequence(history, id_map: dict[str, tuple[int, ...]], vocabulary) -> list[int]:
    """Flatten an item history into level-offset code tokens (no EOS here)."""
    tokens: list[int] = []
    for item in history:
        if item not in id_map:
            raise KeyError(f"item {item!r} has no assigned semantic id")
        tokens.extend(vocabulary.code_token(level, c) for level, c in enumerate(id_map[item]))
    return tokens


def tokenize_target(item: str, id_map: dict[str, tuple[int, ...]], vocabulary) -> list[int]:
    if item not in id_map:
        raise KeyError(f"item {item!r} has no assigned semantic id")
    return [vocabulary.code_token(level, c) for level, c in enumerate(id_map[item])]


def detokenize_codes(tokens, vocabulary) -> tuple[int, ...]:
    """Map level-offset code tokens back to raw codes, checking level order."""
    codes = []
    for pos, tok in enumerate(tokens):
        pair = vocabulary.level_and_code(int(tok))
        if pair is None:
            raise ValueError(f"token {tok} is a special, not a code token")
        level, code = pair
        if level != pos % vocabulary.levels:
            raise ValueError(f"token {tok} belongs to level {level}, expected {pos % vocabulary.levels}")
        codes.append(code)
    return tuple(codes)


def write_id_map(id_map: dict[str, tuple[int, ...]], path: str | Path) -> None:
    """JSON lines `{"item": ..., "codes": [...]}` in sorted item order."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(id_map):
            fh.write(json.dumps({"item": item, "codes": list(id_map[item])}) + "\n")


def load_id_map(path: str | Path) -> dict[str, tuple[int, ...]]:
    import json

    out: dict[str, tuple[int, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out[obj["item"]] = tuple(int(c) for c in obj["codes"])
    return out
