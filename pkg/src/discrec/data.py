"""Interaction ingestion, preprocessing, splits, and synthetic data generation.

The pipeline here is deliberately boring: read TSV logs, k-core filter to a
fixpoint, build per-user chronological sequences, and carve leave-one-out or
user-level random splits. A synthetic generator produces item embeddings with
a recoverable coarse-to-fine hierarchy plus Markov-chain interaction logs so
the whole stack can be exercised at desk scale.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_TOKEN = 0  # reserved across the whole pipeline


class ParseError(ValueError):
    """Raised when an input file line cannot be parsed."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: tuple[str, ...]


@dataclass(frozen=True)
class Sample:
    """One (history, target) pair for a user."""

    user_id: str
    history: tuple[str, ...]
    target: str


@dataclass
class DatasetSplit:
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]
    item_catalog: set[str]
    max_len: int
    dropped_users: int = 0


@dataclass
class SyntheticConfig:
    n_users: int = 500
    n_items: int = 200
    embed_dim: int = 32
    hierarchy_depth: int = 3
    transition_sharpness: float = 2.0
    seq_len_range: tuple[int, int] = (5, 12)
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_users, self.n_items, self.embed_dim, self.hierarchy_depth) < 1:
            raise ValueError("all synthetic counts must be positive")
        lo, hi = self.seq_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid seq_len_range {self.seq_len_range}")


def load_interactions(path: str | Path, format: str = "tsv") -> list[Interaction]:
    """Read `user<TAB>item<TAB>timestamp` lines; one Interaction per line.

    Duplicate lines are preserved as distinct records. Ordering is file order;
    chronological sorting happens in build_sequences.
    """
    if format != "tsv":
        raise ValueError(f"unknown interactions format: {format!r}")
    out: list[Interaction] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            user, item, ts = fields
            try:
                timestamp = int(ts)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-integer timestamp {ts!r}") from None
            if timestamp < 0:
                raise ParseError(f"{path}: line {lineno}: negative timestamp {timestamp}")
            out.append(Interaction(user, item, timestamp))
    return out


def kcore_filter(interactions: list[Interaction], k: int) -> list[Interaction]:
    """Iteratively drop users/items with fewer than k interactions until stable.

    Returns the maximal subset where every surviving user and item has >= k
    interactions (the standard k-core fixpoint).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(interactions)
    while True:
        user_counts = Counter(r.user_id for r in current)
        item_counts = Counter(r.item_id for r in current)
        kept = [r for r in current if user_counts[r.user_id] >= k and item_counts[r.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_sequences(interactions: list[Interaction]) -> list[UserSequence]:
    """Group by user and sort items by ascending timestamp, stable on ties.

    Stability is with respect to input record order, so the result is
    reproducible for identical files. Users are emitted in first-appearance
    order.
    """
    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for idx, r in enumerate(interactions):
        per_user[r.user_id].append((r.timestamp, idx, r.item_id))
    sequences = []
    for user, records in per_user.items():
        records.sort(key=lambda t: (t[0], t[1]))
        sequences.append(UserSequence(user, tuple(item for _, _, item in records)))
    return sequences


def _truncate(items: tuple[str, ...], max_len: int) -> tuple[str, ...]:
    return items[-max_len:] if len(items) > max_len else items


def leave_one_out_split(sequences: list[UserSequence], max_len: int = 20) -> DatasetSplit:
    """Hold out the last item per user for test and the second-to-last for valid.

    Train samples are the next-item pairs inside the remaining prefix. Histories
    keep the most recent max_len items. Sequences shorter than 3 cannot supply
    both held-out targets and are dropped (counted in dropped_users).
    """
    train: list[Sample] = []
    valid: list[Sample] = []
    test: list[Sample] = []
    catalog: set[str] = set()
    dropped = 0
    for seq in sequences:
        items = seq.items
        if len(items) < 3:
            dropped += 1
            continue
        catalog.update(items)
        test.append(Sample(seq.user_id, _truncate(items[:-1], max_len), items[-1]))
        valid.append(Sample(seq.user_id, _truncate(items[:-2], max_len), items[-2]))
        prefix = items[:-2]
        for j in range(1, len(prefix)):
            train.append(Sample(seq.user_id, _truncate(prefix[:j], max_len), prefix[j]))
    return DatasetSplit(train, valid, test, catalog, max_len, dropped_users=dropped)


def user_random_split(
    sequences: list[UserSequence],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    max_len: int = 20,
) -> DatasetSplit:
    """Assign each user wholly to train/valid/test at the given ratios.

    Counts use the largest-remainder method so e.g. 10 users at 8:1:1 give
    exactly 8/1/1. Training users contribute all their next-item pairs;
    held-out users contribute a single last-item sample.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    eligible = [s for s in sequences if len(s.items) >= 2]
    dropped = len(sequences) - len(eligible)
    ordered = sorted(eligible, key=lambda s: s.user_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n = len(ordered)
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    remainders = sorted(range(3), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    boundaries = np.cumsum(counts)

    train: list[Sample] = []
    valid: list[Sample] = []
    test: list[Sample] = []
    catalog: set[str] = set()
    for pos, seq_idx in enumerate(perm):
        seq = ordered[seq_idx]
        catalog.update(seq.items)
        if pos < boundaries[0]:
            for j in range(1, len(seq.items)):
                train.append(Sample(seq.user_id, _truncate(seq.items[:j], max_len), seq.items[j]))
        elif pos < boundaries[1]:
            valid.append(Sample(seq.user_id, _truncate(seq.items[:-1], max_len), seq.items[-1]))
        else:
            test.append(Sample(seq.user_id, _truncate(seq.items[:-1], max_len), seq.items[-1]))
    return DatasetSplit(train, valid, test, catalog, max_len, dropped_users=dropped)


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Interaction], dict[str, np.ndarray]]:
    """Sample item embeddings from a Gaussian hierarchy and logs from a Markov chain.

    Embeddings: each item follows a path through a tree of hierarchy_depth
    levels; level offsets are Gaussian with variance halving per level, and the
    final level is per-item noise, so residual quantization has a recoverable
    coarse-to-fine structure. hierarchy_depth=1 degenerates to i.i.d. Gaussians.

    Interactions: a row-stochastic transition matrix softmax(sharpness * A)
    with A ~ N(0, 1) drives per-user walks; sharpness 0 gives uniform next-item
    draws. The transition structure is drawn independently of the embedding
    hierarchy, so it carries purely collaborative signal.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_items, dim, depth = config.n_items, config.embed_dim, config.hierarchy_depth

    embeddings = np.zeros((n_items, dim))
    if depth > 1:
        branching = max(2, math.ceil(n_items ** (1.0 / depth)))
        parents = np.zeros(n_items, dtype=np.int64)
        for level in range(depth - 1):
            scale = 0.5 ** level
            children = parents * branching + rng.integers(0, branching, size=n_items)
            n_nodes = int(children.max()) + 1
            offsets = rng.standard_normal((n_nodes, dim)) * scale
            embeddings += offsets[children]
            parents = children
        embeddings += rng.standard_normal((n_items, dim)) * 0.5 ** (depth - 1)
    else:
        embeddings += rng.standard_normal((n_items, dim))

    logits = config.transition_sharpness * rng.standard_normal((n_items, n_items))
    logits -= logits.max(axis=1, keepdims=True)
    transition = np.exp(logits)
    transition /= transition.sum(axis=1, keepdims=True)

    item_ids = [f"i{idx:05d}" for idx in range(n_items)]
    interactions: list[Interaction] = []
    lo, hi = config.seq_len_range
    for u in range(config.n_users):
        user = f"u{u:05d}"
        length = int(rng.integers(lo, hi + 1))
        cur = int(rng.integers(0, n_items))
        for t in range(length):
            interactions.append(Interaction(user, item_ids[cur], t))
            cur = int(rng.choice(n_items, p=transition[cur]))
    embedding_map = {item_ids[i]: embeddings[i].copy() for i in range(n_items)}
    return interactions, embedding_map


def bucket_by_length(test_samples: list[Sample], lengths: list[int]) -> dict[int, list[Sample]]:
    """Partition samples by history length; lengths outside the list are dropped."""
    buckets: dict[int, list[Sample]] = {length: [] for length in lengths}
    for sample in test_samples:
        n = len(sample.history)
        if n in buckets:
            buckets[n].append(sample)
    return buckets


def bucket_by_popularity(
    test_samples: list[Sample],
    percentiles: list[float],
    train_interactions: list[Interaction],
) -> dict[float, list[Sample]]:
    """Nested buckets of samples whose target sits in the least-popular p% of items.

    Popularity is counted on training interactions only; items never seen in
    training count as zero. Ties sort by item id for determinism.
    """
    for p in percentiles:
        if not 0 < p <= 100:
            raise ValueError(f"percentile {p} outside (0, 100]")
    counts = Counter(r.item_id for r in train_interactions)
    items = sorted({s.target for s in test_samples} | set(counts), key=lambda i: (counts[i], i))
    buckets: dict[float, list[Sample]] = {}
    for p in percentiles:
        cutoff = math.ceil(p / 100.0 * len(items))
        low_pop = set(items[:cutoff])
        buckets[p] = [s for s in test_samples if s.target in low_pop]
    return buckets


def write_interactions_tsv(interactions: list[Interaction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in interactions:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")


def write_embeddings(embeddings: dict[str, np.ndarray], path: str | Path) -> None:
    """One line per item: `item_id f1 ... fD` with full-precision decimal floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(embeddings):
            values = " ".join(repr(float(v)) for v in embeddings[item])
            fh.write(f"{item} {values}\n")


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise ParseError(f"{path}: line {lineno}: expected `item f1 ... fD`")
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric embedding value") from None
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ParseError(f"{path}: line {lineno}: dimension {vec.shape[0]} != {dim}")
            out[parts[0]] = vec
    return out


def write_split_manifest(samples: list[Sample], path: str | Path) -> None:
    """JSON lines, one `{"user", "history", "target"}` object per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"user": s.user_id, "history": list(s.history), "target": s.target}) + "\n")


def load_split_manifest(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(Sample(obj["user"], tuple(obj["history"]), obj["target"]))
    return out


def training_item_counts(sequences: list[UserSequence]) -> Counter:
    """Item occurrence counts over the leave-one-out training region (all but
    the last two events per user). The base for popularity bucketing."""
    counts: Counter[str] = Counter()
    for seq in sequences:
        for item in seq.items[:-2]:
            counts[item] += 1
    return counts


def split_stats(interactions: list[Interaction], sequences: list[UserSequence]) -> dict:
    """Dataset statistics: users, items, interactions, sparsity, average length."""
    users = {r.user_id for r in interactions}
    items = {r.item_id for r in interactions}
    n_inter = len(interactions)
    sparsity = 1.0 - n_inter / (len(users) * len(items)) if users and items else 0.0
    avg_len = float(np.mean([len(s.items) for s in sequences])) if sequences else 0.0
    return {
        "n_users": len(users),
        "n_items": len(items),
        "n_interactions": n_inter,
        "sparsity": sparsity,
        "avg_seq_len": avg_len,
    }
