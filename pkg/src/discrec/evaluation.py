"""Recall@K / NDCG@K over ranked predictions, overall and per bucket.

Leave-one-out evaluation has a single relevant item per sample, so NDCG
reduces to 1/log2(rank+1) with an ideal DCG of 1. Targets missing from the
ranked list (e.g. outside the beam) score zero on both metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from .artifacts import write_json
from .decoding import RankedPrediction, beam_search_batch, exhaustive_rank_batch


def recall_at_k(ranked_items: list[str], target: str, k: int) -> float:
    """1 if the target appears in the top k, else 0."""
    return 1.0 if target in ranked_items[:k] else 0.0


def ndcg_at_k(ranked_items: list[str], target: str, k: int) -> float:
    """Log-discounted gain of the single relevant item."""
    top = ranked_items[:k]
    if target not in top:
        return 0.0
    rank = top.index(target) + 1
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricTable:
    overall: dict[str, float]
    n_samples: int
    buckets: dict[str, dict[str, dict]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = dict(self.overall)
        out["n_samples"] = self.n_samples
        out["buckets"] = self.buckets
        return out

    def write_json(self, path: str | Path) -> None:
        write_json(path, self.to_json_dict())

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "bucket", "metric", "value", "count"])
            for metric in sorted(self.overall):
                writer.writerow(["overall", "", metric, f"{self.overall[metric]:.6f}", self.n_samples])
            for group in sorted(self.buckets):
                for label in sorted(self.buckets[group]):
                    entry = self.buckets[group][label]
                    for metric in sorted(k for k in entry if k != "count"):
                        writer.writerow([group, label, metric, f"{entry[metric]:.6f}", entry["count"]])


def _metric_names(ks) -> list[str]:
    return [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]


def per_sample_metrics(predictions: list[RankedPrediction], samples, ks) -> list[dict[str, float]]:
    rows = []
    for pred, sample in zip(predictions, samples):
        row = {}
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(pred.items, sample.target, k)
            row[f"ndcg@{k}"] = ndcg_at_k(pred.items, sample.target, k)
        rows.append(row)
    return rows


def _mean(rows: list[dict[str, float]], names: list[str]) -> dict[str, float]:
    if not rows:
        return {name: 0.0 for name in names}
    return {name: sum(r[name] for r in rows) / len(rows) for name in names}


def rank_samples(
    model,
    samples,
    batcher,
    trie=None,
    beam_size: int = 20,
    exhaustive: bool = False,
    id_map=None,
    user_chunk: int = 128,
) -> list[RankedPrediction]:
    """Decode every sample; chunked over users to bound memory."""
    predictions: list[RankedPrediction] = []
    for start in range(0, len(samples), user_chunk):
        chunk = samples[start : start + user_chunk]
        enc = batcher.batch(chunk).enc_tokens
        if exhaustive:
            if id_map is None:
                raise ValueError("exhaustive ranking needs the id map")
            predictions.extend(exhaustive_rank_batch(model, enc, id_map))
        else:
            if trie is None:
                raise ValueError("beam ranking needs the prefix tree")
            predictions.extend(beam_search_batch(model, enc, trie, beam_size))
    return predictions


def evaluate(
    model,
    samples,
    batcher,
    trie=None,
    ks=(5, 10),
    beam_size: int = 20,
    bucket_maps: dict[str, dict] | None = None,
    exhaustive: bool = False,
    id_map=None,
) -> MetricTable:
    """Decode, score, and aggregate; bucket maps are {group: {label: [samples]}}.

    Bucket sample lists must hold the same Sample objects passed in `samples`
    (matched by identity), as produced by the bucketing helpers.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    predictions = rank_samples(
        model, samples, batcher, trie=trie, beam_size=beam_size, exhaustive=exhaustive, id_map=id_map
    )
    rows = per_sample_metrics(predictions, samples, ks)
    names = _metric_names(ks)
    table = MetricTable(overall=_mean(rows, names), n_samples=len(samples))
    if bucket_maps:
        index_of = {id(s): i for i, s in enumerate(samples)}
        for group, buckets in bucket_maps.items():
            table.buckets[group] = {}
            for label, members in buckets.items():
                idx = [index_of[id(s)] for s in members if id(s) in index_of]
                entry = _mean([rows[i] for i in idx], names)
                entry["count"] = len(idx)
                table.buckets[group][str(label)] = entry
    return table


def popularity_ranking(item_counts: dict[str, int]) -> list[str]:
    """Items by descending count; ties by item id for determinism."""
    return [item for item, _ in sorted(item_counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def popularity_recall_at_k(item_counts: dict[str, int], eval_samples, k: int) -> float:
    """Recall@k of the static most-popular-items ranking."""
    top = set(popularity_ranking(item_counts)[:k])
    if not eval_samples:
        return 0.0
    return sum(1.0 for s in eval_samples if s.target in top) / len(eval_samples)
