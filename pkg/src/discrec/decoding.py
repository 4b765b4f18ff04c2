"""Ranked next-item generation under a semantic-ID prefix tree.

Beam search expands only code continuations that exist in the trie, so every
finished hypothesis is a catalog item. Scores are sums of per-step
log-softmax values over the full vocabulary (the same normalization the
training loss uses); the trie only restricts which children are expanded.
Ties order by lexicographic code path. An exhaustive scorer over the whole
catalog provides the equivalence oracle: with beam_size >= catalog size the
two rankings are identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tokenizer import PrefixTree
from .vocab import BOS_ID


@dataclass
class RankedPrediction:
    items: list[str]
    scores: list[float]
    code_paths: list[tuple[int, ...]]


def _sort_key(entry):
    score, path = entry[0], entry[1]
    return (-score, path)


@torch.no_grad()
def beam_search_batch(
    model,
    enc_tokens: torch.Tensor,
    trie: PrefixTree,
    beam_size: int = 20,
) -> list[RankedPrediction]:
    """Constrained beam search for a batch of encoder inputs.

    Hypotheses across all rows share each decoder forward pass; the encoder
    runs once. Scores accumulate left to right so they are bit-comparable
    with exhaustive_rank_batch.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if len(trie) == 0:
        raise ValueError("prefix tree is empty")
    model.eval()
    levels = model.vocabulary.levels
    h_enc, real = model.encode_ids(enc_tokens)
    n_rows = enc_tokens.shape[0]
    beams: list[list[tuple[float, tuple[int, ...]]]] = [[(0.0, ())] for _ in range(n_rows)]

    for level in range(levels):
        flat_rows: list[int] = []
        flat_paths: list[tuple[int, ...]] = []
        for row, hyps in enumerate(beams):
            for _, path in hyps:
                flat_rows.append(row)
                flat_paths.append(path)
        dec = torch.tensor(
            [[BOS_ID] + [model.vocabulary.code_token(l, c) for l, c in enumerate(p)] for p in flat_paths],
            dtype=torch.long,
        )
        row_idx = torch.tensor(flat_rows, dtype=torch.long)
        h_dec = model.decode_ids(h_enc[row_idx], real[row_idx], dec)
        logprobs = F.log_softmax(model.token_logits(h_dec[:, -1]), dim=-1)

        cursor = 0
        new_beams: list[list[tuple[float, tuple[int, ...]]]] = []
        for row, hyps in enumerate(beams):
            candidates: list[tuple[float, tuple[int, ...]]] = []
            for score, path in hyps:
                step = logprobs[cursor]
                cursor += 1
                for code in trie.valid_children(path):
                    token = model.vocabulary.code_token(level, code)
                    candidates.append((score + float(step[token]), path + (code,)))
            candidates.sort(key=_sort_key)
            new_beams.append(candidates[:beam_size])
        beams = new_beams

    out = []
    for hyps in beams:
        ranked = sorted(hyps, key=_sort_key)
        out.append(
            RankedPrediction(
                items=[trie.item_for(path) for _, path in ranked],
                scores=[score for score, _ in ranked],
                code_paths=[path for _, path in ranked],
            )
        )
    return out


def constrained_beam_search(
    model, enc_tokens: torch.Tensor, trie: PrefixTree, beam_size: int = 20
) -> RankedPrediction:
    """Single-row convenience wrapper around beam_search_batch."""
    if enc_tokens.ndim == 1:
        enc_tokens = enc_tokens.unsqueeze(0)
    return beam_search_batch(model, enc_tokens, trie, beam_size)[0]


@torch.no_grad()
def exhaustive_rank_batch(
    model,
    enc_tokens: torch.Tensor,
    id_map: dict[str, tuple[int, ...]],
    candidate_chunk: int = 512,
) -> list[RankedPrediction]:
    """Score every assigned ID by teacher forcing; rank with the beam tie rule."""
    model.eval()
    levels = model.vocabulary.levels
    items = list(id_map)
    paths = [tuple(id_map[i]) for i in items]
    dec = torch.tensor(
        [[BOS_ID] + [model.vocabulary.code_token(l, c) for l, c in enumerate(p)] for p in paths],
        dtype=torch.long,
    )
    h_enc_all, real_all = model.encode_ids(enc_tokens)
    out = []
    n_candidates = len(items)
    for row in range(enc_tokens.shape[0]):
        scores = [0.0] * n_candidates
        for start in range(0, n_candidates, candidate_chunk):
            chunk = dec[start : start + candidate_chunk]
            h_enc = h_enc_all[row : row + 1].expand(chunk.shape[0], -1, -1)
            real = real_all[row : row + 1].expand(chunk.shape[0], -1)
            h_dec = model.decode_ids(h_enc, real, chunk)
            logprobs = F.log_softmax(model.token_logits(h_dec[:, :levels]), dim=-1)
            step_scores = logprobs.gather(-1, chunk[:, 1:].unsqueeze(-1)).squeeze(-1)
            for offset, cand in enumerate(range(start, min(start + candidate_chunk, n_candidates))):
                total = 0.0
                for level in range(levels):
                    total += float(step_scores[offset, level])
                scores[cand] = total
        ranked = sorted(zip(scores, paths, items), key=_sort_key)
        out.append(
            RankedPrediction(
                items=[item for _, _, item in ranked],
                scores=[score for score, _, _ in ranked],
                code_paths=[path for _, path, _ in ranked],
            )
        )
    return out


def exhaustive_rank(
    model, enc_tokens: torch.Tensor, id_map: dict[str, tuple[int, ...]]
) -> RankedPrediction:
    if enc_tokens.ndim == 1:
        enc_tokens = enc_tokens.unsqueeze(0)
    return exhaustive_rank_batch(model, enc_tokens, id_map)[0]
