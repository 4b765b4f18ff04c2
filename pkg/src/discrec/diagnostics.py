"""Analysis tooling: embedding-norm profiles by ID level and attention maps.

Norm profiles treat the Euclidean norm of an embedding as a proxy for how
much information it carries. Three sources are supported per item: the
selected codebook vectors from the tokenizer, the recommender's raw token
rows (what the semantic branch outputs, since it is the identity), and the
collaborative branch's pre-fusion outputs for the item's tokens in
isolation. Attention heatmaps average encoder self-attention over heads and
samples per layer, then crop a fixed window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dual_branch import item_local_mask
from .tokenizer import TrainedTokenizer

NORM_SOURCES = ("code", "semantic_token", "collaborative_token")


@dataclass
class NormProfile:
    source: str
    values: np.ndarray  # length L, mean norm per ID level

    def spearman_with_level(self) -> float:
        """Rank correlation of the profile against the level index (trend stat)."""
        from scipy import stats

        if len(self.values) < 2:
            return 0.0
        result = stats.spearmanr(np.arange(1, len(self.values) + 1), self.values)
        value = float(result.statistic)
        return 0.0 if np.isnan(value) else value


@dataclass
class HeatmapBundle:
    layers: list[np.ndarray]
    crop: int
    anchor: str
    requested_crop: int

    @property
    def was_clamped(self) -> bool:
        return self.crop != self.requested_crop


def norm_by_index(
    id_map: dict[str, tuple[int, ...]],
    source: str,
    tokenizer: TrainedTokenizer | None = None,
    recommender=None,
) -> NormProfile:
    """Mean per-level embedding norm over the catalog (float64 arithmetic)."""
    if not id_map:
        raise ValueError("empty catalog")
    if source not in NORM_SOURCES:
        raise ValueError(f"unknown norm source {source!r}; valid: {', '.join(NORM_SOURCES)}")
    items = sorted(id_map)
    codes = np.array([id_map[i] for i in items], dtype=np.int64)  # (N, L)
    levels = codes.shape[1]

    if source == "code":
        if tokenizer is None:
            raise ValueError("code profile needs the tokenizer")
        books = tokenizer.model.codebooks.detach().numpy().astype(np.float64)
        gathered = np.stack([books[l][codes[:, l]] for l in range(levels)], axis=1)  # (N, L, d)
    elif source == "semantic_token":
        if recommender is None:
            raise ValueError("token profiles need the recommender")
        table = recommender.token_emb.weight.detach().numpy().astype(np.float64)
        vocab = recommender.vocabulary
        token_ids = np.array(
            [[vocab.code_token(l, int(c)) for l, c in enumerate(row)] for row in codes]
        )
        gathered = table[token_ids]  # (N, L, D)
    else:
        if recommender is None or recommender.module is None:
            raise ValueError("collaborative profile needs a recommender with the dual-branch module")
        gathered = _collaborative_rows(recommender, codes).astype(np.float64)

    norms = np.linalg.norm(gathered, axis=-1)  # (N, L)
    return NormProfile(source=source, values=norms.mean(axis=0))


@torch.no_grad()
def _collaborative_rows(recommender, codes: np.ndarray) -> np.ndarray:
    """Pre-fusion collaborative-branch outputs for each item's tokens alone.

    Items are fed one at a time (batched) with only their L tokens; item
    locality makes this equal to the rows the item would receive inside any
    sequence where it is not the final (EOS-carrying) item.
    """
    recommender.eval()
    vocab = recommender.vocabulary
    levels = codes.shape[1]
    token_ids = torch.tensor(
        [[vocab.code_token(l, int(c)) for l, c in enumerate(row)] for row in codes],
        dtype=torch.long,
    )
    e = recommender.token_emb(token_ids)  # (N, L, D)
    side = recommender.module.encoder_side
    rows = torch.arange(1, levels + 1).expand(len(codes), -1)
    members = torch.zeros(len(codes), levels, dtype=torch.long)
    mask = item_local_mask(members, causal=False).to(e.dtype)
    out = side.collaborative_branch(e, rows, mask)
    return out.numpy()


@torch.no_grad()
def attention_heatmaps(
    model,
    samples,
    batcher,
    crop: int = 28,
    anchor: str = "start",
    sample_chunk: int = 64,
) -> HeatmapBundle:
    """Per-layer encoder self-attention, head- then sample-averaged, cropped.

    anchor selects which corner of the (S, S) map the window keeps: "start"
    takes the first crop rows/columns, "end" the last. A crop larger than the
    sequence is clamped (reported via requested_crop).
    """
    if anchor not in ("start", "end"):
        raise ValueError("anchor must be 'start' or 'end'")
    if not samples:
        raise ValueError("need at least one sample")
    model.eval()
    sums: list[np.ndarray] = []
    total = 0
    for start in range(0, len(samples), sample_chunk):
        chunk = samples[start : start + sample_chunk]
        enc = batcher.batch(chunk).enc_tokens
        (_, maps), _ = model.encode_ids(enc, collect_attention=True)
        for idx, probs in enumerate(maps):
            head_avg = probs.mean(dim=1)  # (B, S, S)
            batch_sum = head_avg.sum(dim=0).numpy().astype(np.float64)
            if len(sums) <= idx:
                sums.append(batch_sum)
            else:
                sums[idx] += batch_sum
        total += len(chunk)
    seq_len = sums[0].shape[0]
    eff = min(crop, seq_len)
    layers = []
    for matrix in sums:
        mean = matrix / total
        window = mean[:eff, :eff] if anchor == "start" else mean[-eff:, -eff:]
        layers.append(window)
    return HeatmapBundle(layers=layers, crop=eff, anchor=anchor, requested_crop=crop)


def export_profiles(
    profiles: list[NormProfile],
    heatmaps: HeatmapBundle | None,
    out_dir: str | Path,
    render_figures: bool = True,
) -> list[Path]:
    """Write `level,mean_norm` CSVs and per-layer heatmap matrices.

    CSV bytes are a pure function of the inputs, so re-export is idempotent.
    Figures (PNG) are rendered next to the CSVs when requested.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for profile in profiles:
        path = out / f"norms_{profile.source}.csv"
        lines = ["level,mean_norm"]
        for level, value in enumerate(profile.values, start=1):
            lines.append(f"{level},{float(value)!r}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    if heatmaps is not None:
        for idx, matrix in enumerate(heatmaps.layers, start=1):
            path = out / f"heatmap_layer{idx}.csv"
            rows = [",".join(repr(float(v)) for v in row) for row in matrix]
            path.write_text("\n".join(rows) + "\n", encoding="utf-8")
            written.append(path)
    if render_figures:
        from . import plotting

        if profiles:
            written.append(plotting.norm_profiles_figure(profiles, out / "norms.png"))
        if heatmaps is not None:
            for idx, matrix in enumerate(heatmaps.layers, start=1):
                written.append(plotting.heatmap_figure(matrix, out / f"heatmap_layer{idx}.png", f"layer {idx}"))
    return written
