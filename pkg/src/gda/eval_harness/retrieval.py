"""Gallery embeddings, R@1 retrieval and attack success rate.

Direction naming used throughout:

* TR (text retrieval): image query -> caption gallery.
* IR (image retrieval): caption query -> image gallery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..core import Caption, Image, ImageTextPair
from ..encoders import EncoderAdapter, l2_normalize

log = logging.getLogger(__name__)

TR_LABEL = "TR R@1 (image query -> text gallery)"
IR_LABEL = "IR R@1 (text query -> image gallery)"


class UndefinedASR(ValueError):
    """No query was retrieved correctly before the attack."""


@dataclass
class Gallery:
    pairs: list[ImageTextPair]
    skipped: list[dict] = field(default_factory=list)
    _cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        ids = [p.pair_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate pair ids in gallery")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def caption_owner(self) -> np.ndarray:
        """Pair index of every caption in flattened order."""
        return np.array([i for i, p in enumerate(self.pairs) for _ in p.captions], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [p.pair_id for p in self.pairs]

    def index_of(self, pair_id: str) -> int:
        return self.ids.index(pair_id)

    def embeddings(self, adapter: EncoderAdapter) -> tuple[np.ndarray, np.ndarray]:
        """(image embeddings, flattened caption embeddings), cached per adapter name."""
        hit = self._cache.get(adapter.name)
        if hit is None:
            images = np.array([adapter.encode_image(p.image) for p in self.pairs])
            captions = np.array([adapter.encode_text(c.tokens) for p in self.pairs for c in p.captions])
            hit = (images, captions)
            self._cache[adapter.name] = hit
        return hit

    def invalidate(self, adapter_name: str | None = None) -> None:
        if adapter_name is None:
            self._cache.clear()
        else:
            self._cache.pop(adapter_name, None)


@dataclass
class RetrievalReport:
    tr_r1: float
    ir_r1: float
    tr_correct: list[bool]
    ir_correct: list[bool]
    tr_ranks: list[int]
    ir_ranks: list[int]

    def to_dict(self) -> dict:
        return {
            "tr_r1": self.tr_r1,
            "ir_r1": self.ir_r1,
            "tr_label": TR_LABEL,
            "ir_label": IR_LABEL,
            "tr_ranks": self.tr_ranks,
            "ir_ranks": self.ir_ranks,
        }


def rank_of_targets(scores: np.ndarray, targets: Sequence[Sequence[int]]) -> np.ndarray:
    """Best (0-based) rank of any target item for each query row.

    The rank counts gallery items scoring strictly higher, plus equal-scored
    items at a lower index, which matches a stable descending sort.
    """
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    for q, tgt in enumerate(targets):
        order = np.argsort(-scores[q], kind="stable")
        position = np.empty_like(order)
        position[order] = np.arange(order.size)
        ranks[q] = position[list(tgt)].min()
    return ranks


def retrieval_from_scores(
    i2t: np.ndarray, t2i: np.ndarray, caption_owner: np.ndarray
) -> RetrievalReport:
    """R@1 both ways from precomputed score matrices.

    ``i2t``: (images x captions), ``t2i``: (captions x images).
    """
    n_images = i2t.shape[0]
    own = [np.flatnonzero(caption_owner == i) for i in range(n_images)]
    tr_ranks = rank_of_targets(i2t, own)
    ir_ranks = rank_of_targets(t2i, [[int(o)] for o in caption_owner])
    tr_correct = (tr_ranks == 0).tolist()
    ir_correct = (ir_ranks == 0).tolist()
    return RetrievalReport(
        tr_r1=float(np.mean(tr_correct)),
        ir_r1=float(np.mean(ir_correct)),
        tr_correct=tr_correct,
        ir_correct=ir_correct,
        tr_ranks=tr_ranks.tolist(),
        ir_ranks=ir_ranks.tolist(),
    )


def evaluate_retrieval(
    gallery: Gallery,
    adapter: EncoderAdapter,
    override_images: Mapping[str, Image] | None = None,
    override_captions: Mapping[str, Sequence[Caption]] | None = None,
    *,
    gallery_side: str = "clean",
) -> RetrievalReport:
    """Cosine-similarity R@1 with optional adversarial queries.

    Overrides replace the query side only; the gallery side keeps the clean
    embeddings unless ``gallery_side="adversarial"``, in which case both sides
    use the overrides (adversarial captions against adversarial images).
    """
    if not gallery.pairs:
        raise ValueError("empty gallery")
    if gallery_side not in ("clean", "adversarial"):
        raise ValueError(f"unknown gallery_side {gallery_side!r}")
    clean_img, clean_cap = gallery.embeddings(adapter)
    query_img = clean_img.copy()
    query_cap = clean_cap.copy()
    offsets = np.cumsum([0] + [len(p.captions) for p in gallery.pairs])
    for i, pair in enumerate(gallery.pairs):
        if override_images and pair.pair_id in override_images:
            query_img[i] = adapter.encode_image(override_images[pair.pair_id])
        if override_captions and pair.pair_id in override_captions:
            caps = list(override_captions[pair.pair_id])
            if len(caps) != len(pair.captions):
                raise ValueError(f"pair {pair.pair_id}: expected {len(pair.captions)} captions, got {len(caps)}")
            for j, cap in enumerate(caps):
                query_cap[offsets[i] + j] = adapter.encode_text(cap.tokens)
    if query_img.shape[1] != clean_cap.shape[1]:
        raise ValueError("image and text embedding dimensions differ")
    gal_img, gal_cap = (query_img, query_cap) if gallery_side == "adversarial" else (clean_img, clean_cap)
    i2t = l2_normalize(query_img) @ l2_normalize(gal_cap).T
    t2i = l2_normalize(query_cap) @ l2_normalize(gal_img).T
    return retrieval_from_scores(i2t, t2i, gallery.caption_owner)


def asr_percent(before_correct: Sequence[bool], after_correct: Sequence[bool]) -> float:
    """Share of queries correct before and wrong after, over those correct before."""
    if len(before_correct) != len(after_correct):
        raise ValueError("reports cover different query sets")
    before = np.asarray(before_correct, dtype=bool)
    after = np.asarray(after_correct, dtype=bool)
    denom = int(before.sum())
    if denom == 0:
        raise UndefinedASR("ASR undefined: no query was correct before the attack")
    return 100.0 * int((before & ~after).sum()) / denom


def attack_success_rate(before: RetrievalReport, after: RetrievalReport) -> tuple[float | None, float | None]:
    """(TR ASR, IR ASR) in percent; an undefined direction is reported as None."""
    out: list[float | None] = []
    for name, b, a in (("TR", before.tr_correct, after.tr_correct), ("IR", before.ir_correct, after.ir_correct)):
        try:
            out.append(asr_percent(b, a))
        except UndefinedASR:
            log.warning("%s ASR undefined (no correct queries before attack)", name)
            out.append(None)
    return out[0], out[1]
