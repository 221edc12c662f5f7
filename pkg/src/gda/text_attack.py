"""Stage I: token importance, candidate expansion and globally-aware replacement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import resources
from .core import AttackConfig, Caption, ImageTextPair, substitution_distance
from .encoders import EncoderAdapter, cosine_similarity

log = logging.getLogger(__name__)


class NoViableCandidate(ValueError):
    """No token/candidate combination is available for substitution."""


class MlmProvider(Protocol):
    def top_candidates(self, tokens: Sequence[str], position: int, width: int) -> list[tuple[str, float]]:
        """Return at most ``width`` (candidate, score) pairs, best first."""


class StaticMlmProvider:
    """Context-free stand-in for a masked LM: token -> ranked candidate list."""

    def __init__(self, table: dict[str, Sequence[str]]):
        self.table = {k: tuple(v) for k, v in table.items()}

    @classmethod
    def from_file(cls, path) -> "StaticMlmProvider":
        return cls(resources.read_json(path))

    @classmethod
    def default(cls) -> "StaticMlmProvider":
        return cls.from_file(resources.MLM_TABLE_FILE)

    def top_candidates(self, tokens: Sequence[str], position: int, width: int) -> list[tuple[str, float]]:
        ranked = self.table.get(tokens[position], ())[:width]
        return [(tok, 1.0 / (rank + 1)) for rank, tok in enumerate(ranked)]


class SynonymLexicon:
    def __init__(self, mapping: dict[str, Iterable[str]] | None = None):
        self.mapping = {k: frozenset(v) for k, v in (mapping or {}).items()}

    @classmethod
    def from_file(cls, path) -> "SynonymLexicon":
        return cls(resources.read_json(path))

    @classmethod
    def default(cls) -> "SynonymLexicon":
        return cls.from_file(resources.LEXICON_FILE)

    def synonyms(self, token: str) -> frozenset[str]:
        return self.mapping.get(token, frozenset())


@dataclass(frozen=True)
class ExclusionSet:
    """Tokens never offered as replacements (and never chosen as targets)."""

    stopwords: frozenset[str] = frozenset()
    subword_prefix: str = "##"

    @classmethod
    def from_file(cls, path, subword_prefix: str = "##") -> "ExclusionSet":
        words = [w.strip().lower() for w in resources.read_text(path).splitlines()]
        return cls(frozenset(w for w in words if w), subword_prefix)

    @classmethod
    def default(cls) -> "ExclusionSet":
        return cls.from_file(resources.STOPWORDS_FILE)

    def __contains__(self, token: str) -> bool:
        return (
            token in self.stopwords
            or (bool(self.subword_prefix) and token.startswith(self.subword_prefix))
            or not token.isalpha()
        )


@dataclass(frozen=True)
class TextResources:
    mlm: MlmProvider
    lexicon: SynonymLexicon
    exclusion: ExclusionSet

    @classmethod
    def default(cls) -> "TextResources":
        return cls(StaticMlmProvider.default(), SynonymLexicon.default(), ExclusionSet.default())


@dataclass(frozen=True)
class CandidatePool:
    source_token: str
    candidates: tuple[str, ...]


@dataclass(frozen=True)
class SubstitutionRecord:
    position: int
    original: str
    replacement: str
    loss: float

    def __post_init__(self) -> None:
        if self.original == self.replacement:
            raise ValueError("a substitution must change the token")


@dataclass
class CaptionAttack:
    """Outcome of attacking one caption."""

    original: Caption
    caption: Caption
    substitutions: list[SubstitutionRecord] = field(default_factory=list)
    original_loss: float = 0.0
    loss: float = 0.0
    error: str | None = None


# -- scoring -----------------------------------------------------------------

def _similarity_or_zero(adapter: EncoderAdapter, tokens: Sequence[str], image_embedding: np.ndarray) -> float:
    # deleting the only token leaves nothing to encode; treat as no alignment
    if not tokens:
        return 0.0
    return cosine_similarity(adapter.encode_text(tokens), image_embedding)


def caption_loss(adapter: EncoderAdapter, tokens: Sequence[str], image_embedding: np.ndarray) -> float:
    """Adversarial text loss: negative cosine to the image embedding."""
    return -cosine_similarity(adapter.encode_text(tokens), image_embedding)


def importance_scores(
    tokens: Sequence[str], image_embedding: np.ndarray, adapter: EncoderAdapter, mode: str = "mask"
) -> np.ndarray:
    """Per-position importance of each token for image-text alignment.

    ``mask``: similarity drop when the token is deleted.  ``gradient``: the
    adapter's ``text_token_saliency`` (gradient times input).
    """
    if mode == "gradient":
        saliency = getattr(adapter, "text_token_saliency", None)
        if saliency is None:
            raise ValueError(f"adapter {adapter.name} does not provide token saliency")
        return np.asarray(saliency(tokens, image_embedding), dtype=np.float64)
    base = _similarity_or_zero(adapter, tokens, image_embedding)
    scores = np.empty(len(tokens))
    for i in range(len(tokens)):
        masked = list(tokens[:i]) + list(tokens[i + 1:])
        scores[i] = base - _similarity_or_zero(adapter, masked, image_embedding)
    return scores


def rank_positions(
    tokens: Sequence[str],
    image_embedding: np.ndarray,
    adapter: EncoderAdapter,
    exclusion: ExclusionSet | None = None,
    skip: Iterable[int] = (),
    mode: str = "mask",
) -> list[int]:
    """All eligible positions, most important first; ties go to the lower index."""
    exclusion = exclusion if exclusion is not None else ExclusionSet()
    skip = set(skip)
    eligible = [i for i, tok in enumerate(tokens) if tok not in exclusion and i not in skip]
    if not eligible:
        raise NoViableCandidate("every token is excluded from perturbation")
    scores = importance_scores(tokens, image_embedding, adapter, mode)
    return sorted(eligible, key=lambda i: (-scores[i], i))


def score_token_importance(
    pair: ImageTextPair,
    caption_index: int,
    adapter: EncoderAdapter,
    k: int,
    exclusion: ExclusionSet | None = None,
    *,
    mode: str = "mask",
    image_embedding: np.ndarray | None = None,
) -> list[int]:
    if image_embedding is None:
        image_embedding = adapter.encode_image(pair.image)
    tokens = pair.captions[caption_index].tokens
    return rank_positions(tokens, image_embedding, adapter, exclusion, mode=mode)[:k]


# -- candidate expansion -------------------------------------------------------

def build_candidate_pool(
    word: str,
    position: int,
    caption: Caption,
    mlm: MlmProvider,
    lexicon: SynonymLexicon | None,
    exclusion: ExclusionSet,
    W: int,
) -> CandidatePool:
    """MLM candidates (provider order) then lexicon synonyms (sorted), filtered."""
    if caption.tokens[position] != word:
        raise ValueError(f"token at {position} is {caption.tokens[position]!r}, not {word!r}")
    ordered = [tok for tok, _ in mlm.top_candidates(caption.tokens, position, W)]
    if lexicon is not None:
        ordered += sorted(lexicon.synonyms(word))
    seen: set[str] = set()
    pool = []
    for tok in ordered:
        if tok == word or tok in seen or tok in exclusion:
            continue
        seen.add(tok)
        pool.append(tok)
    if not pool:
        raise NoViableCandidate(f"no viable candidate for {word!r} at position {position}")
    return CandidatePool(word, tuple(pool))


def evaluate_substitution_loss(
    pair: ImageTextPair,
    caption_index: int,
    position: int,
    candidate: str,
    adapter: EncoderAdapter,
    *,
    image_embedding: np.ndarray | None = None,
) -> float:
    caption = pair.captions[caption_index]
    if caption.tokens[position] == candidate:
        raise ValueError("candidate equals the original token")
    if image_embedding is None:
        image_embedding = adapter.encode_image(pair.image)
    return caption_loss(adapter, caption.replace(position, candidate).tokens, image_embedding)


def select_global_substitution(
    options: Sequence[tuple[int, CandidatePool]],
    loss: Callable[[int, str], float],
) -> tuple[int, str, float] | None:
    """Arg-max of ``loss(position, candidate)`` over every option.

    Ties keep the lower position, then the earlier pool entry.
    """
    best = None
    for position, pool in sorted(options, key=lambda item: item[0]):
        for cand in pool.candidates:
            value = loss(position, cand)
            if best is None or value > best[2]:
                best = (position, cand, value)
    return best


def _important_pools(
    caption: Caption,
    ranking: Sequence[int],
    k: int,
    mlm: MlmProvider,
    lexicon: SynonymLexicon | None,
    exclusion: ExclusionSet,
    W: int,
) -> list[tuple[int, CandidatePool]]:
    # positions with an empty pool are passed over in favour of the next one
    chosen = []
    for pos in ranking:
        try:
            pool = build_candidate_pool(caption.tokens[pos], pos, caption, mlm, lexicon, exclusion, W)
        except NoViableCandidate:
            continue
        chosen.append((pos, pool))
        if len(chosen) == k:
            break
    return chosen


def globally_aware_replace(
    pair: ImageTextPair,
    caption_index: int,
    adapter: EncoderAdapter,
    mlm: MlmProvider,
    lexicon: SynonymLexicon,
    exclusion: ExclusionSet,
    config: AttackConfig,
    *,
    image_embedding: np.ndarray | None = None,
) -> tuple[Caption, list[SubstitutionRecord]]:
    """Apply the best (token, candidate) substitution, ``eps_text`` times.

    Each round ranks the top-k eligible positions, builds their candidate
    pools and evaluates every substitution; importance is recomputed between
    rounds and a position is changed at most once.
    """
    if not config.enable_gar:
        raise ValueError("globally_aware_replace requires enable_gar")
    if image_embedding is None:
        image_embedding = adapter.encode_image(pair.image)
    lex = lexicon if config.enable_cte else None
    caption = pair.captions[caption_index]
    records: list[SubstitutionRecord] = []
    for _ in range(config.budget.eps_text):
        touched = [r.position for r in records]
        try:
            ranking = rank_positions(caption.tokens, image_embedding, adapter, exclusion, touched, config.importance)
        except NoViableCandidate:
            break
        options = _important_pools(caption, ranking, config.k_influential, mlm, lex, exclusion, config.candidate_width)
        current = caption
        best = select_global_substitution(
            options,
            lambda pos, cand: caption_loss(adapter, current.replace(pos, cand).tokens, image_embedding),
        )
        if best is None:
            break
        pos, cand, value = best
        records.append(SubstitutionRecord(pos, caption.tokens[pos], cand, value))
        caption = caption.replace(pos, cand)
    if not records:
        log.debug("pair %s caption %d: no viable substitution", pair.pair_id, caption_index)
    return caption, records


def greedy_top1_replace(
    pair: ImageTextPair,
    caption_index: int,
    adapter: EncoderAdapter,
    mlm: MlmProvider,
    exclusion: ExclusionSet,
    config: AttackConfig,
    *,
    image_embedding: np.ndarray | None = None,
) -> tuple[Caption, list[SubstitutionRecord]]:
    """Replace the most important token with the MLM's first valid candidate."""
    if image_embedding is None:
        image_embedding = adapter.encode_image(pair.image)
    caption = pair.captions[caption_index]
    records: list[SubstitutionRecord] = []
    for _ in range(config.budget.eps_text):
        touched = [r.position for r in records]
        try:
            ranking = rank_positions(caption.tokens, image_embedding, adapter, exclusion, touched, config.importance)
        except NoViableCandidate:
            break
        picked = _important_pools(caption, ranking, 1, mlm, None, exclusion, config.candidate_width)
        if not picked:
            break
        pos, pool = picked[0]
        cand = pool.candidates[0]
        value = caption_loss(adapter, caption.replace(pos, cand).tokens, image_embedding)
        records.append(SubstitutionRecord(pos, caption.tokens[pos], cand, value))
        caption = caption.replace(pos, cand)
    return caption, records


def attack_caption(
    pair: ImageTextPair,
    caption_index: int,
    adapter: EncoderAdapter,
    res: TextResources,
    config: AttackConfig,
    image_embedding: np.ndarray,
) -> CaptionAttack:
    original = pair.captions[caption_index]
    base_loss = caption_loss(adapter, original.tokens, image_embedding)
    outcome = CaptionAttack(original, original, [], base_loss, base_loss)
    try:
        if config.enable_gar:
            caption, records = globally_aware_replace(
                pair, caption_index, adapter, res.mlm, res.lexicon, res.exclusion, config,
                image_embedding=image_embedding,
            )
        else:
            caption, records = greedy_top1_replace(
                pair, caption_index, adapter, res.mlm, res.exclusion, config,
                image_embedding=image_embedding,
            )
    except NoViableCandidate as exc:
        outcome.error = str(exc)
        return outcome
    if not records:
        outcome.error = "no viable substitution"
        return outcome
    loss = caption_loss(adapter, caption.tokens, image_embedding)
    if loss < base_loss:
        # keep the clean caption rather than weaken alignment disruption
        outcome.error = "substitution would lower the loss; kept original"
        return outcome
    assert substitution_distance(original.tokens, caption.tokens) <= config.budget.eps_text
    outcome.caption, outcome.substitutions, outcome.loss = caption, records, loss
    return outcome


def attack_text_stage(
    pair: ImageTextPair,
    adapter: EncoderAdapter,
    res: TextResources,
    config: AttackConfig,
    *,
    image_embedding: np.ndarray | None = None,
) -> list[CaptionAttack]:
    """Perturb each of the pair's captions independently against F_I(v)."""
    if image_embedding is None:
        image_embedding = adapter.encode_image(pair.image)
    return [
        attack_caption(pair, i, adapter, res, config, image_embedding)
        for i in range(len(pair.captions))
    ]
