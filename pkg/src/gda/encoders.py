"""Dual-encoder adapters, similarity math and the seeded toy reference model."""

from __future__ import annotations

import abc
import hashlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Image
from .pixelmap import PixelMap, adaptive_pool_map


class DegenerateEmbedding(ValueError):
    pass


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbedding("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise DegenerateEmbedding("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class ImageObjective:
    """What the image stage maximizes.

    ``-sum_j sum_i <c_j/|c_j|, F_I(A_i v)/|F_I(A_i v)|>`` over caption
    embeddings ``c_j`` and augmentation maps ``A_i``.  No transforms means the
    image is used as is.
    """

    caption_embeddings: np.ndarray
    transforms: tuple[PixelMap, ...] = ()

    def __post_init__(self) -> None:
        emb = np.asarray(self.caption_embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[None, :] if emb.size else emb.reshape(0, 0)
        object.__setattr__(self, "caption_embeddings", emb)
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def caption_direction(self) -> np.ndarray | None:
        """Sum of normalized caption embeddings, or None for an empty set."""
        if self.caption_embeddings.shape[0] == 0:
            return None
        return l2_normalize(self.caption_embeddings).sum(axis=0)

    def maps_for(self, hw: tuple[int, int]) -> tuple[PixelMap, ...]:
        return self.transforms or (PixelMap.identity(hw),)


class EncoderAdapter(abc.ABC):
    """Contract every surrogate/target model satisfies.

    Implementations must be deterministic.  Set ``exclusive_use = True`` if an
    instance cannot serve concurrent read-only calls.
    """

    name: str = "adapter"
    embedding_dim: int = 0
    exclusive_use: bool = False

    @abc.abstractmethod
    def encode_image(self, image: Image) -> np.ndarray: ...

    @abc.abstractmethod
    def encode_text(self, tokens: Sequence[str]) -> np.ndarray: ...

    @abc.abstractmethod
    def image_gradient(self, image: Image, objective: ImageObjective) -> np.ndarray:
        """Gradient of the image objective with respect to the raw pixels."""


def alignment_objective(adapter: EncoderAdapter, image: Image | np.ndarray, objective: ImageObjective) -> float:
    """Evaluate the image objective through ``encode_image`` only."""
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    direction = objective.caption_direction()
    if direction is None:
        return 0.0
    total = 0.0
    for m in objective.maps_for(pixels.shape[1:]):
        # clip absorbs rounding from interpolating maps (weights sum to 1 up to ulp)
        emb = adapter.encode_image(Image(np.clip(m.apply(pixels), 0.0, 1.0)))
        total -= float(direction @ (emb / np.linalg.norm(emb)))
    return total


def finite_difference_gradient(
    adapter: EncoderAdapter, image: Image, objective: ImageObjective, h: float = 1e-4
) -> np.ndarray:
    """Central-difference estimate of the objective gradient, pixel by pixel.

    Only meant for small test images; pixels within ``h`` of 0 or 1 would step
    outside the valid range.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(image.pixels)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (alignment_objective(adapter, plus, objective) - alignment_objective(adapter, minus, objective)) / (2 * h)
    return grad


# shared "world" for all toy models: every token has a fixed visual prototype
WORLD_SEED = 20240925
N_BUCKETS = 4096


def _key_seed(*parts: object) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def concept_pattern(key: str, channels: int = 3, size: int = 8) -> np.ndarray:
    """Zero-mean visual prototype of a token, shape ``(channels, size, size)``.

    Prototypes depend only on the key, never on a model seed, so toy models
    with different seeds agree on what a word looks like.
    """
    rng = np.random.default_rng(_key_seed(WORLD_SEED, "concept", key))
    pat = rng.standard_normal((channels, size, size))
    return pat / np.linalg.norm(pat)


def token_key(token: str, vocab: frozenset[str]) -> str:
    if token in vocab:
        return token
    bucket = _key_seed("bucket", token) % N_BUCKETS
    return f"#bucket{bucket}"


class ToyDualEncoder(EncoderAdapter):
    """Desk-scale linear dual encoder.

    Image side: adaptive average pool to ``pool x pool`` per channel, centre
    at 0.5, project with a seeded dense map, L2-normalize.  Text side: each
    token vector is the projection of the token's world prototype plus seeded
    model-specific noise; the caption embedding is the L2-normalized mean.
    Out-of-vocabulary tokens share one of 4096 hash buckets.
    """

    def __init__(
        self,
        seed: int = 1,
        dim: int = 64,
        *,
        channels: int = 3,
        pool: int = 8,
        vocab: Sequence[str] | None = None,
        text_noise: float = 0.35,
    ):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.seed = int(seed)
        self.embedding_dim = int(dim)
        self.channels = channels
        self.pool = pool
        self.text_noise = float(text_noise)
        if vocab is None:
            from .resources import default_vocabulary

            vocab = default_vocabulary()
        self.vocab = frozenset(vocab)
        self.name = f"toy:seed={self.seed}:d={self.embedding_dim}"
        in_dim = channels * pool * pool
        rng = np.random.default_rng(_key_seed("toy-projection", self.seed, dim, channels, pool))
        self.projection = rng.standard_normal((dim, in_dim)) / np.sqrt(in_dim)
        self.projection.flags.writeable = False
        self._token_cache: dict[str, np.ndarray] = {}
        self._pool_cache: dict[tuple[int, int], PixelMap] = {}
        self._lock = threading.Lock()

    # -- text -------------------------------------------------------------
    def token_vector(self, token: str) -> np.ndarray:
        key = token_key(token, self.vocab)
        vec = self._token_cache.get(key)
        if vec is None:
            proto = concept_pattern(key, self.channels, self.pool).ravel()
            base = self.projection @ proto
            noise = np.random.default_rng(_key_seed("toy-token-noise", self.seed, key)).standard_normal(self.embedding_dim)
            vec = base + self.text_noise * np.linalg.norm(base) * noise / np.linalg.norm(noise)
            vec.flags.writeable = False
            with self._lock:
                self._token_cache[key] = vec
        return vec

    def encode_text(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise DegenerateEmbedding("cannot encode an empty token sequence")
        mean = np.mean([self.token_vector(t) for t in tokens], axis=0)
        return l2_normalize(mean)

    def text_token_saliency(self, tokens: Sequence[str], image_embedding: np.ndarray) -> np.ndarray:
        """Gradient-times-input saliency of each token for cos(text, image)."""
        vecs = np.array([self.token_vector(t) for t in tokens])
        mean = vecs.mean(axis=0)
        norm = np.linalg.norm(mean)
        u = mean / norm
        v = image_embedding / np.linalg.norm(image_embedding)
        grad = (v - u * (u @ v)) / (norm * len(tokens))
        return vecs @ grad

    # -- image ------------------------------------------------------------
    def _pool_map(self, hw: tuple[int, int]) -> PixelMap:
        m = self._pool_cache.get(hw)
        if m is None:
            m = adaptive_pool_map(hw, (self.pool, self.pool))
            with self._lock:
                self._pool_cache[hw] = m
        return m

    def _features(self, pixels: np.ndarray) -> np.ndarray:
        if pixels.shape[0] != self.channels:
            raise ValueError(f"toy encoder expects {self.channels} channels, got {pixels.shape[0]}")
        pooled = self._pool_map(pixels.shape[1:]).apply(pixels)
        return (pooled - 0.5).ravel()

    def image_preactivation(self, pixels: np.ndarray) -> np.ndarray:
        return self.projection @ self._features(pixels)

    def encode_image(self, image: Image) -> np.ndarray:
        return l2_normalize(self.image_preactivation(image.pixels))

    def image_gradient(self, image: Image, objective: ImageObjective) -> np.ndarray:
        pixels = image.pixels
        grad = np.zeros_like(pixels)
        direction = objective.caption_direction()
        if direction is None:
            return grad
        for m in objective.maps_for(pixels.shape[1:]):
            warped = m.apply(pixels)
            z = self.image_preactivation(warped)
            norm = np.linalg.norm(z)
            if norm == 0:
                raise DegenerateEmbedding("image embedding vanished")
            zhat = z / norm
            g_z = -(direction - zhat * (zhat @ direction)) / norm
            g_feat = (self.projection.T @ g_z).reshape(self.channels, self.pool, self.pool)
            g_warped = self._pool_map(warped.shape[1:]).vjp(g_feat)
            grad += m.vjp(g_warped)
        return grad


def make_toy_adapter(seed: int = 1, d: int = 64, **kwargs) -> ToyDualEncoder:
    return ToyDualEncoder(seed=seed, dim=d, **kwargs)


_REGISTRY: dict[str, Callable[..., EncoderAdapter]] = {}


def register_adapter(kind: str, factory: Callable[..., EncoderAdapter]) -> None:
    """Register a factory for names of the form ``kind:key=value:...``."""
    _REGISTRY[kind] = factory


def _parse_option(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def get_adapter(name: str) -> EncoderAdapter:
    kind, *opts = name.split(":")
    if kind not in _REGISTRY:
        raise KeyError(f"no adapter registered under {kind!r} (known: {sorted(_REGISTRY)})")
    kwargs = {}
    for opt in opts:
        key, sep, value = opt.partition("=")
        if not sep:
            raise ValueError(f"malformed adapter option {opt!r} in {name!r}")
        kwargs[key] = _parse_option(value)
    return _REGISTRY[kind](**kwargs)


register_adapter("toy", make_toy_adapter)
