"""Domain types, tokenization and budget semantics shared by the attack stages."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import string
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class CaptionRejected(ValueError):
    """Raised when a caption has no tokens left after tokenization."""


class BudgetError(ValueError):
    pass


_PUNCT = string.punctuation + "“”‘’«»…–—"


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split and strip surrounding punctuation.

    >>> tokenize("A boy plays soccer.")
    ['a', 'boy', 'plays', 'soccer']
    """
    tokens = []
    for piece in text.lower().split():
        piece = piece.strip(_PUNCT)
        if piece:
            tokens.append(piece)
    if not tokens:
        raise CaptionRejected(f"empty caption after tokenization: {text!r}")
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    if len(tokens) == 0:
        raise ValueError("cannot detokenize an empty token sequence")
    return " ".join(tokens)


def substitution_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Hamming distance between two equal-length token sequences."""
    if len(a) != len(b):
        raise ValueError(
            f"length mismatch ({len(a)} vs {len(b)}): only substitutions are allowed"
        )
    return sum(1 for x, y in zip(a, b) if x != y)


@dataclass(frozen=True, eq=False)
class Image:
    """A channels x height x width pixel array with values in [0, 1].

    The array is copied to float64 and marked read-only, so an ``Image`` can be
    shared freely; transforms always build a new value.
    """

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self) -> None:
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected a CxHxW array, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("image has no pixels")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite pixels")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixels must lie in [0, 1], got range [{lo}, {hi}]")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(pixels, self.id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.pixels, other.pixels)

    def __hash__(self) -> int:
        return hash((self.id, self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class Caption:
    tokens: tuple[str, ...]
    raw: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.raw:
            object.__setattr__(self, "raw", " ".join(self.tokens))

    @classmethod
    def from_text(cls, text: str) -> "Caption":
        return cls(tuple(tokenize(text)), text)

    def text(self) -> str:
        return detokenize(self.tokens)

    def replace(self, position: int, token: str) -> "Caption":
        tokens = list(self.tokens)
        tokens[position] = token
        return Caption(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ImageTextPair:
    image: Image
    captions: tuple[Caption, ...]
    pair_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "captions", tuple(self.captions))
        if not self.captions:
            raise ValueError(f"pair {self.pair_id!r} has no captions")
        for cap in self.captions:
            if len(cap.tokens) == 0:
                raise CaptionRejected(f"pair {self.pair_id!r} has an empty caption")


@dataclass(frozen=True)
class Budget:
    eps_image: float = 8 / 255
    eps_text: int = 1

    def __post_init__(self) -> None:
        if not self.eps_image > 0:
            raise BudgetError(f"eps_image must be positive, got {self.eps_image}")
        if int(self.eps_text) != self.eps_text or self.eps_text < 0:
            raise BudgetError(f"eps_text must be a non-negative integer, got {self.eps_text}")


STAGE_MODES = ("two_stage", "three_stage_legacy")
ROTATION_MODES = ("continuous", "right_angle")
INTERPOLATIONS = ("nearest", "bilinear")
IMPORTANCE_MODES = ("mask", "gradient")


@dataclass(frozen=True)
class AttackConfig:
    budget: Budget = field(default_factory=Budget)
    pgd_steps: int = 10
    step_size: float = 2 / 255
    k_influential: int = 3
    candidate_width: int = 10
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    bsr_grid: int = 2
    bsr_angle_max: float = 24.0
    bsr_copies: int = 20
    seed: int = 0
    enable_cte: bool = True
    enable_gar: bool = True
    stage_mode: str = "two_stage"
    rotation_mode: str = "continuous"
    interpolation: str = "nearest"
    importance: str = "mask"
    # legacy pipeline only: budget of the final text round (None = eps_text)
    s3_eps_text: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        # T = 0 is allowed: the image stage becomes a no-op
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.k_influential < 1:
            raise ValueError("k_influential must be >= 1")
        if self.candidate_width < 1:
            raise ValueError("candidate_width must be >= 1")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if self.bsr_grid < 1:
            raise ValueError("bsr_grid must be >= 1")
        if self.bsr_copies < 0:
            raise ValueError("bsr_copies must be >= 0")
        if self.bsr_angle_max < 0:
            raise ValueError("bsr_angle_max must be >= 0")
        if self.s3_eps_text is not None and (int(self.s3_eps_text) != self.s3_eps_text or self.s3_eps_text < 0):
            raise ValueError("s3_eps_text must be a non-negative integer or None")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        for name, allowed in (
            ("stage_mode", STAGE_MODES),
            ("rotation_mode", ROTATION_MODES),
            ("interpolation", INTERPOLATIONS),
            ("importance", IMPORTANCE_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "AttackConfig":
        if "eps_image" in changes or "eps_text" in changes:
            budget = Budget(
                changes.pop("eps_image", self.budget.eps_image),
                changes.pop("eps_text", self.budget.eps_text),
            )
            changes["budget"] = budget
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["budget"] = Budget(**d["budget"])
        d["scales"] = tuple(d["scales"])
        return cls(**d)

    def fingerprint(self) -> str:
        """Stable hash of the canonical JSON form of this config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_number(text: str) -> float:
    """Parse ``"8/255"``, ``"0.5"`` or ``"3"`` into a float."""
    return float(Fraction(text.strip()))


def child_seed(master_seed: int, key: str) -> int:
    """Derive a per-item 64-bit seed from a master seed and a string key."""
    digest = hashlib.sha256(f"{master_seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master_seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, key))


def check_pixel_range(pixels: np.ndarray, what: str = "image") -> None:
    lo, hi = float(np.min(pixels)), float(np.max(pixels))
    if lo < 0.0 or hi > 1.0:
        raise AssertionError(f"{what} pixels out of [0, 1]: [{lo}, {hi}]")
