"""Synthetic image-caption galleries for the toy encoders.

Each scene is a (subject, adjective, action, place) tuple.  Its image is the
weighted sum of the words' visual prototypes plus an image-specific nuisance
pattern, upsampled to full resolution.  Captions describe subsets of the
scene through a handful of templates, so some of them are ambiguous, much
like crowd-sourced captions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Caption, Image, ImageTextPair
from .encoders import concept_pattern
from .resources import toy_world

ROLE_WEIGHTS = {"subject": 1.0, "action": 0.8, "place": 0.9, "adjective": 0.6}


def _sample_scenes(n: int, rng: np.random.Generator) -> list[dict[str, str]]:
    cats = toy_world()["categories"]
    seen, scenes = set(), []
    while len(scenes) < n:
        scene = {role: words[rng.integers(len(words))] for role, words in cats.items()}
        key = tuple(sorted(scene.items()))
        if key not in seen:
            seen.add(key)
            scenes.append(scene)
    return scenes


def render_scene(
    scene: dict[str, str],
    rng: np.random.Generator,
    size: int = 32,
    channels: int = 3,
    amplitude: float = 2.0,
    nuisance: float = 0.35,
    pixel_noise: float = 0.02,
) -> np.ndarray:
    if size % 8:
        raise ValueError("fixture image size must be a multiple of 8")
    pattern = sum(ROLE_WEIGHTS[role] * concept_pattern(word, channels) for role, word in scene.items())
    pattern = pattern / np.linalg.norm(pattern)
    clutter = rng.standard_normal((channels, 8, 8))
    pattern = pattern + nuisance * clutter / np.linalg.norm(clutter)
    up = np.kron(pattern, np.ones((1, size // 8, size // 8)))
    pixels = 0.5 + amplitude * up + pixel_noise * rng.standard_normal(up.shape)
    # quantized so a PNG round trip is exact
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def make_desk_fixture(
    n_pairs: int = 64, captions_per_pair: int = 5, size: int = 32, seed: int = 0
) -> list[ImageTextPair]:
    rng = np.random.default_rng(seed)
    templates = toy_world()["caption_templates"]
    pairs = []
    for idx, scene in enumerate(_sample_scenes(n_pairs, rng)):
        pair_id = f"p{idx:03d}"
        pixels = render_scene(scene, rng, size)
        order = rng.permutation(len(templates))
        texts = [templates[order[j % len(templates)]].format(**scene) for j in range(captions_per_pair)]
        captions = tuple(Caption.from_text(t) for t in texts)
        pairs.append(ImageTextPair(Image(pixels, pair_id), captions, pair_id))
    return pairs


def write_manifest(pairs: list[ImageTextPair], out_dir: Path, name: str = "manifest.jsonl") -> Path:
    """Write PNG images plus a JSON Lines manifest ``{id, image, captions}``."""
    from .pipeline import safe_name, write_png

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in pairs:
        rel = f"images/{safe_name(pair.pair_id)}.png"
        write_png(pair.image, out_dir / rel)
        lines.append(json.dumps({"id": pair.pair_id, "image": rel, "captions": [c.raw for c in pair.captions]}))
    path = out_dir / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
