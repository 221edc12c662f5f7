"""JSON Lines manifest ingestion: one ``{id, image, captions}`` object per line."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..core import Caption, CaptionRejected, Image, ImageTextPair
from .retrieval import Gallery

log = logging.getLogger(__name__)


class ManifestError(RuntimeError):
    """Fatal manifest problem (unreadable file, duplicate id)."""


def _load_image(path: Path, image_id: str) -> Image:
    if path.suffix.lower() == ".npy":
        arr = np.load(path, allow_pickle=False).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.max(initial=0.0) > 1.0:
            arr = arr / 255.0
        return Image(arr, image_id)
    from ..pipeline import read_png

    return read_png(path, image_id)


def _parse_line(line: str, base: Path) -> ImageTextPair:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in ("id", "image", "captions") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    pair_id = str(obj["id"])
    caps = obj["captions"]
    if not isinstance(caps, list) or not caps:
        raise ValueError("captions must be a non-empty list")
    captions = tuple(Caption.from_text(str(c)) for c in caps)
    image = _load_image(base / str(obj["image"]), pair_id)
    return ImageTextPair(image, captions, pair_id)


def load_manifest(path) -> Gallery:
    """Read a manifest; malformed lines are skipped and listed in ``gallery.skipped``.

    Image paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    pairs: list[ImageTextPair] = []
    skipped: list[dict] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            pair = _parse_line(line, path.parent)
        except (ValueError, OSError, CaptionRejected) as exc:
            log.warning("manifest line %d skipped: %s", lineno, exc)
            skipped.append({"line": lineno, "error": str(exc)})
            continue
        if pair.pair_id in seen:
            raise ManifestError(f"duplicate pair id {pair.pair_id!r} on line {lineno}")
        seen.add(pair.pair_id)
        pairs.append(pair)
    return Gallery(pairs, skipped)
