"""Paths to the files shipped with the package and small loaders for them."""

from __future__ import annotations

import functools
import json
from importlib import resources
from pathlib import Path

DATA = resources.files("gda") / "data"

STOPWORDS_FILE = DATA / "stopwords.txt"
LEXICON_FILE = DATA / "toy_lexicon.json"
MLM_TABLE_FILE = DATA / "toy_mlm_table.json"
WORLD_FILE = DATA / "toy_world.json"
RESULTS_SCHEMA_FILE = DATA / "results.schema.json"


def read_text(path) -> str:
    return Path(str(path)).read_text(encoding="utf-8")


def read_json(path):
    return json.loads(read_text(path))


@functools.lru_cache(maxsize=None)
def toy_world() -> dict:
    return read_json(WORLD_FILE)


@functools.lru_cache(maxsize=None)
def default_vocabulary() -> tuple[str, ...]:
    """Every alphabetic word the toy world, lexicon, MLM table and stopword list mention."""
    words = set(read_text(STOPWORDS_FILE).split())
    for group in toy_world()["categories"].values():
        words.update(group)
    for key, values in read_json(LEXICON_FILE).items():
        words.add(key)
        words.update(values)
    for key, values in read_json(MLM_TABLE_FILE).items():
        words.add(key)
        words.update(values)
    return tuple(sorted(w for w in words if w.isalpha()))
