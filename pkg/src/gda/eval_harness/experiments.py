"""Experiment drivers: example generation, transfer matrices, ablations, k-sweeps
and feature-space diagnostics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..core import AttackConfig
from ..encoders import EncoderAdapter, get_adapter
from ..pipeline import AdversarialExample, run_attack
from ..text_attack import TextResources
from .retrieval import Gallery, attack_success_rate, evaluate_retrieval

log = logging.getLogger(__name__)

ASR_CONVENTION = "ASR = #(correct before and wrong after) / #(correct before) x 100, per direction, R@1"


def _resolve(adapter: EncoderAdapter | str) -> EncoderAdapter:
    return get_adapter(adapter) if isinstance(adapter, str) else adapter


def generate_examples(
    gallery: Gallery,
    adapter: EncoderAdapter | str,
    config: AttackConfig,
    res: TextResources | None = None,
    workers: int = 1,
) -> list[AdversarialExample]:
    """Attack every pair of the gallery on one surrogate.

    Each pair has its own seed stream, so the result does not depend on
    ``workers``.
    """
    adapter = _resolve(adapter)
    res = res or TextResources.default()
    if workers <= 1 or adapter.exclusive_use:
        return [run_attack(p, adapter, res, config) for p in gallery.pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: run_attack(p, adapter, res, config), gallery.pairs))


def evaluate_examples(
    gallery: Gallery,
    target: EncoderAdapter | str,
    examples: Sequence[AdversarialExample],
    gallery_side: str = "clean",
) -> tuple[float | None, float | None]:
    """(TR ASR, IR ASR) of a fixed set of adversarial examples on ``target``."""
    target = _resolve(target)
    before = evaluate_retrieval(gallery, target)
    after = evaluate_retrieval(
        gallery,
        target,
        override_images={e.pair_id: e.adversarial_image for e in examples},
        override_captions={e.pair_id: e.adversarial_captions for e in examples},
        gallery_side=gallery_side,
    )
    return attack_success_rate(before, after)


# -- transfer -------------------------------------------------------------------

@dataclass
class TransferCell:
    source: str
    target: str
    attack: str
    tr_asr: float | None
    ir_asr: float | None
    white_box: bool
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "attack": self.attack,
            "tr_r1_asr": self.tr_asr,
            "ir_r1_asr": self.ir_asr,
            "white_box": self.white_box,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferCell":
        return cls(d["source"], d["target"], d["attack"], d["tr_r1_asr"], d["ir_r1_asr"], d["white_box"], d.get("error"))


@dataclass
class TransferMatrix:
    """Surrogate rows x target columns of (TR ASR, IR ASR) cells."""

    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], TransferCell]
    config_fingerprint: str
    seed: int
    gallery_side: str = "clean"
    example_hashes: dict[str, list[str]] = field(default_factory=dict)

    def cell(self, source: str, target: str) -> TransferCell:
        return self.cells[(source, target)]

    def merge(self, other: "TransferMatrix") -> "TransferMatrix":
        if other.config_fingerprint != self.config_fingerprint:
            raise ValueError("cannot merge matrices built with different configs")
        rows = self.rows + [r for r in other.rows if r not in self.rows]
        cols = self.cols + [c for c in other.cols if c not in self.cols]
        return TransferMatrix(
            rows, cols, {**self.cells, **other.cells}, self.config_fingerprint, self.seed,
            self.gallery_side, {**self.example_hashes, **other.example_hashes},
        )

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "cells": [self.cells[k].to_dict() for k in sorted(self.cells)],
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "gallery_side": self.gallery_side,
            "example_hashes": {k: list(v) for k, v in sorted(self.example_hashes.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        cells = {}
        for c in d["cells"]:
            cell = TransferCell.from_dict(c)
            cells[(cell.source, cell.target)] = cell
        return cls(
            list(d["rows"]), list(d["cols"]), cells, d["config_fingerprint"], d["seed"],
            d.get("gallery_side", "clean"), {k: list(v) for k, v in d.get("example_hashes", {}).items()},
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransferMatrix):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def run_transfer(
    surrogate: str,
    targets: Sequence[str],
    gallery: Gallery,
    config: AttackConfig,
    *,
    res: TextResources | None = None,
    attack: str = "two-stage",
    examples: Sequence[AdversarialExample] | None = None,
    gallery_side: str = "clean",
    workers: int = 1,
) -> tuple[TransferMatrix, list[AdversarialExample]]:
    """One matrix row: craft on ``surrogate`` once, score on every target.

    The white-box cell (surrogate evaluated on itself) is always present.
    A failing target leaves an N/A cell instead of aborting the row.
    """
    if examples is None:
        examples = generate_examples(gallery, surrogate, config, res, workers)
    examples = list(examples)
    hashes = [e.content_hash() for e in examples]
    cols = [surrogate] + [t for t in targets if t != surrogate]
    cells = {}
    for target in cols:
        try:
            tr, ir = evaluate_examples(gallery, target, examples, gallery_side)
            cells[(surrogate, target)] = TransferCell(surrogate, target, attack, tr, ir, target == surrogate)
        except Exception as exc:
            log.warning("target %s failed: %s", target, exc)
            cells[(surrogate, target)] = TransferCell(surrogate, target, attack, None, None, target == surrogate, str(exc))
        # evaluation must consume the artifacts unchanged
        if [e.content_hash() for e in examples] != hashes:
            raise RuntimeError("adversarial examples changed during evaluation")
    matrix = TransferMatrix(
        [surrogate], cols, cells, config.fingerprint(), config.seed, gallery_side, {surrogate: hashes}
    )
    return matrix, examples


# -- ablations and sweeps ---------------------------------------------------------

ABLATIONS = {
    "2s": ("w/o 2S", {"stage_mode": "three_stage_legacy"}),
    "cte": ("w/o CTE", {"enable_cte": False}),
    "gar": ("w/o GAR", {"enable_gar": False}),
}


def ablation_configs(config: AttackConfig, modes: Iterable[str]) -> list[tuple[str, AttackConfig]]:
    """The full method first, then one config per removed module."""
    out = [("completed", config)]
    for mode in modes:
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {mode!r}; choose from {sorted(ABLATIONS)}")
        label, changes = ABLATIONS[mode]
        out.append((label, config.replace(**changes)))
    return out


def run_ablation(
    gallery: Gallery,
    surrogate: str,
    targets: Sequence[str],
    config: AttackConfig,
    modes: Iterable[str] = ("2s", "cte", "gar"),
    *,
    res: TextResources | None = None,
    gallery_side: str = "clean",
) -> list[dict]:
    rows = []
    for label, cfg in ablation_configs(config, modes):
        matrix, _ = run_transfer(surrogate, targets, gallery, cfg, res=res, attack=label, gallery_side=gallery_side)
        for target in matrix.cols:
            cell = matrix.cell(surrogate, target)
            rows.append({**cell.to_dict(), "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed})
    return rows


def sweep_k(
    gallery: Gallery,
    adapter: str,
    targets: Sequence[str],
    config: AttackConfig,
    k_values: Sequence[int],
    *,
    res: TextResources | None = None,
    gallery_side: str = "clean",
) -> tuple[list[dict], dict[str, dict[str, list]]]:
    """Full attack and transfer evaluation per k.

    Returns CSV-ready rows and a plot-ready series keyed by target:
    ``{target: {"k": [...], "tr_r1_asr": [...], "ir_r1_asr": [...]}}``.
    """
    if not k_values:
        raise ValueError("k_values must be non-empty")
    rows: list[dict] = []
    series: dict[str, dict[str, list]] = {}
    for k in k_values:
        cfg = config.replace(k_influential=int(k))
        matrix, _ = run_transfer(adapter, targets, gallery, cfg, res=res, attack=f"k={k}", gallery_side=gallery_side)
        for target in matrix.cols:
            cell = matrix.cell(adapter, target)
            rows.append({"k": int(k), **cell.to_dict(), "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed})
            s = series.setdefault(target, {"k": [], "tr_r1_asr": [], "ir_r1_asr": []})
            s["k"].append(int(k))
            s["tr_r1_asr"].append(cell.tr_asr)
            s["ir_r1_asr"].append(cell.ir_asr)
    return rows, series


# -- diagnostics ------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    pair_ids: list[str]
    euclidean_distances: list[float]
    cosine_similarities: list[float]
    text_distances: list[float]
    bins: int = 50
    skipped: list[str] = field(default_factory=list)

    @staticmethod
    def _hist(values: Sequence[float], bins: int) -> dict:
        if not values:
            return {"edges": [], "counts": []}
        counts, edges = np.histogram(np.asarray(values), bins=bins)
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    def summary(self) -> dict:
        def mean(v):
            return float(np.mean(v)) if v else None

        return {
            "mean_euclidean": mean(self.euclidean_distances),
            "mean_cosine": mean(self.cosine_similarities),
            "mean_text_euclidean": mean(self.text_distances),
            "n": len(self.pair_ids),
            "skipped": list(self.skipped),
            "euclidean_histogram": self._hist(self.euclidean_distances, self.bins),
            "cosine_histogram": self._hist(self.cosine_similarities, self.bins),
        }

    def to_dict(self) -> dict:
        return {
            "pair_ids": list(self.pair_ids),
            "euclidean_distances": list(self.euclidean_distances),
            "cosine_similarities": list(self.cosine_similarities),
            "text_distances": list(self.text_distances),
            "bins": self.bins,
            "summary": self.summary(),
        }


def feature_space_diagnostics(
    gallery: Gallery,
    examples: Sequence[AdversarialExample],
    adapter: EncoderAdapter | str,
    bins: int = 50,
) -> DiagnosticsReport:
    """Per pair: ||F_I(v) - F_I(v')||, cos(F_I(v), F_I(v')), and the mean caption-feature distance.

    Examples whose pair is not in the gallery are skipped and reported.
    """
    adapter = _resolve(adapter)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    by_id = {p.pair_id: p for p in gallery.pairs}
    ids, dists, coss, tdists, skipped = [], [], [], [], []
    for ex in examples:
        pair = by_id.get(ex.pair_id)
        if pair is None or len(ex.adversarial_captions) != len(pair.captions):
            log.warning("diagnostics: pair %s not in gallery, skipped", ex.pair_id)
            skipped.append(ex.pair_id)
            continue
        a = adapter.encode_image(pair.image)
        b = adapter.encode_image(ex.adversarial_image)
        ids.append(ex.pair_id)
        dists.append(float(np.linalg.norm(a - b)))
        coss.append(float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0)))
        t = [
            np.linalg.norm(adapter.encode_text(c.tokens) - adapter.encode_text(ac.tokens))
            for c, ac in zip(pair.captions, ex.adversarial_captions)
        ]
        tdists.append(float(np.mean(t)))
    return DiagnosticsReport(ids, dists, coss, tdists, bins, skipped)
