"""Stage orchestration (text then image), ablation modes and example persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import AttackConfig, Caption, Image, ImageTextPair, child_seed
from .encoders import EncoderAdapter
from .image_attack import attack_image_stage
from .text_attack import CaptionAttack, SubstitutionRecord, TextResources, attack_text_stage

log = logging.getLogger(__name__)


@dataclass
class AdversarialExample:
    pair_id: str
    adversarial_image: Image
    adversarial_captions: list[Caption]
    substitutions: list[list[SubstitutionRecord]]
    loss_history: list[float]
    config_fingerprint: str
    rng_seed: int
    stage_mode: str = "two_stage"
    image_seed: int = 0
    intermediate_captions: list[Caption] | None = None
    caption_errors: list[str | None] = field(default_factory=list)
    degraded: bool = False
    errors: list[str] = field(default_factory=list)

    def content_hash(self) -> str:
        """Hash of the adversarial payload (pixels and caption tokens)."""
        h = hashlib.sha256()
        h.update(self.pair_id.encode("utf-8"))
        h.update(str(self.adversarial_image.shape).encode())
        h.update(np.ascontiguousarray(self.adversarial_image.pixels).tobytes())
        for cap in self.adversarial_captions:
            h.update(b"\x00" + " ".join(cap.tokens).encode("utf-8"))
        return h.hexdigest()

    def to_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "stage_mode": self.stage_mode,
            "config_fingerprint": self.config_fingerprint,
            "rng_seed": self.rng_seed,
            "image_seed": self.image_seed,
            "adversarial_captions": [" ".join(c.tokens) for c in self.adversarial_captions],
            "intermediate_captions": (
                None if self.intermediate_captions is None
                else [" ".join(c.tokens) for c in self.intermediate_captions]
            ),
            "substitutions": [
                [
                    {"position": r.position, "original": r.original, "replacement": r.replacement, "loss": r.loss}
                    for r in recs
                ]
                for recs in self.substitutions
            ],
            "caption_errors": list(self.caption_errors),
            "loss_history": list(self.loss_history),
            "degraded": self.degraded,
            "errors": list(self.errors),
            "content_hash": self.content_hash(),
        }


def _safe_seed_key(pair: ImageTextPair) -> str:
    return f"pair:{pair.pair_id}"


def _text_stage(pair, adapter, res, config, errors) -> list[CaptionAttack] | None:
    try:
        return attack_text_stage(pair, adapter, res, config)
    except Exception as exc:  # adapter failure: keep going with clean captions
        log.warning("text stage failed for %s: %s", pair.pair_id, exc)
        errors.append(f"text stage: {exc}")
        return None


def _image_stage(pair, captions, adapter, config, seed, errors):
    rng = np.random.default_rng(seed)
    try:
        return attack_image_stage(pair.image, captions, adapter, config, rng)
    except Exception as exc:
        log.warning("image stage failed for %s: %s", pair.pair_id, exc)
        errors.append(f"image stage: {exc}")
        return pair.image, []


def attack_pair(
    pair: ImageTextPair, adapter: EncoderAdapter, res: TextResources, config: AttackConfig
) -> AdversarialExample:
    """Stage I (captions vs the clean image) followed by Stage II (image vs those captions)."""
    if config.stage_mode != "two_stage":
        raise ValueError("attack_pair runs the two-stage pipeline; use run_attack to dispatch")
    errors: list[str] = []
    image_seed = child_seed(config.seed, _safe_seed_key(pair))
    text = _text_stage(pair, adapter, res, config, errors)
    captions = [t.caption for t in text] if text else list(pair.captions)
    adv_image, history = _image_stage(pair, captions, adapter, config, image_seed, errors)
    return AdversarialExample(
        pair_id=pair.pair_id,
        adversarial_image=adv_image,
        adversarial_captions=captions,
        substitutions=[t.substitutions for t in text] if text else [[] for _ in captions],
        loss_history=history,
        config_fingerprint=config.fingerprint(),
        rng_seed=config.seed,
        stage_mode="two_stage",
        image_seed=image_seed,
        caption_errors=[t.error for t in text] if text else [None] * len(captions),
        degraded=bool(errors),
        errors=errors,
    )


def attack_pair_legacy_three_stage(
    pair: ImageTextPair, adapter: EncoderAdapter, res: TextResources, config: AttackConfig
) -> AdversarialExample:
    """Text -> image -> text; the last text round is guided by F_I(v').

    The final round starts from the first-round captions and has its own
    budget, ``config.s3_eps_text`` (defaults to ``eps_text``).
    """
    if config.stage_mode != "three_stage_legacy":
        raise ValueError("legacy pipeline requires stage_mode='three_stage_legacy'")
    errors: list[str] = []
    image_seed = child_seed(config.seed, _safe_seed_key(pair))
    first = _text_stage(pair, adapter, res, config, errors)
    mid_captions = [t.caption for t in first] if first else list(pair.captions)
    adv_image, history = _image_stage(pair, mid_captions, adapter, config, image_seed, errors)
    guided = ImageTextPair(adv_image, tuple(mid_captions), pair.pair_id)
    s3_budget = config.budget.eps_text if config.s3_eps_text is None else config.s3_eps_text
    last = _text_stage(guided, adapter, res, config.replace(eps_text=s3_budget), errors)
    final_captions = [t.caption for t in last] if last else mid_captions
    subs = []
    for i in range(len(final_captions)):
        recs = list(first[i].substitutions) if first else []
        recs += list(last[i].substitutions) if last else []
        subs.append(recs)
    return AdversarialExample(
        pair_id=pair.pair_id,
        adversarial_image=adv_image,
        adversarial_captions=final_captions,
        substitutions=subs,
        loss_history=history,
        config_fingerprint=config.fingerprint(),
        rng_seed=config.seed,
        stage_mode="three_stage_legacy",
        image_seed=image_seed,
        intermediate_captions=mid_captions,
        caption_errors=[t.error for t in last] if last else [None] * len(final_captions),
        degraded=bool(errors),
        errors=errors,
    )


def run_attack(
    pair: ImageTextPair, adapter: EncoderAdapter, res: TextResources, config: AttackConfig
) -> AdversarialExample:
    if config.stage_mode == "three_stage_legacy":
        return attack_pair_legacy_three_stage(pair, adapter, res, config)
    return attack_pair(pair, adapter, res, config)


# -- persistence ----------------------------------------------------------------

def safe_name(pair_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", pair_id)


def save_example(example: AdversarialExample, clean: Image, out_dir: Path) -> dict[str, Path]:
    """Write the JSON record, an 8-bit PNG, and the exact float32 delta plus header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = safe_name(example.pair_id)
    paths = {
        "record": out_dir / f"{stem}.json",
        "image": out_dir / f"{stem}.png",
        "delta": out_dir / f"{stem}.delta.bin",
        "header": out_dir / f"{stem}.delta.json",
    }
    paths["record"].write_text(json.dumps(example.to_record(), indent=1, sort_keys=True), encoding="utf-8")
    write_png(example.adversarial_image, paths["image"])
    delta = (example.adversarial_image.pixels - clean.pixels).astype("<f4")
    paths["delta"].write_bytes(delta.tobytes(order="C"))
    header = {
        "pair_id": example.pair_id,
        "shape": list(delta.shape),
        "dtype": "<f4",
        "config_fingerprint": example.config_fingerprint,
        "rng_seed": example.rng_seed,
    }
    paths["header"].write_text(json.dumps(header, indent=1, sort_keys=True), encoding="utf-8")
    return paths


def load_delta(header_path: Path) -> tuple[dict, np.ndarray]:
    header = json.loads(Path(header_path).read_text(encoding="utf-8"))
    bin_path = Path(header_path).with_name(Path(header_path).name.replace(".delta.json", ".delta.bin"))
    raw = np.frombuffer(bin_path.read_bytes(), dtype=np.dtype(header["dtype"]))
    return header, raw.reshape(header["shape"]).astype(np.float64)


def load_example(record_path: Path, clean: Image) -> AdversarialExample:
    """Rebuild an example from disk; pixels are clean + float32 delta."""
    record_path = Path(record_path)
    rec = json.loads(record_path.read_text(encoding="utf-8"))
    _, delta = load_delta(record_path.with_name(record_path.stem + ".delta.json"))
    image = Image(np.clip(clean.pixels + delta, 0.0, 1.0), clean.id)
    inter = rec.get("intermediate_captions")
    return AdversarialExample(
        pair_id=rec["pair_id"],
        adversarial_image=image,
        adversarial_captions=[Caption(tuple(c.split())) for c in rec["adversarial_captions"]],
        substitutions=[
            [SubstitutionRecord(s["position"], s["original"], s["replacement"], s["loss"]) for s in recs]
            for recs in rec["substitutions"]
        ],
        loss_history=list(rec["loss_history"]),
        config_fingerprint=rec["config_fingerprint"],
        rng_seed=rec["rng_seed"],
        stage_mode=rec["stage_mode"],
        image_seed=rec["image_seed"],
        intermediate_captions=None if inter is None else [Caption(tuple(c.split())) for c in inter],
        caption_errors=list(rec["caption_errors"]),
        degraded=rec["degraded"],
        errors=list(rec["errors"]),
    )


def write_png(image: Image, path: Path) -> None:
    arr = np.rint(image.pixels * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        PILImage.fromarray(arr[0], mode="L").save(path)
    else:
        PILImage.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def read_png(path: Path, image_id: str = "") -> Image:
    with PILImage.open(path) as img:
        mode = img.mode
        arr = np.asarray(img.convert("L" if mode in ("L", "1", "I;16") else "RGB"), dtype=np.float64)
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    return Image(arr / 255.0, image_id)
