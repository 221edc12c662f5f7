"""Stage II: augmentation sets (multi-scale + BSR) and l-inf PGD against the adversarial captions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import AttackConfig, Caption, Image, check_pixel_range
from .encoders import EncoderAdapter, ImageObjective, alignment_objective
from .pixelmap import PixelMap, block_shuffle_rotate_map, crop_map, reflect_pad_map, resize_map


@dataclass(frozen=True)
class AugmentationSpec:
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    bsr_grid: int = 2
    bsr_angle_max: float = 24.0
    bsr_copies: int = 20
    interpolation: str = "nearest"
    rotation_mode: str = "continuous"

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if self.bsr_copies < 0:
            raise ValueError("bsr_copies must be >= 0")
        if self.bsr_grid < 1:
            raise ValueError("bsr_grid must be >= 1")

    @classmethod
    def from_config(cls, config: AttackConfig) -> "AugmentationSpec":
        return cls(
            scales=config.scales,
            bsr_grid=config.bsr_grid,
            bsr_angle_max=config.bsr_angle_max,
            bsr_copies=config.bsr_copies,
            interpolation=config.interpolation,
            rotation_mode=config.rotation_mode,
        )


@dataclass
class PerturbationState:
    current: Image
    step_index: int
    loss_history: list[float] = field(default_factory=list)


# -- multi-scale ---------------------------------------------------------------

def scaled_size(hw: tuple[int, int], scale: float) -> tuple[int, int]:
    size = (int(round(scale * hw[0])), int(round(scale * hw[1])))
    if min(size) < 1:
        raise ValueError(f"scale {scale} shrinks {hw} below one pixel")
    return size


def multi_scale_maps(hw: tuple[int, int], scales: Sequence[float], interpolation: str = "nearest") -> list[PixelMap]:
    if not scales:
        raise ValueError("need at least one scale")
    return [resize_map(hw, scaled_size(hw, s), interpolation) for s in scales]


def multi_scale_set(image: Image, scales: Sequence[float], interpolation: str = "nearest") -> list[Image]:
    out = []
    for m in multi_scale_maps(image.shape[1:], scales, interpolation):
        out.append(image if m.name == "identity" else Image(np.clip(m.apply(image.pixels), 0.0, 1.0), image.id))
    return out


# -- block shuffle and rotation -----------------------------------------------

def _right_angles(angle_max: float, square: bool) -> list[float]:
    allowed = [0.0]
    if square and angle_max >= 90:
        allowed += [90.0, -90.0]
    if angle_max >= 180:
        allowed.append(180.0)
    return allowed


def bsr_map(
    hw: tuple[int, int],
    grid: int,
    angle_max: float,
    rotation_mode: str,
    rng: np.random.Generator,
    interpolation: str = "nearest",
) -> PixelMap:
    """Draw one block shuffle + rotation and return it as a pixel map.

    Sizes not divisible by ``grid`` are reflect-padded up to the next
    multiple, transformed, then centre-cropped back.
    """
    h, w = hw
    if grid > min(h, w):
        raise ValueError(f"grid {grid} exceeds image size {hw}")
    ph, pw = -(-h // grid) * grid, -(-w // grid) * grid
    pad_h = ((ph - h) // 2, ph - h - (ph - h) // 2)
    pad_w = ((pw - w) // 2, pw - w - (pw - w) // 2)
    n_blocks = grid * grid
    perm = rng.permutation(n_blocks)
    if rotation_mode == "continuous":
        angles = rng.uniform(-angle_max, angle_max, n_blocks) if angle_max > 0 else np.zeros(n_blocks)
    elif rotation_mode == "right_angle":
        choices = _right_angles(angle_max, ph // grid == pw // grid)
        angles = np.asarray(choices)[rng.integers(0, len(choices), n_blocks)]
    else:
        raise ValueError(f"unknown rotation mode {rotation_mode!r}")
    core = block_shuffle_rotate_map((ph, pw), grid, perm, angles, rotation_mode, interpolation)
    if (ph, pw) == (h, w):
        return core
    return reflect_pad_map(hw, pad_h, pad_w).then(core).then(crop_map((ph, pw), pad_h[0], pad_w[0], hw))


def bsr_transform(
    image: Image,
    grid: int,
    angle_max: float,
    rotation_mode: str,
    rng: np.random.Generator,
    interpolation: str = "nearest",
) -> Image:
    m = bsr_map(image.shape[1:], grid, angle_max, rotation_mode, rng, interpolation)
    return Image(np.clip(m.apply(image.pixels), 0.0, 1.0), image.id)


# -- augmented set ------------------------------------------------------------

def augmentation_maps(hw: tuple[int, int], spec: AugmentationSpec, rng: np.random.Generator) -> list[PixelMap]:
    maps = multi_scale_maps(hw, spec.scales, spec.interpolation)
    for _ in range(spec.bsr_copies):
        maps.append(bsr_map(hw, spec.bsr_grid, spec.bsr_angle_max, spec.rotation_mode, rng, spec.interpolation))
    return maps


def build_augmented_set(image: Image, spec: AugmentationSpec, rng: np.random.Generator) -> list[Image]:
    return [Image(np.clip(m.apply(image.pixels), 0.0, 1.0), image.id) for m in augmentation_maps(image.shape[1:], spec, rng)]


# -- PGD ----------------------------------------------------------------------

def project_linf(candidate: Image | np.ndarray, origin: Image, eps: float) -> Image:
    """Clamp into the l-inf ball around ``origin`` intersected with [0, 1]."""
    pixels = candidate.pixels if isinstance(candidate, Image) else np.asarray(candidate, dtype=np.float64)
    if pixels.shape != origin.shape:
        raise ValueError(f"shape mismatch: {pixels.shape} vs {origin.shape}")
    lo = np.maximum(origin.pixels - eps, 0.0)
    hi = np.minimum(origin.pixels + eps, 1.0)
    return Image(np.clip(pixels, lo, hi), origin.id)


def caption_embeddings(adapter: EncoderAdapter, captions: Sequence[Caption]) -> np.ndarray:
    return np.array([adapter.encode_text(c.tokens) for c in captions])


def pgd_iterates(
    image: Image,
    adversarial_captions: Sequence[Caption],
    adapter: EncoderAdapter,
    config: AttackConfig,
    rng: np.random.Generator,
) -> Iterator[PerturbationState]:
    """Yield the state after every sign-gradient ascent step (step 0 = clean image).

    The augmented set is redrawn from the current iterate at each step and the
    gradient flows back through every augmentation map.
    """
    if not adversarial_captions:
        raise ValueError("the image stage needs at least one adversarial caption")
    spec = AugmentationSpec.from_config(config)
    eps, alpha = config.budget.eps_image, config.step_size
    targets = caption_embeddings(adapter, adversarial_captions)
    hw = image.shape[1:]
    current = image
    state = PerturbationState(current, 0, [])
    for step in range(config.pgd_steps):
        objective = ImageObjective(targets, tuple(augmentation_maps(hw, spec, rng)))
        state.loss_history.append(alignment_objective(adapter, current, objective))
        yield state
        grad = adapter.image_gradient(current, objective)
        current = project_linf(current.pixels + alpha * np.sign(grad), image, eps)
        state = PerturbationState(current, step + 1, list(state.loss_history))
    objective = ImageObjective(targets, tuple(augmentation_maps(hw, spec, rng)))
    state.loss_history.append(alignment_objective(adapter, current, objective))
    yield state


def attack_image_stage(
    image: Image,
    adversarial_captions: Sequence[Caption],
    adapter: EncoderAdapter,
    config: AttackConfig,
    rng: np.random.Generator,
) -> tuple[Image, list[float]]:
    """Run T PGD steps; returns the final image and the objective at each iterate.

    The history has T + 1 entries, one per iterate including the clean start.
    """
    state = None
    for state in pgd_iterates(image, adversarial_captions, adapter, config, rng):
        pass
    assert state is not None
    final = state.current
    check_pixel_range(final.pixels, "adversarial image")
    if np.max(np.abs(final.pixels - image.pixels)) > config.budget.eps_image + 1e-9:
        raise AssertionError("PGD left the l-inf ball")
    return final, state.loss_history
