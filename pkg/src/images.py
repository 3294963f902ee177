"""Image inputs: PNG files and procedurally colored synthetic images."""
import glob
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
from PIL import Image

from src.exceptions import ConfigurationError, StoreError

logger = logging.getLogger(__name__)

# Caption words of the synthetic pretraining task
PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.20),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
}
COLOR_WORDS: Tuple[str, ...] = tuple(sorted(PALETTE))

# Response textures of the pretraining task live in one of four image quadrants
QUADRANTS = 4
CUE_STREAM = 13


@dataclass(frozen=True)
class LoadedImage:
    """An input image (H x W x C in [0, 1]) with a stable name."""
    name: str
    pixels: torch.Tensor


def _shaded(color: str, rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.asarray(PALETTE[color], dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    shade = 0.15 * ((xx * math.cos(angle) + yy * math.sin(angle)) - 0.5)
    noise = rng.normal(0.0, 0.03, size=(size, size, 3))
    return base + shade[..., None] + noise


def color_field(
    color: str,
    rng: np.random.Generator,
    size: int = 32,
    dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """A `color` field with a random linear shading and pixel noise."""
    pixels = np.clip(_shaded(color, rng, size), 0.0, 1.0)
    return torch.from_numpy(pixels).to(dtype)


def cue_texture(index: int, size: int = 32) -> np.ndarray:
    """Fixed +-1 texture (H x W x 3) of response `index`."""
    rng = np.random.default_rng(np.random.SeedSequence([CUE_STREAM, index]))
    return rng.choice([-1.0, 1.0], size=(size, size, 3))


def quadrant_mask(quadrant: int, size: int = 32) -> np.ndarray:
    """H x W mask of quadrant 0-3, numbered row-major from the top left."""
    if not 0 <= quadrant < QUADRANTS:
        raise ConfigurationError(f"Quadrant must be in [0, {QUADRANTS}), got {quadrant}")
    half = size // 2
    row, col = divmod(quadrant, 2)
    mask = np.zeros((size, size), dtype=bool)
    mask[row * half:(row + 1) * half, col * half:(col + 1) * half] = True
    return mask


def cued_field(
    color: str,
    cues: Dict[int, Tuple[int, float]],
    rng: np.random.Generator,
    size: int = 32,
    dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """
    A color field carrying faint response textures.

    Args:
        cues: quadrant -> (response index, amplitude)
    """
    pixels = _shaded(color, rng, size)
    for quadrant, (index, amplitude) in sorted(cues.items()):
        mask = quadrant_mask(quadrant, size)[..., None]
        pixels = pixels + amplitude * cue_texture(index, size) * mask
    return torch.from_numpy(np.clip(pixels, 0.0, 1.0)).to(dtype)


def synthetic_images(
    seed: int,
    count: int,
    size: int = 32,
    dtype: torch.dtype = torch.float32
) -> List[LoadedImage]:
    """Deterministic synthetic corpus; colors cycle from a seeded start."""
    rng = np.random.default_rng(seed)
    start = int(rng.integers(len(COLOR_WORDS)))
    images = []
    for i in range(count):
        color = COLOR_WORDS[(start + i) % len(COLOR_WORDS)]
        images.append(LoadedImage(
            name=f"synthetic-{seed}-{i}-{color}",
            pixels=color_field(color, rng, size=size, dtype=dtype)
        ))
    return images


def caption_shots(
    seed: int,
    count: int,
    size: int = 32,
    dtype: torch.dtype = torch.float32
) -> List[Tuple[torch.Tensor, str]]:
    """In-context examples: synthetic images paired with their color word."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    shots = []
    for _ in range(count):
        color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
        shots.append((color_field(color, rng, size=size, dtype=dtype), color))
    return shots


def load_png(path: Path, size: int = 32, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Load an 8-bit RGB image and map it to [0, 1] by /255.

    Raises:
        StoreError: If the file cannot be read
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.Resampling.BILINEAR)
            pixels = np.asarray(img, dtype=np.uint8)
    except OSError as e:
        raise StoreError(f"Failed to read image {path}: {e}") from e
    return torch.from_numpy(pixels.astype(np.float64) / 255.0).to(dtype)


def save_png(pixels: torch.Tensor, path: Path) -> None:
    """Quantize an image to 8 bits and write it."""
    array = (pixels.detach().cpu().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def load_images(source: str, size: int = 32, dtype: torch.dtype = torch.float32) -> List[LoadedImage]:
    """
    Resolve an image source: `synthetic:<seed>:<count>` or a PNG file glob.

    Raises:
        ConfigurationError: If the source is malformed or matches nothing
    """
    if source.startswith("synthetic:"):
        parts = source.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"Expected synthetic:<seed>:<count>, got {source!r}")
        try:
            seed, count = int(parts[1]), int(parts[2])
        except ValueError as e:
            raise ConfigurationError(f"Bad synthetic image source {source!r}") from e
        if count < 1:
            raise ConfigurationError("Synthetic image count must be positive")
        return synthetic_images(seed, count, size=size, dtype=dtype)

    paths = sorted(glob.glob(source))
    if not paths:
        raise ConfigurationError(f"No images match {source!r}")
    logger.info(f"Loading {len(paths)} images from {source}")
    return [LoadedImage(name=Path(p).name, pixels=load_png(Path(p), size, dtype)) for p in paths]


def image_digest(pixels: torch.Tensor) -> str:
    """Content hash of an image tensor (dtype and shape included)."""
    array = pixels.detach().cpu().contiguous().numpy()
    h = hashlib.sha256()
    h.update(f"{array.dtype}:{array.shape}".encode())
    h.update(array.tobytes())
    return h.hexdigest()
