"""
Visual and prompt perturbations: L-infinity projection and signed gradient steps.

The visual perturbation lives in pixel units and is kept inside the epsilon-ball
and the valid pixel range. Prompt perturbations live in embedding-table space,
one matrix per prompt, created on the prompt's first visit and never projected.
"""
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from src.exceptions import ConfigurationError, StateError, StoreError
from src.models import PromptInit
from src.toy_vlm import EmbeddingSequence

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class VisualPerturbation:
    """delta (H x W x C) with its L-infinity budget."""
    delta: torch.Tensor
    epsilon: float


@dataclass
class PromptPerturbation:
    """Per-prompt embedding perturbations, keyed by prompt index."""
    entries: Dict[int, torch.Tensor] = field(default_factory=dict)

    def __contains__(self, index: int) -> bool:
        return index in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, index: int) -> Optional[torch.Tensor]:
        return self.entries.get(index)

    def ensure(
        self,
        index: int,
        like: torch.Tensor,
        init: PromptInit = PromptInit.ZERO,
        sigma: float = 0.0,
        seed: int = 0
    ) -> torch.Tensor:
        """Entry for `index`, created on first visit."""
        if index not in self.entries:
            self.entries[index] = init_prompt(like, init, sigma, seed, index)
        return self.entries[index]

    def clone(self) -> "PromptPerturbation":
        return PromptPerturbation({i: t.clone() for i, t in self.entries.items()})


def init_visual(image: torch.Tensor, epsilon: float, seed: int) -> VisualPerturbation:
    """
    Uniform noise in [-epsilon, epsilon], projected so image + delta stays a valid image.

    Raises:
        ConfigurationError: If epsilon is outside (0, 1]
    """
    if not 0 < epsilon <= 1:
        raise ConfigurationError(f"epsilon must be in (0, 1], got {epsilon}")
    generator = torch.Generator().manual_seed(seed)
    noise = torch.empty(image.shape, dtype=torch.float64).uniform_(-epsilon, epsilon, generator=generator)
    return VisualPerturbation(project(noise.to(image.dtype), image, epsilon), epsilon)


def init_prompt(like: torch.Tensor, init: PromptInit, sigma: float, seed: int, index: int) -> torch.Tensor:
    """Zero, or Gaussian(sigma) from a stream derived from (seed, prompt index)."""
    if init == PromptInit.ZERO:
        return torch.zeros_like(like)
    stream_seed = int(np.random.SeedSequence([seed, 3, index]).generate_state(1)[0])
    generator = torch.Generator().manual_seed(stream_seed)
    noise = torch.randn(like.shape, dtype=torch.float64, generator=generator)
    return (noise * sigma).to(like.dtype)


def project(delta: torch.Tensor, image: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp into the epsilon-ball, then into the valid pixel range around `image`."""
    delta = torch.clamp(delta, -epsilon, epsilon)
    return torch.clamp(image + delta, 0.0, 1.0) - image


def descend_visual(delta: torch.Tensor, grad: torch.Tensor, alpha1: float) -> torch.Tensor:
    """delta - alpha1 * sign(grad); sign(0) = 0; the caller projects."""
    return delta - alpha1 * torch.sign(grad)


def ascend_prompt(entry: torch.Tensor, grad: torch.Tensor, alpha2: float) -> torch.Tensor:
    """entry + alpha2 * sign(grad); never clipped."""
    return entry + alpha2 * torch.sign(grad)


def apply(image: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return torch.clamp(image + delta, 0.0, 1.0)


def apply_prompt(embedding: EmbeddingSequence, entry: Optional[torch.Tensor]) -> EmbeddingSequence:
    if entry is None:
        return embedding
    return EmbeddingSequence(vectors=embedding.vectors + entry, token_ids=embedding.token_ids)


def budget_tolerance(dtype: torch.dtype) -> float:
    return 4 * torch.finfo(dtype).eps


def check_budget(delta: torch.Tensor, image: torch.Tensor, epsilon: float, step: int) -> None:
    """
    Assert the epsilon-ball and pixel-range invariants.

    Raises:
        StateError: If either invariant is violated
    """
    tol = budget_tolerance(delta.dtype)
    worst = float(delta.abs().max())
    if worst > epsilon + tol:
        raise StateError(f"Step {step}: |delta|_inf = {worst} exceeds epsilon = {epsilon}")
    adversarial = image + delta
    if float(adversarial.min()) < -tol or float(adversarial.max()) > 1 + tol:
        raise StateError(f"Step {step}: adversarial image left the [0, 1] pixel range")


@dataclass(frozen=True)
class PerturbationSnapshot:
    """Read-only export of the perturbation state at one iteration."""
    visual: VisualPerturbation
    prompt: PromptPerturbation
    seed: int
    iteration: int


def save_snapshot(snapshot: PerturbationSnapshot, path: Path) -> None:
    payload = {
        "format_version": SNAPSHOT_VERSION,
        "epsilon": snapshot.visual.epsilon,
        "seed": snapshot.seed,
        "iteration": snapshot.iteration,
        "delta": snapshot.visual.delta.clone(),
        "prompt_deltas": {int(i): t.clone() for i, t in snapshot.prompt.entries.items()},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise StoreError(f"Failed to write perturbation snapshot {path}: {e}") from e


def load_snapshot(path: Path) -> PerturbationSnapshot:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise StoreError(f"Failed to read perturbation snapshot {path}: {e}") from e
    if payload.get("format_version") != SNAPSHOT_VERSION:
        raise StoreError(f"Unsupported snapshot version in {path}")
    return PerturbationSnapshot(
        visual=VisualPerturbation(payload["delta"], payload["epsilon"]),
        prompt=PromptPerturbation(dict(payload["prompt_deltas"])),
        seed=payload["seed"],
        iteration=payload["iteration"]
    )
