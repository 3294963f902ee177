"""Test doubles, small corpora and manifest builders shared across test modules."""
import json
from pathlib import Path
from typing import Dict, List, Sequence

import torch

from src.models import PromptSplit, PromptSuite, TaskName
from src.tokenizer import Tokenizer
from src.toy_vlm import EmbeddingSequence, LossAndGrads

SMALL_PROMPTS: Dict[TaskName, List[str]] = {
    TaskName.VQA_GENERAL: [
        "what is in the image",
        "what can you see here",
        "describe the picture",
        "is there a cat",
    ],
    TaskName.VQA_SPECIFIC: [
        "what color is this",
        "which color dominates",
        "name the color",
        "what color is shown",
    ],
    TaskName.CLASSIFICATION: [
        "what is the category",
        "classify the image",
        "what object is this",
        "label the image",
    ],
    TaskName.CAPTIONING: [
        "a photo of",
        "caption this image",
        "describe it briefly",
        "write a caption",
    ],
}
SMALL_TARGETS = ["unknown", "i am sorry", "not sure"]

TINY_SPEC = {
    "image_size": 8,
    "patch_size": 4,
    "embed_dim": 16,
    "heads": 2,
    "encoder_layers": 1,
    "decoder_layers": 1,
    "max_gen_len": 4,
    "dtype": "float64",
}


def small_corpus() -> List[str]:
    return [prompt for prompts in SMALL_PROMPTS.values() for prompt in prompts]


def write_prompt_files(root: Path, prompts: Dict[TaskName, List[str]] = None) -> Dict[TaskName, Path]:
    prompts = prompts or SMALL_PROMPTS
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for task, lines in prompts.items():
        path = root / f"{task.value}.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[task] = path
    return paths


def hand_suite(tasks: Dict[TaskName, Sequence[str]]) -> PromptSuite:
    """Every prompt held out; no training prompts."""
    return PromptSuite(
        tasks={task: list(prompts) for task, prompts in tasks.items()},
        splits={
            task: PromptSplit(train=[], holdout=list(range(len(prompts))))
            for task, prompts in tasks.items()
        }
    )


class ConstantOutputModel:
    """Evaluation double: greedy generation always returns the same text."""

    def __init__(self, tokenizer: Tokenizer, output: str, model_id: str = "constant"):
        self.tokenizer = tokenizer
        self.output = output
        self.model_id = model_id
        self.seed = 0
        self.calls = 0

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64

    def generate(self, image, prompt_ids, shots=(), max_len=None) -> str:
        self.calls += 1
        return self.output


class ScriptedModel(ConstantOutputModel):
    """Evaluation double whose output depends on the prompt only."""

    def __init__(self, tokenizer: Tokenizer, outputs: Dict[str, str], default: str = "cat"):
        super().__init__(tokenizer, default, model_id="scripted")
        self.outputs = {tuple(tokenizer.tokenize(p)): text for p, text in outputs.items()}

    def generate(self, image, prompt_ids, shots=(), max_len=None) -> str:
        self.calls += 1
        return self.outputs.get(tuple(prompt_ids), self.output)


def write_manifest(root: Path, **grid_overrides) -> Path:
    """A tiny, fast experiment manifest backed by the small prompt files."""
    paths = write_prompt_files(root / "prompts")
    grid = {
        "methods": ["multi_p"],
        "seeds": [0],
        "num_prompts": 2,
        "iterations": 3,
        "update_interval": 1,
        "target_text": "unknown",
    }
    grid.update(grid_overrides)
    manifest = {
        "experiment_id": "tiny",
        "model": {"spec": TINY_SPEC, "seed": 0, "pretrain_steps": 0},
        "images": "synthetic:0:1",
        "suite": {
            "paths": {task.value: str(path) for task, path in paths.items()},
            "split_seed": 0,
            "holdout_fraction": 0.5,
        },
        "grid": grid,
        "sweep": {"prompt_count": [1, 2], "iterations": [2, 4]},
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


class ImageCoupledModel:
    """Gradient double: the real model, except the prompt gradient is read off the image.

    The prompt gradient is the first L*D pixels of the evaluated image minus 0.5,
    so its sign depends on where in image space it is taken.
    """

    def __init__(self, model):
        self.model = model

    def __getattr__(self, name):
        return getattr(self.model, name)

    @staticmethod
    def prompt_grad(image: torch.Tensor, prompt: EmbeddingSequence) -> torch.Tensor:
        shape = prompt.vectors.shape
        return (image.flatten()[:shape.numel()] - 0.5).reshape(shape).to(prompt.vectors.dtype)

    def loss_and_grads(self, image, prompt, target_ids, shots=(), wrt=("image", "prompt")) -> LossAndGrads:
        result = self.model.loss_and_grads(image, prompt, target_ids, shots, wrt=wrt)
        prompt_grad = self.prompt_grad(image, prompt) if "prompt" in wrt else None
        return LossAndGrads(result.loss, result.image_grad, prompt_grad)
