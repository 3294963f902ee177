"""
Differentiable vision-language model contract and ToyVLM, its small reference implementation.

Every attack consumes a model only through `VisionLanguageModel`; ToyVLM is a
prefix-conditioned transformer: visual tokens (and any in-context shots) are
prepended to the prompt embeddings, and a causal decoder predicts the answer.
"""
import hashlib
import logging
import math
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters
from tqdm import tqdm

from config import settings
from src.exceptions import ConfigurationError, DomainError, StoreError
from src.images import COLOR_WORDS, QUADRANTS, color_field, cued_field
from src.models import TASK_ORDER, TaskName, ToyVLMSpec
from src.prompt_suite import read_prompt_file
from src.tokenizer import DEFAULT_TARGET_TEXTS, SPECIAL_TOKENS, Tokenizer, build_vocab

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
POSITION_SCALE = 0.1
INIT_STD = 0.02

# Pretraining mix: share of plain captions, per-quadrant cue rate, cue amplitude range
PLAIN_FRACTION = 1.0 / 3.0
CUE_PROBABILITY = 0.5
CUE_AMPLITUDE = (0.02, 0.08)

# An in-context example: (image, text)
Shot = Tuple[torch.Tensor, str]


@dataclass(frozen=True)
class EmbeddingSequence:
    """Prompt embedding rows (L x D) and the token ids they came from."""
    vectors: torch.Tensor
    token_ids: Tuple[int, ...]

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1:
            raise DomainError(f"Expected a non-empty L x D matrix, got shape {tuple(self.vectors.shape)}")
        if self.vectors.shape[0] != len(self.token_ids):
            raise DomainError("Embedding rows and token ids differ in length")


@dataclass(frozen=True)
class LossAndGrads:
    """Loss and input gradients evaluated at one point."""
    loss: float
    image_grad: Optional[torch.Tensor]
    prompt_grad: Optional[torch.Tensor]


@runtime_checkable
class VisionLanguageModel(Protocol):
    """What attacks and evaluation need from a model."""
    model_id: str
    seed: int
    tokenizer: Tokenizer

    @property
    def embedding_table(self) -> torch.Tensor: ...

    @property
    def dtype(self) -> torch.dtype: ...

    def embed_prompt(self, ids: Sequence[int]) -> EmbeddingSequence: ...

    def lm_loss(self, image, prompt, target_ids, shots=()) -> torch.Tensor: ...

    def loss_and_grads(self, image, prompt, target_ids, shots=(), wrt=("image", "prompt")) -> LossAndGrads: ...

    def generate(self, image, prompt_ids, shots=(), max_len=None) -> str: ...


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed sinusoidal position codes."""
    position = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    codes = torch.zeros(length, dim, dtype=torch.float64)
    codes[:, 0::2] = torch.sin(position * div)
    codes[:, 1::2] = torch.cos(position * div)
    return codes.to(dtype)


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention block over a single sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        length, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(self.ln1(x)).view(length, 3, self.heads, head_dim).permute(1, 2, 0, 3)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        if causal:
            mask = torch.ones(length, length, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        attended = (scores.softmax(dim=-1) @ v).transpose(0, 1).reshape(length, dim)
        x = x + self.proj(attended)
        return x + self.mlp(self.ln2(x))


class ToyVLM(nn.Module):
    """Deterministic desk-scale vision-language model."""

    def __init__(self, spec: ToyVLMSpec, tokenizer: Tokenizer, seed: int):
        super().__init__()
        self.spec = spec
        self.tokenizer = tokenizer
        self.seed = seed
        self.pretrain_steps = 0
        self.pretrain_trace: List[float] = []
        self.pretrain_eval: Tuple[float, float] = (float("nan"), float("nan"))

        dim = spec.embed_dim
        patch_dim = spec.patch_size * spec.patch_size * spec.channels
        self.patch_proj = nn.Linear(patch_dim, dim)
        self.visual_pos = nn.Parameter(torch.zeros(spec.num_visual_tokens, dim))
        self.encoder = nn.ModuleList(
            [TransformerBlock(dim, spec.heads) for _ in range(spec.encoder_layers)]
        )
        self.encoder_norm = nn.LayerNorm(dim)
        self.token_embedding = nn.Embedding(len(tokenizer), dim)
        self.separator = nn.Parameter(torch.zeros(dim))
        self.decoder = nn.ModuleList(
            [TransformerBlock(dim, spec.heads) for _ in range(spec.decoder_layers)]
        )
        self.final_norm = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, len(tokenizer))

        self._init_weights(seed)
        self.to(getattr(torch, spec.dtype))
        self.model_id = f"toyvlm-s{seed}"

    def _init_weights(self, seed: int) -> None:
        """Gaussian(0, 0.02) weights from a seeded generator; zero biases, unit norms."""
        generator = torch.Generator().manual_seed(seed)
        norm_params = {
            id(p) for m in self.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()
        }
        with torch.no_grad():
            for name, param in self.named_parameters():
                if id(param) in norm_params:
                    param.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                    param.copy_(noise * INIT_STD)

    @property
    def dtype(self) -> torch.dtype:
        return self.lm_head.weight.dtype

    @property
    def embedding_table(self) -> torch.Tensor:
        return self.token_embedding.weight.detach()

    def freeze(self) -> "ToyVLM":
        """Make the model immutable for attack and evaluation use."""
        self.requires_grad_(False)
        self.eval()
        self.model_id = f"toyvlm-{self.parameter_checksum()[:12]}"
        return self

    def flat_parameters(self) -> torch.Tensor:
        return parameters_to_vector([p.detach() for p in self.parameters()])

    def parameter_checksum(self) -> str:
        flat = self.flat_parameters().cpu().contiguous().numpy()
        return hashlib.sha256(flat.tobytes()).hexdigest()

    def _check_ids(self, ids: Sequence[int]) -> List[int]:
        ids = [int(i) for i in ids]
        for i in ids:
            if not 0 <= i < len(self.tokenizer):
                raise DomainError(f"Token id {i} outside vocabulary of size {len(self.tokenizer)}")
        return ids

    def _id_tensor(self, ids: Sequence[int]) -> torch.Tensor:
        return torch.tensor(list(ids), dtype=torch.long)

    def _as_image(self, image: torch.Tensor) -> torch.Tensor:
        expected = (self.spec.image_size, self.spec.image_size, self.spec.channels)
        if tuple(image.shape) != expected:
            raise DomainError(f"Expected image of shape {expected}, got {tuple(image.shape)}")
        return image.to(self.dtype)

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """Patchify an H x W x C image and encode it into visual tokens."""
        image = self._as_image(image)
        p, c = self.spec.patch_size, self.spec.channels
        n = self.spec.image_size // p
        patches = image.reshape(n, p, n, p, c).permute(0, 2, 1, 3, 4).reshape(n * n, p * p * c)
        x = self.patch_proj(patches - 0.5) + self.visual_pos
        for block in self.encoder:
            x = block(x, causal=False)
        return self.encoder_norm(x)

    def embed_prompt(self, ids: Sequence[int]) -> EmbeddingSequence:
        """Table rows of the prompt tokens (positions are added later, inside the decoder)."""
        ids = self._check_ids(ids)
        if not ids:
            raise DomainError("Cannot embed an empty prompt")
        vectors = self.token_embedding.weight.detach()[self._id_tensor(ids)].clone()
        return EmbeddingSequence(vectors=vectors, token_ids=tuple(ids))

    def _prefix(self, image: torch.Tensor, prompt_vectors: torch.Tensor, shots: Sequence[Shot]) -> torch.Tensor:
        parts = []
        for shot_image, shot_text in shots:
            parts.append(self.encode_image(shot_image))
            shot_ids = self.tokenizer.tokenize(shot_text)
            if shot_ids:
                parts.append(self.token_embedding(self._id_tensor(shot_ids)))
            parts.append(self.separator[None, :])
        parts.append(self.encode_image(image))
        parts.append(prompt_vectors.to(self.dtype))
        parts.append(self.token_embedding(self._id_tensor([self.tokenizer.bos_id])))
        return torch.cat(parts, dim=0)

    def _decode(self, prefix: torch.Tensor, continuation: Sequence[int]) -> torch.Tensor:
        x = prefix
        if continuation:
            x = torch.cat([prefix, self.token_embedding(self._id_tensor(continuation))], dim=0)
        x = x + POSITION_SCALE * sinusoidal_positions(x.shape[0], x.shape[1], self.dtype)
        for block in self.decoder:
            x = block(x, causal=True)
        return self.lm_head(self.final_norm(x))

    def _loss(self, image, prompt_vectors, target_ids: List[int], shots: Sequence[Shot]) -> torch.Tensor:
        prefix = self._prefix(image, prompt_vectors, shots)
        logits = self._decode(prefix, target_ids[:-1])
        start = prefix.shape[0] - 1
        rows = logits[start:start + len(target_ids)]
        return F.cross_entropy(rows, self._id_tensor(target_ids), reduction="mean")

    def lm_loss(
        self,
        image: torch.Tensor,
        prompt: EmbeddingSequence,
        target_ids: Sequence[int],
        shots: Sequence[Shot] = ()
    ) -> torch.Tensor:
        """
        Mean token cross-entropy of `target_ids` under teacher forcing.

        Raises:
            DomainError: If the target is empty or contains invalid ids
        """
        target = self._check_ids(target_ids)
        if not target:
            raise DomainError("Target must contain at least one token")
        return self._loss(image, prompt.vectors, target, shots)

    def loss_and_grads(
        self,
        image: torch.Tensor,
        prompt: EmbeddingSequence,
        target_ids: Sequence[int],
        shots: Sequence[Shot] = (),
        wrt: Sequence[str] = ("image", "prompt")
    ) -> LossAndGrads:
        """Loss plus gradients with respect to the image and/or the prompt rows, at one point."""
        target = self._check_ids(target_ids)
        if not target:
            raise DomainError("Target must contain at least one token")
        image_var = self._as_image(image.detach()).clone().requires_grad_(True)
        prompt_var = prompt.vectors.detach().to(self.dtype).clone().requires_grad_(True)
        inputs = [var for name, var in (("image", image_var), ("prompt", prompt_var)) if name in wrt]
        with torch.enable_grad():
            loss = self._loss(image_var, prompt_var, target, shots)
            grads = torch.autograd.grad(loss, inputs) if inputs else ()
        by_name = dict(zip([name for name in ("image", "prompt") if name in wrt], grads))
        return LossAndGrads(
            loss=float(loss.detach()),
            image_grad=by_name.get("image"),
            prompt_grad=by_name.get("prompt")
        )

    def grad_wrt_image(self, image, prompt, target_ids, shots=()) -> torch.Tensor:
        return self.loss_and_grads(image, prompt, target_ids, shots, wrt=("image",)).image_grad

    def grad_wrt_prompt(self, image, prompt, target_ids, shots=()) -> torch.Tensor:
        return self.loss_and_grads(image, prompt, target_ids, shots, wrt=("prompt",)).prompt_grad

    @torch.no_grad()
    def next_token_logprobs(
        self,
        image: torch.Tensor,
        prompt_ids: Sequence[int],
        generated: Sequence[int] = (),
        shots: Sequence[Shot] = ()
    ) -> torch.Tensor:
        """Log-probabilities of the next token after `generated`."""
        prefix = self._prefix(image, self.embed_prompt(prompt_ids).vectors, shots)
        logits = self._decode(prefix, self._check_ids(generated))[-1]
        return F.log_softmax(logits, dim=-1)

    @torch.no_grad()
    def generate_ids(
        self,
        image: torch.Tensor,
        prompt_ids: Sequence[int],
        shots: Sequence[Shot] = (),
        max_len: Optional[int] = None
    ) -> List[int]:
        """Greedy decoding; ties go to the lowest id; stops at eos or max_len."""
        max_len = self.spec.max_gen_len if max_len is None else max_len
        if max_len < 1:
            raise DomainError("max_len must be at least 1")
        prefix = self._prefix(image, self.embed_prompt(prompt_ids).vectors, shots)
        generated: List[int] = []
        for _ in range(max_len):
            logits = self._decode(prefix, generated)[-1]
            next_id = int(torch.argmax(logits))
            if next_id == self.tokenizer.eos_id:
                break
            generated.append(next_id)
        return generated

    def generate(self, image, prompt_ids, shots=(), max_len=None) -> str:
        return self.tokenizer.detokenize(self.generate_ids(image, prompt_ids, shots, max_len))


def default_task_prompts() -> Dict[TaskName, List[str]]:
    """Prompts of the shipped corpora, grouped by task."""
    return {TaskName(task): read_prompt_file(path) for task, path in settings.prompt_paths.items()}


def default_corpus() -> List[str]:
    """Every prompt of the shipped corpora, in task order."""
    return [prompt for prompts in default_task_prompts().values() for prompt in prompts]


def default_tokenizer() -> Tokenizer:
    """Vocabulary over the shipped corpora, the default target texts and the caption words."""
    return build_vocab(default_corpus(), list(DEFAULT_TARGET_TEXTS) + list(COLOR_WORDS))


def read_quadrant(task: TaskName) -> int:
    """Image quadrant whose response texture answers prompts of `task`."""
    return TASK_ORDER.index(TaskName(task)) % QUADRANTS


def _pretrain_batch(
    model: ToyVLM,
    rng: np.random.Generator,
    task_prompt_ids: List[Tuple[TaskName, List[List[int]]]],
    responses: Sequence[str],
    batch_size: int
) -> List[Tuple[torch.Tensor, List[int], List[int], List[Shot]]]:
    """
    Sample (image, prompt ids, answer ids, shots) examples of the pretraining mix.

    Plain color fields are captioned with their color. Cued fields carry faint
    response textures in random quadrants; the prompt's task picks the quadrant
    that is read, and the texture found there names the answer. Textures in the
    other quadrants are ignored, and an empty read quadrant falls back to the color.
    """
    size = model.spec.image_size
    batch = []
    for _ in range(batch_size):
        color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
        task, pool = task_prompt_ids[int(rng.integers(len(task_prompt_ids)))]
        ids = pool[int(rng.integers(len(pool)))]
        cues: Dict[int, Tuple[int, float]] = {}
        if rng.random() >= PLAIN_FRACTION:
            for quadrant in range(QUADRANTS):
                if rng.random() < CUE_PROBABILITY:
                    cues[quadrant] = (int(rng.integers(len(responses))), float(rng.uniform(*CUE_AMPLITUDE)))
        read = cues.get(read_quadrant(task))
        answer = responses[read[0]] if read else color
        image = cued_field(color, cues, rng, size=size, dtype=model.dtype)
        shots = []
        for _ in range(int(rng.choice([0, 0, 1, 2]))):
            shot_color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
            shots.append((color_field(shot_color, rng, size=size, dtype=model.dtype), shot_color))
        batch.append((image, ids, model.tokenizer.target_ids(answer), shots))
    return batch


def _batch_loss(model: ToyVLM, batch) -> torch.Tensor:
    losses = [
        model._loss(image, model.token_embedding(model._id_tensor(ids)), target, shots)
        for image, ids, target, shots in batch
    ]
    return torch.stack(losses).mean()


def pretrain(
    model: ToyVLM,
    steps: int,
    task_prompts: Mapping[TaskName, Sequence[str]],
    batch_size: int,
    learning_rate: float,
    responses: Sequence[str] = DEFAULT_TARGET_TEXTS
) -> List[float]:
    """
    Teacher-forced training on the synthetic caption-and-response task.

    Args:
        task_prompts: Prompts grouped by task; the task decides which quadrant is read
        responses: Texts the response textures stand for

    Returns:
        Per-step training losses

    Raises:
        ConfigurationError: If a caption or response word is missing from the vocabulary
    """
    tokenizer = model.tokenizer
    if not all(tokenizer.covers(word) for word in COLOR_WORDS):
        raise ConfigurationError("Pretraining needs every caption color word in the vocabulary")
    if not responses:
        raise ConfigurationError("Pretraining needs at least one response text")
    missing = [text for text in responses if not tokenizer.covers(text)]
    if missing:
        raise ConfigurationError(f"Response texts outside the vocabulary: {missing}")

    grouped = {TaskName(task): prompts for task, prompts in task_prompts.items()}
    task_prompt_ids = []
    for task in TASK_ORDER:
        pool = [ids for ids in (tokenizer.tokenize(p) for p in grouped.get(task, ())) if ids]
        if pool:
            task_prompt_ids.append((task, pool))
    if not task_prompt_ids:
        raise ConfigurationError("Pretraining needs at least one non-empty prompt")

    rng = np.random.default_rng(np.random.SeedSequence([model.seed, 1]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([model.seed, 2]))
    eval_batch = _pretrain_batch(model, eval_rng, task_prompt_ids, responses, 16)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)

    with torch.no_grad():
        initial = float(_batch_loss(model, eval_batch))

    trace = []
    for step in tqdm(range(steps), desc="pretrain", disable=not settings.show_progress, leave=False):
        optimizer.zero_grad()
        loss = _batch_loss(model, _pretrain_batch(model, rng, task_prompt_ids, responses, batch_size))
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
        if (step + 1) % 500 == 0:
            logger.info(f"Pretrain step {step + 1}/{steps}: loss={trace[-1]:.4f}")

    with torch.no_grad():
        final = float(_batch_loss(model, eval_batch))
    model.pretrain_eval = (initial, final)
    logger.info(f"Pretraining finished: held loss {initial:.4f} -> {final:.4f}")
    return trace


def make_toy_vlm(
    spec: ToyVLMSpec,
    seed: int,
    pretrain_steps: int,
    tokenizer: Optional[Tokenizer] = None,
    prompts: Optional[Mapping[TaskName, Sequence[str]]] = None,
    batch_size: Optional[int] = None,
    learning_rate: Optional[float] = None,
    responses: Sequence[str] = DEFAULT_TARGET_TEXTS
) -> ToyVLM:
    """
    Build a ToyVLM from a seeded Gaussian init, optionally pretrained.

    Args:
        spec: Architecture
        seed: Seed of the weight init and of the pretraining data stream
        pretrain_steps: Teacher-forced steps on the caption-and-response task (0 = raw init)
        tokenizer: Vocabulary (defaults to the prompts + responses + caption words)
        prompts: Pretraining prompts grouped by task (defaults to the shipped corpora)
        responses: Texts the response textures stand for

    Returns:
        Frozen model; identical arguments give bitwise-identical weights
    """
    prompts = prompts if prompts is not None else default_task_prompts()
    if tokenizer is None:
        corpus = [p for group in prompts.values() for p in group]
        tokenizer = build_vocab(corpus, list(responses) + list(COLOR_WORDS))
    model = ToyVLM(spec, tokenizer, seed)
    if pretrain_steps > 0:
        model.pretrain_trace = pretrain(
            model,
            pretrain_steps,
            prompts,
            batch_size or settings.pretrain_batch_size,
            learning_rate or settings.pretrain_learning_rate,
            responses
        )
        model.pretrain_steps = pretrain_steps
    model.freeze()
    logger.info(
        f"Built {model.model_id}: vocab={len(tokenizer)}, dim={spec.embed_dim}, "
        f"pretrain_steps={pretrain_steps}"
    )
    return model


def save_checkpoint(model: ToyVLM, path: Path) -> None:
    """Write spec + seed + vocabulary + flat parameter array."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.model_dump(),
        "seed": model.seed,
        "pretrain_steps": model.pretrain_steps,
        "pretrain_eval": list(model.pretrain_eval),
        "vocab": list(model.tokenizer.id_to_token),
        "parameters": model.flat_parameters().clone(),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise StoreError(f"Failed to write checkpoint {path}: {e}") from e


def load_checkpoint(path: Path) -> ToyVLM:
    """
    Rebuild a frozen model from a checkpoint.

    Raises:
        StoreError: If the file is missing, unreadable or of another format version
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise StoreError(f"Failed to read checkpoint {path}: {e}") from e
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise StoreError(f"Unsupported checkpoint version in {path}")

    tokenizer = Tokenizer(payload["vocab"][len(SPECIAL_TOKENS):])
    if tokenizer.id_to_token != payload["vocab"]:
        raise StoreError(f"Vocabulary in {path} is not in canonical order")
    model = ToyVLM(ToyVLMSpec(**payload["spec"]), tokenizer, payload["seed"])
    with torch.no_grad():
        vector_to_parameters(payload["parameters"].to(model.dtype), model.parameters())
    model.pretrain_steps = payload["pretrain_steps"]
    model.pretrain_eval = tuple(payload["pretrain_eval"])
    return model.freeze()
