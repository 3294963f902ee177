"""
Attack objectives and optimizers: Single-P, Multi-P, CroPA and CroPA-joint.

All four share one loop. Each step samples a prompt, takes a signed descent step
on the visual perturbation and projects it back into the epsilon-ball. CroPA
additionally keeps one embedding perturbation per prompt and takes a signed
ascent step on it every `update_interval` steps (CroPA-joint: every step, from
the same gradient evaluation).
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from src.exceptions import ConfigurationError, DomainError, StateError
from src.models import (
    AttackConfig, AttackMethod, AttackMode, Objective, PromptBatching, TraceEntry
)
from src.perturbation import (
    PerturbationSnapshot, PromptPerturbation, VisualPerturbation, apply, apply_prompt,
    ascend_prompt, check_budget, descend_visual, init_visual, project
)
from src.toy_vlm import EmbeddingSequence, Shot, VisionLanguageModel

logger = logging.getLogger(__name__)

# SeedSequence spawn keys of the engine's random streams
SAMPLING_STREAM = 5


@dataclass
class ResumeState:
    """Everything needed to continue a run bit-exactly."""
    step: int
    delta: torch.Tensor
    prompt: PromptPerturbation
    rng_state: str


@dataclass
class AttackRun:
    """One optimization: its config, final perturbations and full trace."""
    config: AttackConfig
    model_id: str
    clean_image: torch.Tensor
    visual: VisualPerturbation
    prompt: PromptPerturbation
    trace: List[TraceEntry]
    shots: List[Shot] = field(default_factory=list)
    checkpoints: Dict[int, PerturbationSnapshot] = field(default_factory=dict)
    resume_state: Optional[ResumeState] = None

    @property
    def adversarial_image(self) -> torch.Tensor:
        return apply(self.clean_image, self.visual.delta)

    @property
    def steps_done(self) -> int:
        return len(self.trace)


def _sampler(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SAMPLING_STREAM]))


class AttackEngine:
    """Runs attacks against one immutable model."""

    def __init__(self, model: VisionLanguageModel, progress: bool = False):
        self.model = model
        self.progress = progress

    def _prompt_ids(self, prompt: str) -> List[int]:
        ids = self.model.tokenizer.tokenize(prompt)
        if not ids:
            raise ConfigurationError(f"Prompt {prompt!r} has no tokens")
        return ids

    def precompute_clean_outputs(
        self,
        image: torch.Tensor,
        prompts: Sequence[str],
        shots: Sequence[Shot] = ()
    ) -> Dict[int, str]:
        """Greedy predictions on the clean image, one per prompt."""
        if not prompts:
            raise DomainError("Cannot precompute clean outputs for an empty prompt set")
        return {
            i: self.model.generate(image, self._prompt_ids(prompt), shots)
            for i, prompt in enumerate(prompts)
        }

    def target_ids(self, objective: Objective, prompt_index: int) -> List[int]:
        """Token ids the objective's loss is measured against for one prompt."""
        tokenizer = self.model.tokenizer
        if objective.mode == AttackMode.TARGETED:
            return tokenizer.target_ids(objective.target_text)
        if prompt_index not in objective.clean_outputs:
            raise StateError(f"No clean output for prompt {prompt_index}")
        return tokenizer.target_ids(objective.clean_outputs[prompt_index])

    def objective_loss(
        self,
        objective: Objective,
        adv_image: torch.Tensor,
        prompt_embedding: EmbeddingSequence,
        prompt_index: int,
        shots: Sequence[Shot] = ()
    ) -> torch.Tensor:
        """Language-modelling loss against the target (targeted) or the clean output (non-targeted)."""
        target = self.target_ids(objective, prompt_index)
        return self.model.lm_loss(adv_image, prompt_embedding, target, shots)

    def prompt_set_loss(
        self,
        objective: Objective,
        image: torch.Tensor,
        prompts: Sequence[str],
        shots: Sequence[Shot] = ()
    ) -> float:
        """Mean objective loss over a prompt set, without prompt perturbations."""
        with torch.no_grad():
            losses = [
                float(self.objective_loss(
                    objective, image, self.model.embed_prompt(self._prompt_ids(p)), i, shots
                ))
                for i, p in enumerate(prompts)
            ]
        return sum(losses) / len(losses)

    def _prepare(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot]) -> AttackConfig:
        if len(shots) != config.shots_at_train:
            raise ConfigurationError(
                f"Config expects {config.shots_at_train} training shots, got {len(shots)}"
            )
        objective = config.objective
        if objective.mode == AttackMode.TARGETED:
            if not self.model.tokenizer.covers(objective.target_text):
                raise ConfigurationError(
                    f"Target {objective.target_text!r} is not covered by the model vocabulary"
                )
            return config
        missing = [i for i in range(config.k) if i not in objective.clean_outputs]
        if missing:
            clean_outputs = self.precompute_clean_outputs(image, config.prompt_set, shots)
            objective = objective.model_copy(update={"clean_outputs": clean_outputs})
            config = config.model_copy(update={"objective": objective})
        return config

    def run(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot] = ()) -> AttackRun:
        """Dispatch on `config.method`."""
        runners = {
            AttackMethod.SINGLE_P: self.run_single_p,
            AttackMethod.MULTI_P: self.run_multi_p,
            AttackMethod.CROPA: self.run_cropa,
            AttackMethod.CROPA_JOINT: self.run_cropa_joint,
        }
        return runners[config.method](config, image, shots)

    def run_single_p(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot] = ()) -> AttackRun:
        if config.k != 1:
            raise ConfigurationError(f"single_p optimizes against exactly one prompt, got {config.k}")
        return self._start(config.model_copy(update={"method": AttackMethod.SINGLE_P}), image, shots)

    def run_multi_p(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot] = ()) -> AttackRun:
        return self._start(config.model_copy(update={"method": AttackMethod.MULTI_P}), image, shots)

    def run_cropa(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot] = ()) -> AttackRun:
        return self._start(self._per_prompt(config, AttackMethod.CROPA), image, shots)

    def run_cropa_joint(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot] = ()) -> AttackRun:
        return self._start(self._per_prompt(config, AttackMethod.CROPA_JOINT), image, shots)

    @staticmethod
    def _per_prompt(config: AttackConfig, method: AttackMethod) -> AttackConfig:
        if config.batch_prompts == PromptBatching.ALL:
            raise ConfigurationError(f"{method.value} samples one prompt per step")
        return config.model_copy(update={"method": method})

    def _start(self, config: AttackConfig, image: torch.Tensor, shots: Sequence[Shot]) -> AttackRun:
        clean = image.detach().to(self.model.dtype)
        config = self._prepare(config, clean, shots)
        visual = init_visual(clean, config.epsilon, config.seed)
        run = AttackRun(
            config=config,
            model_id=self.model.model_id,
            clean_image=clean,
            visual=visual,
            prompt=PromptPerturbation(),
            trace=[],
            shots=list(shots),
            resume_state=ResumeState(
                step=0,
                delta=visual.delta,
                prompt=PromptPerturbation(),
                rng_state=json.dumps(_sampler(config.seed).bit_generator.state)
            )
        )
        logger.info(
            f"Starting {config.method.value} attack: k={config.k}, K={config.iterations}, "
            f"eps={config.epsilon:.5f}, seed={config.seed}"
        )
        return self._optimize(run, config.iterations)

    def resume(self, run: AttackRun, extra_iterations: int) -> AttackRun:
        """
        Continue a run for `extra_iterations` more steps.

        Continuing K then K' steps equals one run of K + K' steps, bitwise.

        Raises:
            StateError: If the run was stored without its resume state
        """
        if run.resume_state is None:
            raise StateError("Run has no resume checkpoint")
        if extra_iterations < 0:
            raise DomainError("extra_iterations must be non-negative")
        config = run.config.model_copy(update={"iterations": run.steps_done + extra_iterations})
        continued = AttackRun(
            config=config,
            model_id=run.model_id,
            clean_image=run.clean_image,
            visual=VisualPerturbation(run.resume_state.delta.clone(), run.visual.epsilon),
            prompt=run.resume_state.prompt.clone(),
            trace=list(run.trace),
            shots=list(run.shots),
            checkpoints=dict(run.checkpoints),
            resume_state=run.resume_state
        )
        return self._optimize(continued, config.iterations)

    def _optimize(self, run: AttackRun, until: int) -> AttackRun:
        config = run.config
        model = self.model
        clean = run.clean_image
        shots = run.shots
        method = config.method
        direction = 1.0 if config.objective.mode == AttackMode.TARGETED else -1.0
        per_prompt = method in (AttackMethod.CROPA, AttackMethod.CROPA_JOINT)

        rng = _sampler(config.seed)
        rng.bit_generator.state = json.loads(run.resume_state.rng_state)
        prompt_embeddings = [model.embed_prompt(self._prompt_ids(p)) for p in config.prompt_set]
        targets = [self.target_ids(config.objective, i) for i in range(config.k)]

        delta = run.visual.delta
        deltas_t = run.prompt
        checkpoint_steps = set(config.checkpoint_steps)
        start = run.steps_done + 1

        steps = range(start, until + 1)
        for step in tqdm(steps, desc=method.value, disable=not self.progress, leave=False):
            adv = apply(clean, delta)

            if config.batch_prompts == PromptBatching.ALL:
                prompt_index = -1
                loss = 0.0
                image_grad = torch.zeros_like(delta)
                for i, embedding in enumerate(prompt_embeddings):
                    result = model.loss_and_grads(adv, embedding, targets[i], shots, wrt=("image",))
                    loss += result.loss
                    image_grad = image_grad + result.image_grad
            else:
                prompt_index = int(rng.integers(config.k))
                embedding = prompt_embeddings[prompt_index]
                if per_prompt:
                    entry = deltas_t.ensure(
                        prompt_index, embedding.vectors, config.prompt_init,
                        config.prompt_init_sigma, config.seed
                    )
                    embedding = apply_prompt(embedding, entry)
                result = model.loss_and_grads(adv, embedding, targets[prompt_index], shots)
                loss = result.loss
                image_grad = result.image_grad

            delta = descend_visual(delta, direction * image_grad, config.alpha1)

            if method == AttackMethod.CROPA_JOINT:
                deltas_t.entries[prompt_index] = ascend_prompt(
                    deltas_t.entries[prompt_index], direction * result.prompt_grad, config.alpha2
                )
            elif method == AttackMethod.CROPA and step % config.update_interval == 0:
                stepped = model.loss_and_grads(
                    apply(clean, delta), embedding, targets[prompt_index], shots
                )
                deltas_t.entries[prompt_index] = ascend_prompt(
                    deltas_t.entries[prompt_index], direction * stepped.prompt_grad, config.alpha2
                )

            delta = project(delta, clean, config.epsilon)
            check_budget(delta, clean, config.epsilon, step)
            run.trace.append(TraceEntry(step=step, prompt_index=prompt_index, loss=loss))

            if step in checkpoint_steps:
                run.checkpoints[step] = PerturbationSnapshot(
                    visual=VisualPerturbation(delta.clone(), config.epsilon),
                    prompt=deltas_t.clone(),
                    seed=config.seed,
                    iteration=step
                )
            if step % 100 == 0:
                logger.debug(f"{method.value} step {step}: loss={loss:.4f}")

        run.visual = VisualPerturbation(delta, config.epsilon)
        run.prompt = deltas_t
        run.resume_state = ResumeState(
            step=run.steps_done,
            delta=delta.clone(),
            prompt=deltas_t.clone(),
            rng_state=json.dumps(rng.bit_generator.state)
        ) if config.resumable else None
        if run.trace:
            logger.info(
                f"Finished {method.value} at step {run.steps_done}: last loss={run.trace[-1].loss:.4f}"
            )
        return run


def same_trajectory(a: AttackRun, b: AttackRun) -> bool:
    """Bitwise equality of final perturbations and traces."""
    if a.trace != b.trace or not torch.equal(a.visual.delta, b.visual.delta):
        return False
    if set(a.prompt.entries) != set(b.prompt.entries):
        return False
    return all(torch.equal(a.prompt.entries[i], b.prompt.entries[i]) for i in a.prompt.entries)
