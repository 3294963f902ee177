"""Attack success rate scoring across the prompt suite."""
import logging
import math
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from src.exceptions import ConfigurationError, DomainError
from src.models import (
    AggregateReport, ASRReport, AttackMode, CellStats, DefenseConfig, DefenseKind,
    EvalSplit, Objective, PromptSuite, TASK_ORDER, TaskResult
)
from src.tokenizer import normalize_text
from src.toy_vlm import Shot, VisionLanguageModel

logger = logging.getLogger(__name__)

OVERALL = "overall"


def targeted_success(prediction: str, target: str, strict: bool = False) -> bool:
    """Exact match after lowercasing and whitespace collapsing (or byte-exact when strict)."""
    if strict:
        return prediction == target
    return normalize_text(prediction) == normalize_text(target)


def nontargeted_success(prediction: str, clean_prediction: str, strict: bool = False) -> bool:
    return not targeted_success(prediction, clean_prediction, strict)


def rotate(image: torch.Tensor, degrees: float) -> torch.Tensor:
    """Rotate an H x W x C image about its centre; bilinear, zero fill outside, clamped to [0, 1]."""
    theta = math.radians(degrees)
    matrix = torch.tensor(
        [[[math.cos(theta), -math.sin(theta), 0.0], [math.sin(theta), math.cos(theta), 0.0]]],
        dtype=torch.float64
    )
    batch = image.detach().to(torch.float64).permute(2, 0, 1).unsqueeze(0)
    grid = F.affine_grid(matrix, list(batch.shape), align_corners=False)
    rotated = F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return rotated.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).to(image.dtype)


def draw_angle(defense: DefenseConfig, per_eval_seed: Union[int, Sequence[int]]) -> float:
    rng = np.random.default_rng(np.random.SeedSequence(per_eval_seed))
    return float(rng.uniform(-defense.max_degrees, defense.max_degrees))


def apply_defense(
    image: torch.Tensor,
    defense: DefenseConfig,
    per_eval_seed: Union[int, Sequence[int]] = 0
) -> torch.Tensor:
    """Identity for `none`; a seeded random rotation for `random_rotation`."""
    if defense.kind == DefenseKind.NONE:
        return image
    return rotate(image, draw_angle(defense, per_eval_seed))


class ASREvaluator:
    """Scores an adversarial image against every prompt of a suite."""

    def __init__(self, model: VisionLanguageModel, strict: bool = False):
        self.model = model
        self.strict = strict

    def _predict(self, image: torch.Tensor, prompt: str, shots: Sequence[Shot]) -> str:
        return self.model.generate(image, self.model.tokenizer.tokenize(prompt), shots)

    def evaluate(
        self,
        clean_image: Optional[torch.Tensor],
        adv_image: torch.Tensor,
        suite: PromptSuite,
        objective: Objective,
        shots: Sequence[Shot] = (),
        defense: DefenseConfig = None,
        split: EvalSplit = EvalSplit.HOLDOUT,
        image_index: int = 0,
        label: str = ""
    ) -> ASRReport:
        """
        Attack success rate per task and overall.

        Only the adversarial image is consumed; prompt perturbations never reach evaluation.
        Non-targeted clean predictions use the same shots with the defense disabled.

        Raises:
            ConfigurationError: If a non-targeted evaluation has no clean image
        """
        defense = defense or DefenseConfig()
        if objective.mode == AttackMode.NON_TARGETED and clean_image is None:
            raise ConfigurationError("Non-targeted evaluation needs the clean image")

        per_task: Dict = {}
        for task in suite.ordered_tasks():
            scope = suite.prompts(task, split)
            if not scope:
                continue
            task_index = TASK_ORDER.index(task)
            successes = 0
            for prompt_index, prompt in scope:
                defended = apply_defense(
                    adv_image, defense, [defense.seed, image_index, task_index, prompt_index]
                )
                prediction = self._predict(defended, prompt, shots)
                if objective.mode == AttackMode.TARGETED:
                    hit = targeted_success(prediction, objective.target_text, self.strict)
                else:
                    clean_prediction = self._predict(clean_image, prompt, shots)
                    hit = nontargeted_success(prediction, clean_prediction, self.strict)
                successes += int(hit)
            per_task[task] = TaskResult(successes=successes, total=len(scope))
            logger.debug(f"{task.value}: {successes}/{len(scope)}")

        report = ASRReport(
            label=label,
            mode=objective.mode,
            shots=len(shots),
            defense=defense.kind,
            split=split,
            per_task=per_task
        )
        logger.info(f"Evaluated {label or 'image'}: overall ASR {report.overall:.3f}")
        return report


def evaluate(
    model: VisionLanguageModel,
    clean_image: Optional[torch.Tensor],
    adv_image: torch.Tensor,
    suite: PromptSuite,
    objective: Objective,
    shots: Sequence[Shot] = (),
    defense: DefenseConfig = None,
    split: EvalSplit = EvalSplit.HOLDOUT,
    strict: bool = False,
    image_index: int = 0,
    label: str = ""
) -> ASRReport:
    return ASREvaluator(model, strict).evaluate(
        clean_image, adv_image, suite, objective, shots, defense, split, image_index, label
    )


def cross_model_evaluate(
    run,
    target_model: VisionLanguageModel,
    suite: PromptSuite,
    objective: Optional[Objective] = None,
    shots: Sequence[Shot] = (),
    defense: DefenseConfig = None,
    split: EvalSplit = EvalSplit.HOLDOUT,
    strict: bool = False,
    label: str = ""
) -> ASRReport:
    """
    Evaluate a run's adversarial image against another model.

    Raises:
        ConfigurationError: If the target model cannot represent the target text
    """
    objective = objective or run.config.objective
    if objective.mode == AttackMode.TARGETED and not target_model.tokenizer.covers(objective.target_text):
        raise ConfigurationError(
            f"Target {objective.target_text!r} is outside {target_model.model_id}'s vocabulary"
        )
    return ASREvaluator(target_model, strict).evaluate(
        run.clean_image, run.adversarial_image, suite, objective, shots, defense, split,
        label=label or f"{run.model_id}->{target_model.model_id}"
    )


def report_cells(report: ASRReport) -> Dict[str, float]:
    """Per-task ASRs keyed by task name, plus the overall."""
    cells = {task.value: result.asr for task, result in report.per_task.items()}
    cells[OVERALL] = report.overall
    return cells


def aggregate(reports: List[ASRReport], label: str = "") -> AggregateReport:
    """
    Per-cell mean and population standard deviation over repeated runs.

    Raises:
        DomainError: If fewer than two reports are given or their task sets differ
    """
    if len(reports) < 2:
        raise DomainError("Aggregation needs at least two reports")
    cells = [report_cells(r) for r in reports]
    keys = list(cells[0])
    if any(set(c) != set(keys) for c in cells[1:]):
        raise DomainError("Reports cover different task sets")

    stats = {}
    for key in keys:
        values = np.array([c[key] for c in cells], dtype=np.float64)
        stats[key] = CellStats(mean=float(np.mean(values)), std=float(np.std(values, ddof=0)))
    return AggregateReport(label=label or reports[0].label, n_runs=len(reports), cells=stats)


def asr_table(rows: Dict[str, Union[ASRReport, AggregateReport]]) -> pd.DataFrame:
    """Rows = method labels, columns = tasks + overall; aggregates render as mean±std."""
    records = {}
    for label, item in rows.items():
        if isinstance(item, AggregateReport):
            records[label] = {k: f"{s.mean:.3f}±{s.std:.3f}" for k, s in item.cells.items()}
        else:
            records[label] = {k: f"{v:.3f}" for k, v in report_cells(item).items()}
    columns = [t.value for t in TASK_ORDER] + [OVERALL]
    frame = pd.DataFrame.from_dict(records, orient="index")
    return frame[[c for c in columns if c in frame.columns]]
