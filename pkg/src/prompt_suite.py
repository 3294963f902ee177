"""Prompt corpus loading and train/held-out splitting."""
import logging
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np

from config import settings
from src.exceptions import ConfigurationError
from src.models import EvalSplit, PromptSplit, PromptSuite, TASK_ORDER, TaskName

logger = logging.getLogger(__name__)

# SeedSequence spawn key of the attack-prompt draw
ATTACK_PROMPT_STREAM = 7


def validate_file(file_path: Path) -> None:
    """
    Validate a prompt file before reading it.

    Raises:
        ConfigurationError: If the file is missing or not a text file
    """
    if not file_path.exists():
        raise ConfigurationError(f"Prompt file not found: {file_path}")
    if not file_path.is_file():
        raise ConfigurationError(f"Prompt path is not a file: {file_path}")
    if file_path.suffix.lower() != ".txt":
        raise ConfigurationError(f"Invalid prompt file type. Expected .txt, got {file_path.suffix}")


def read_prompt_file(file_path: Path) -> List[str]:
    """
    Read one prompt per line (UTF-8), ignoring blank lines.

    Raises:
        ConfigurationError: If the file is invalid, undecodable or holds no prompts
    """
    file_path = Path(file_path)
    validate_file(file_path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigurationError(f"Prompt file {file_path} is not valid UTF-8") from e

    prompts = [line.strip() for line in text.splitlines() if line.strip()]
    if not prompts:
        raise ConfigurationError(f"Prompt file {file_path} contains no prompts")
    return prompts


def split_task(n: int, split_seed: int, task_index: int, holdout_fraction: float) -> PromptSplit:
    """Seeded permutation of `n` prompt indices; the first int(n * fraction) are held out."""
    rng = np.random.default_rng(np.random.SeedSequence([split_seed, task_index]))
    order = [int(i) for i in rng.permutation(n)]
    n_holdout = int(n * holdout_fraction)
    return PromptSplit(train=sorted(order[n_holdout:]), holdout=sorted(order[:n_holdout]))


def load_suite(
    paths: Mapping[TaskName, Path],
    split_seed: int = None,
    holdout_fraction: float = None
) -> PromptSuite:
    """
    Load task-labelled prompt files and split each task.

    Args:
        paths: Prompt file per task
        split_seed: Seed of the per-task permutation
        holdout_fraction: Fraction of each task held out from attack-time use

    Returns:
        PromptSuite; identical arguments give identical splits

    Raises:
        ConfigurationError: If a file is missing, empty or the fraction is out of range
    """
    split_seed = settings.split_seed if split_seed is None else split_seed
    holdout_fraction = settings.holdout_fraction if holdout_fraction is None else holdout_fraction
    if not 0 <= holdout_fraction < 1:
        raise ConfigurationError(f"holdout_fraction must be in [0, 1), got {holdout_fraction}")
    if not paths:
        raise ConfigurationError("Prompt suite needs at least one task")

    try:
        tasks: Dict[TaskName, List[str]] = {}
        splits: Dict[TaskName, PromptSplit] = {}
        for task in TASK_ORDER:
            if task not in paths:
                continue
            prompts = read_prompt_file(Path(paths[task]))
            tasks[task] = prompts
            splits[task] = split_task(
                len(prompts), split_seed, TASK_ORDER.index(task), holdout_fraction
            )
            logger.info(
                f"Loaded {len(prompts)} {task.value} prompts "
                f"({len(splits[task].holdout)} held out)"
            )
        return PromptSuite(tasks=tasks, splits=splits)

    except ConfigurationError:
        raise
    except Exception as e:
        logger.error(f"Unexpected error loading prompt suite: {e}", exc_info=True)
        raise ConfigurationError(f"Failed to load prompt suite: {str(e)}") from e


def default_suite() -> PromptSuite:
    """The shipped corpora with the configured split."""
    return load_suite({TaskName(k): v for k, v in settings.prompt_paths.items()})


def attack_prompts(suite: PromptSuite, k: int, seed: int) -> List[str]:
    """
    First k prompts of a seeded permutation of the pooled train split.

    Raises:
        ConfigurationError: If fewer than k training prompts exist
    """
    pooled = [
        prompt
        for task in suite.ordered_tasks()
        for _, prompt in suite.prompts(task, EvalSplit.TRAIN)
    ]
    if k > len(pooled):
        raise ConfigurationError(f"Requested {k} attack prompts but only {len(pooled)} are in the train split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, ATTACK_PROMPT_STREAM]))
    return [pooled[int(i)] for i in rng.permutation(len(pooled))[:k]]
