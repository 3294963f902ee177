"""Data models for the CroPA workbench."""
import hashlib
import json
from datetime import datetime
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Dict, List, Optional, Tuple, Union

from pydantic import (
    BaseModel, BeforeValidator, Field, computed_field, field_validator, model_validator
)

from config import settings


def parse_fraction(value):
    """Accept fractional notation such as "16/255" wherever a real is expected."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"Not a number or fraction: {value!r}") from e
    return value


FractionFloat = Annotated[float, BeforeValidator(parse_fraction)]
AxisValue = Union[int, float, str]


def canonical_digest(payload: dict) -> str:
    """SHA-256 of the canonical JSON form of a payload."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class AttackMethod(str, Enum):
    """Optimization procedures for the visual perturbation."""
    SINGLE_P = "single_p"
    MULTI_P = "multi_p"
    CROPA = "cropa"
    CROPA_JOINT = "cropa_joint"


class AttackMode(str, Enum):
    """Attack goal."""
    TARGETED = "targeted"
    NON_TARGETED = "non_targeted"


class PromptInit(str, Enum):
    """Initialisation of a prompt perturbation on first visit."""
    ZERO = "zero"
    GAUSSIAN = "gaussian"


class PromptBatching(str, Enum):
    """Prompts per image step: one sampled prompt, or the sum over all of them."""
    SAMPLE = "sample"
    ALL = "all"


class TaskName(str, Enum):
    """Task families of the prompt suite."""
    VQA_GENERAL = "vqa_general"
    VQA_SPECIFIC = "vqa_specific"
    CLASSIFICATION = "classification"
    CAPTIONING = "captioning"


TASK_ORDER: Tuple[TaskName, ...] = tuple(TaskName)


class EvalSplit(str, Enum):
    """Which part of the suite an evaluation covers."""
    TRAIN = "train"
    HOLDOUT = "holdout"
    ALL = "all"


class DefenseKind(str, Enum):
    """Test-time input transformations."""
    NONE = "none"
    RANDOM_ROTATION = "random_rotation"


class SweepAxis(str, Enum):
    """Hyperparameter axes the runner can sweep."""
    PROMPT_COUNT = "prompt_count"
    ITERATIONS = "iterations"
    EPSILON = "epsilon"
    ALPHA2 = "alpha2"
    TARGET_TEXT = "target_text"


class ProjectionMethod(str, Enum):
    """2-D projection used for embedding coverage plots."""
    PCA = "pca"
    TSNE = "tsne"


class PointLabel(str, Enum):
    """Point families in the embedding coverage plot."""
    CLEAN_SET1 = "clean_set1"
    CLEAN_SET2 = "clean_set2"
    PERTURBED = "perturbed"


class ToyVLMSpec(BaseModel):
    """Architecture of the reference vision-language model."""
    image_size: int = Field(default=32, gt=0)
    patch_size: int = Field(default=8, gt=0)
    channels: int = Field(default=3, gt=0)
    embed_dim: int = Field(default=64, gt=0)
    heads: int = Field(default=4, gt=0)
    encoder_layers: int = Field(default=2, gt=0)
    decoder_layers: int = Field(default=2, gt=0)
    max_gen_len: int = Field(default_factory=lambda: settings.max_gen_len, gt=0)
    dtype: str = "float32"

    @model_validator(mode="after")
    def check_dimensions(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"Unsupported dtype: {self.dtype}")
        return self

    @property
    def num_visual_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class Objective(BaseModel):
    """What the visual perturbation optimizes for."""
    mode: AttackMode = AttackMode.TARGETED
    target_text: Optional[str] = Field(default_factory=lambda: settings.target_text)
    clean_outputs: Dict[int, str] = {}

    @model_validator(mode="after")
    def check_target(self):
        if self.mode == AttackMode.TARGETED and not (self.target_text or "").strip():
            raise ValueError("Targeted objective needs a non-empty target_text")
        return self


class AttackConfig(BaseModel):
    """Everything needed to reproduce one optimization."""
    method: AttackMethod
    prompt_set: List[str] = Field(min_length=1)
    epsilon: FractionFloat = Field(default_factory=lambda: settings.epsilon, gt=0, le=1)
    alpha1: FractionFloat = Field(default_factory=lambda: settings.alpha1, ge=0)
    alpha2: FractionFloat = Field(default_factory=lambda: settings.alpha2, ge=0)
    iterations: int = Field(default_factory=lambda: settings.iterations, ge=1)
    update_interval: int = Field(default_factory=lambda: settings.update_interval, ge=1)
    seed: int = 0
    shots_at_train: int = Field(default=0, ge=0)
    objective: Objective = Field(default_factory=Objective)
    prompt_init: PromptInit = Field(default_factory=lambda: PromptInit(settings.prompt_init))
    prompt_init_sigma: float = Field(default_factory=lambda: settings.prompt_init_sigma, ge=0)
    batch_prompts: PromptBatching = PromptBatching.SAMPLE
    checkpoint_steps: List[int] = []
    resumable: bool = True

    @model_validator(mode="after")
    def check_consistency(self):
        if self.alpha1 > self.epsilon:
            raise ValueError(f"alpha1 ({self.alpha1}) must not exceed epsilon ({self.epsilon})")
        if self.method == AttackMethod.SINGLE_P and len(self.prompt_set) != 1:
            raise ValueError("single_p optimizes against exactly one prompt")
        if self.batch_prompts == PromptBatching.ALL and self.method in (
            AttackMethod.CROPA, AttackMethod.CROPA_JOINT
        ):
            raise ValueError("batch_prompts=all is only defined for single_p and multi_p")
        return self

    @field_validator("checkpoint_steps")
    @classmethod
    def sort_checkpoints(cls, v):
        if any(step < 1 for step in v):
            raise ValueError("checkpoint steps are 1-based")
        return sorted(set(v))

    @property
    def k(self) -> int:
        return len(self.prompt_set)

    def digest(self) -> str:
        """Digest of every field that affects the trajectory."""
        payload = self.model_dump(mode="json")
        payload["objective"].pop("clean_outputs", None)
        return canonical_digest(payload)


class TraceEntry(BaseModel):
    """One optimization step: which prompt was used and the loss before the update."""
    step: int
    prompt_index: int
    loss: float


class PromptSplit(BaseModel):
    """Train/held-out prompt indices for one task."""
    train: List[int] = []
    holdout: List[int] = []

    @model_validator(mode="after")
    def check_disjoint(self):
        if set(self.train) & set(self.holdout):
            raise ValueError("train and held-out indices overlap")
        return self


class PromptSuite(BaseModel):
    """Task-labelled prompt collections with a train/held-out split."""
    tasks: Dict[TaskName, List[str]]
    splits: Dict[TaskName, PromptSplit]

    @model_validator(mode="after")
    def check_tasks(self):
        for task, prompts in self.tasks.items():
            if not prompts:
                raise ValueError(f"Task {task.value} has no prompts")
            if task not in self.splits:
                raise ValueError(f"Task {task.value} has no split")
        return self

    def prompts(self, task: TaskName, split: "EvalSplit") -> List[Tuple[int, str]]:
        """(index, prompt) pairs of a task restricted to a split."""
        prompts = self.tasks[task]
        if split == EvalSplit.ALL:
            indices = range(len(prompts))
        elif split == EvalSplit.TRAIN:
            indices = self.splits[task].train
        else:
            indices = self.splits[task].holdout
        return [(i, prompts[i]) for i in indices]

    def ordered_tasks(self) -> List[TaskName]:
        return [task for task in TASK_ORDER if task in self.tasks]

    def corpus(self) -> List[str]:
        return [prompt for task in self.ordered_tasks() for prompt in self.tasks[task]]


class DefenseConfig(BaseModel):
    """Test-time defense applied to the adversarial image."""
    kind: DefenseKind = DefenseKind.NONE
    max_degrees: float = Field(default_factory=lambda: settings.defense_max_degrees)
    seed: int = 0

    @model_validator(mode="after")
    def check_range(self):
        if self.kind == DefenseKind.RANDOM_ROTATION and not 0 < self.max_degrees <= 180:
            raise ValueError("random_rotation needs max_degrees in (0, 180]")
        return self


class TaskResult(BaseModel):
    """Success count for one task."""
    successes: int = Field(ge=0)
    total: int = Field(gt=0)

    @model_validator(mode="after")
    def check_counts(self):
        if self.successes > self.total:
            raise ValueError("successes cannot exceed total")
        return self

    @computed_field
    @property
    def asr(self) -> float:
        return self.successes / self.total


class ASRReport(BaseModel):
    """Per-task and overall attack success rates of one adversarial image."""
    label: str = ""
    mode: AttackMode
    shots: int = 0
    defense: DefenseKind = DefenseKind.NONE
    split: EvalSplit = EvalSplit.HOLDOUT
    per_task: Dict[TaskName, TaskResult]

    @computed_field
    @property
    def overall(self) -> float:
        """Unweighted mean across tasks."""
        if not self.per_task:
            return 0.0
        return sum(result.asr for result in self.per_task.values()) / len(self.per_task)


class CellStats(BaseModel):
    """Mean and population standard deviation of one table cell."""
    mean: float
    std: float = Field(ge=0)


class AggregateReport(BaseModel):
    """Per-cell statistics over repeated runs."""
    label: str = ""
    n_runs: int = Field(ge=2)
    cells: Dict[str, CellStats]


class SweepCell(BaseModel):
    """The report of one (method, axis value, seed) point of a sweep."""
    method: AttackMethod
    axis_value: AxisValue
    seed: int
    report: ASRReport


class SweepResult(BaseModel):
    """Reports collected along one hyperparameter axis."""
    axis: SweepAxis
    axis_values: List[AxisValue]
    cells: List[SweepCell] = []


class ModelSettings(BaseModel):
    """How to build (or reload) a ToyVLM."""
    spec: ToyVLMSpec = Field(default_factory=ToyVLMSpec)
    seed: int = Field(default_factory=lambda: settings.model_seed)
    pretrain_steps: int = Field(default_factory=lambda: settings.pretrain_steps, ge=0)


class SuiteSettings(BaseModel):
    """Prompt files and split parameters."""
    paths: Dict[TaskName, Path] = Field(
        default_factory=lambda: {TaskName(k): v for k, v in settings.prompt_paths.items()}
    )
    split_seed: int = Field(default_factory=lambda: settings.split_seed)
    holdout_fraction: float = Field(
        default_factory=lambda: settings.holdout_fraction, ge=0, lt=1
    )


class AttackGrid(BaseModel):
    """Methods x seeds plus the shared hyperparameters of an experiment."""
    methods: List[AttackMethod] = Field(min_length=1)
    seeds: List[int] = Field(default=[0], min_length=1)
    num_prompts: int = Field(default_factory=lambda: settings.num_prompts, ge=1)
    epsilon: FractionFloat = Field(default_factory=lambda: settings.epsilon, gt=0, le=1)
    alpha1: FractionFloat = Field(default_factory=lambda: settings.alpha1, ge=0)
    alpha2: FractionFloat = Field(default_factory=lambda: settings.alpha2, ge=0)
    iterations: int = Field(default_factory=lambda: settings.iterations, ge=1)
    update_interval: int = Field(default_factory=lambda: settings.update_interval, ge=1)
    mode: AttackMode = AttackMode.TARGETED
    target_text: str = Field(default_factory=lambda: settings.target_text)
    prompt_init: PromptInit = Field(default_factory=lambda: PromptInit(settings.prompt_init))
    shots_at_train: int = Field(default=0, ge=0)


class EvalSettings(BaseModel):
    """Evaluation grid: shot counts, defenses, split."""
    shots: List[int] = Field(default=[0], min_length=1)
    defenses: List[DefenseConfig] = Field(default_factory=lambda: [DefenseConfig()], min_length=1)
    split: EvalSplit = EvalSplit.HOLDOUT
    strict: bool = False


class ExperimentManifest(BaseModel):
    """A complete, reproducible experiment description."""
    experiment_id: str
    model: ModelSettings = Field(default_factory=ModelSettings)
    transfer_models: List[ModelSettings] = []
    images: str = "synthetic:0:1"
    suite: SuiteSettings = Field(default_factory=SuiteSettings)
    grid: AttackGrid
    evaluation: EvalSettings = Field(default_factory=EvalSettings)
    sweep: Dict[SweepAxis, List[AxisValue]] = {}

    def digest(self) -> str:
        return canonical_digest(self.model_dump(mode="json"))


class RunRecord(BaseModel):
    """Index entry of a stored run."""
    run_id: str
    manifest_digest: str
    method: AttackMethod
    seed: int
    image_index: int = 0
    label: str = ""
    created_at: datetime = Field(default_factory=datetime.utcnow)
