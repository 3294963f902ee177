"""Embedding-space diagnostics and curve/table emission for sweeps."""
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.metrics.pairwise import cosine_distances

from src.asr_evaluator import report_cells
from src.exceptions import DomainError, StoreError
from src.models import (
    AttackMethod, ASRReport, PointLabel, ProjectionMethod, SweepAxis, SweepCell,
    SweepResult, TaskName, TaskResult, TraceEntry
)
from src.perturbation import PromptPerturbation, apply_prompt
from src.toy_vlm import EmbeddingSequence, VisionLanguageModel

logger = logging.getLogger(__name__)

CURVES_FILE = "curves.csv"
LONG_FILE = "curves_long.csv"

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class LabeledPoint:
    label: PointLabel
    vector: np.ndarray


@dataclass(frozen=True)
class ProjectedPoint:
    label: PointLabel
    x: float
    y: float


@dataclass(frozen=True)
class DecodedRow:
    position: int
    original_id: int
    decoded_id: int
    distance: float


@dataclass(frozen=True)
class DecodingReport:
    """Nearest-token decoding of perturbed prompt rows."""
    rows: List[DecodedRow]

    @property
    def fraction_original(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.decoded_id == r.original_id for r in self.rows) / len(self.rows)


def _as_numpy(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().to(torch.float64).numpy()
    return np.asarray(values, dtype=np.float64)


def sentence_embedding(embedding: Union[EmbeddingSequence, ArrayLike]) -> np.ndarray:
    """Mean of the token rows."""
    rows = embedding.vectors if isinstance(embedding, EmbeddingSequence) else embedding
    return _as_numpy(rows).mean(axis=0)


def fix_signs(components: np.ndarray) -> np.ndarray:
    """Flip each component so its largest-magnitude coordinate is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def project_2d(
    points: Sequence[LabeledPoint],
    method: ProjectionMethod = ProjectionMethod.PCA,
    seed: int = 0
) -> List[ProjectedPoint]:
    """
    2-D projection of labelled points; labels and order are preserved.

    A degenerate set (all points identical) maps to the origin.

    Raises:
        DomainError: If fewer than three points are given
    """
    if len(points) < 3:
        raise DomainError("Projection needs at least three points")
    X = np.stack([_as_numpy(p.vector) for p in points])
    if np.allclose(X, X[0], rtol=0.0, atol=0.0):
        return [ProjectedPoint(p.label, 0.0, 0.0) for p in points]

    if method == ProjectionMethod.PCA:
        pca = PCA(n_components=2, svd_solver="full").fit(X)
        components = fix_signs(pca.components_)
        coords = (X - pca.mean_) @ components.T
    else:
        tsne = TSNE(
            n_components=2,
            perplexity=float(min(30, len(points) - 1)),
            init="pca",
            random_state=seed
        )
        coords = tsne.fit_transform(X)
    return [ProjectedPoint(p.label, float(x), float(y)) for p, (x, y) in zip(points, coords)]


def decode_embedding(rows: ArrayLike, table: ArrayLike) -> List[Tuple[int, float]]:
    """
    Nearest vocabulary entry of every row under cosine distance; ties go to the lowest id.

    Raises:
        DomainError: If any row has zero norm
    """
    rows = np.atleast_2d(_as_numpy(rows))
    table = _as_numpy(table)
    if np.any(np.linalg.norm(rows, axis=1) == 0):
        raise DomainError("Cannot decode a zero-norm embedding row")
    distances = cosine_distances(rows, table)
    nearest = np.argmin(distances, axis=1)
    return [(int(k), float(distances[i, k])) for i, k in enumerate(nearest)]


def decoding_report(
    model: VisionLanguageModel,
    prompts: Sequence[str],
    prompt_perturbation: PromptPerturbation
) -> DecodingReport:
    """Decode every perturbed row of every visited prompt back through the embedding table."""
    decoded = []
    for index in sorted(prompt_perturbation.entries):
        embedding = model.embed_prompt(model.tokenizer.tokenize(prompts[index]))
        perturbed = apply_prompt(embedding, prompt_perturbation.get(index))
        for position, (token_id, distance) in enumerate(
            decode_embedding(perturbed.vectors, model.embedding_table)
        ):
            decoded.append(DecodedRow(position, embedding.token_ids[position], token_id, distance))
    report = DecodingReport(decoded)
    logger.info(f"Decoded {len(decoded)} rows; {report.fraction_original:.3f} map to their original token")
    return report


def coverage_points(
    model: VisionLanguageModel,
    attack_prompts: Sequence[str],
    other_prompts: Sequence[str],
    prompt_perturbation: Optional[PromptPerturbation] = None
) -> List[LabeledPoint]:
    """Clean attack prompts, a second clean set and the perturbed attack prompts."""
    points = []
    perturbed = []
    for index, prompt in enumerate(attack_prompts):
        embedding = model.embed_prompt(model.tokenizer.tokenize(prompt))
        points.append(LabeledPoint(PointLabel.CLEAN_SET1, sentence_embedding(embedding)))
        if prompt_perturbation is not None and index in prompt_perturbation:
            shifted = apply_prompt(embedding, prompt_perturbation.get(index))
            perturbed.append(LabeledPoint(PointLabel.PERTURBED, sentence_embedding(shifted)))
    for prompt in other_prompts:
        embedding = model.embed_prompt(model.tokenizer.tokenize(prompt))
        points.append(LabeledPoint(PointLabel.CLEAN_SET2, sentence_embedding(embedding)))
    return points + perturbed


def _write(frame: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise StoreError(f"Failed to write {path}: {e}") from e
    return path


def write_projection(points: Sequence[ProjectedPoint], path: Path) -> Path:
    frame = pd.DataFrame(
        [{"label": p.label.value, "x": p.x, "y": p.y} for p in points],
        columns=["label", "x", "y"]
    )
    return _write(frame, path)


def write_decoding(report: DecodingReport, model: VisionLanguageModel, path: Path) -> Path:
    tokens = model.tokenizer.id_to_token
    frame = pd.DataFrame(
        [
            {
                "position": r.position,
                "original": tokens[r.original_id],
                "decoded": tokens[r.decoded_id],
                "cosine_distance": r.distance,
            }
            for r in report.rows
        ],
        columns=["position", "original", "decoded", "cosine_distance"]
    )
    return _write(frame, path)


def trace_frame(trace: Sequence[TraceEntry]) -> pd.DataFrame:
    return pd.DataFrame(
        [t.model_dump() for t in trace], columns=["step", "prompt_index", "loss"]
    )


def write_trace(trace: Sequence[TraceEntry], path: Path) -> Path:
    return _write(trace_frame(trace), path)


def _method_order(method: AttackMethod) -> int:
    return list(AttackMethod).index(method)


def sorted_cells(sweep: SweepResult) -> List[SweepCell]:
    """Cells ordered by (method, axis position, seed)."""
    position = {json.dumps(v): i for i, v in enumerate(sweep.axis_values)}
    return sorted(
        sweep.cells,
        key=lambda c: (_method_order(c.method), position[json.dumps(c.axis_value)], c.seed)
    )


def emit_curves(sweep: SweepResult, out_dir: Path) -> Tuple[Path, Path]:
    """
    Write the summary table (axis value, method, task, ASR mean/std over seeds)
    and the long per-seed file that `load_curves` parses back.

    Raises:
        DomainError: If the sweep has no cells
        StoreError: If a file cannot be written
    """
    if not sweep.cells:
        raise DomainError("Cannot emit curves for an empty sweep")
    cells = sorted_cells(sweep)

    long_rows = []
    for cell in cells:
        report = cell.report
        for task, result in report.per_task.items():
            long_rows.append({
                "axis": sweep.axis.value,
                "axis_position": sweep.axis_values.index(cell.axis_value),
                "axis_value": json.dumps(cell.axis_value),
                "method": cell.method.value,
                "seed": cell.seed,
                "task": task.value,
                "successes": result.successes,
                "total": result.total,
                "label": report.label,
                "mode": report.mode.value,
                "shots": report.shots,
                "defense": report.defense.value,
                "split": report.split.value,
            })

    grouped: Dict[Tuple, List[Dict[str, float]]] = defaultdict(list)
    for cell in cells:
        key = (_method_order(cell.method), sweep.axis_values.index(cell.axis_value))
        grouped[key].append(report_cells(cell.report))
    summary_rows = []
    for (method_idx, position), reports in sorted(grouped.items()):
        for task in reports[0]:
            values = np.array([r[task] for r in reports if task in r])
            summary_rows.append({
                "axis_value": json.dumps(sweep.axis_values[position]),
                "method": list(AttackMethod)[method_idx].value,
                "task": task,
                "asr_mean": float(values.mean()),
                "asr_std": float(values.std(ddof=0)),
            })

    curves = _write(pd.DataFrame(summary_rows), out_dir / CURVES_FILE)
    long = _write(pd.DataFrame(long_rows), out_dir / LONG_FILE)
    logger.info(f"Wrote {len(summary_rows)} curve rows for axis {sweep.axis.value} to {out_dir}")
    return curves, long


def load_curves(long_path: Path) -> SweepResult:
    """Rebuild a SweepResult from the long per-seed file."""
    try:
        frame = pd.read_csv(
            long_path, dtype={"axis_value": str, "label": str}, keep_default_na=False
        )
    except OSError as e:
        raise StoreError(f"Failed to read {long_path}: {e}") from e
    if frame.empty:
        raise DomainError(f"{long_path} holds no rows")

    positions = frame[["axis_position", "axis_value"]].drop_duplicates().sort_values("axis_position")
    axis_values = [json.loads(v) for v in positions["axis_value"]]

    cells = []
    for (method, position, seed), rows in frame.groupby(
        ["method", "axis_position", "seed"], sort=False
    ):
        first = rows.iloc[0]
        per_task = {
            TaskName(r.task): TaskResult(successes=int(r.successes), total=int(r.total))
            for r in rows.itertuples()
        }
        report = ASRReport(
            label=first["label"],
            mode=first["mode"],
            shots=int(first["shots"]),
            defense=first["defense"],
            split=first["split"],
            per_task=per_task
        )
        cells.append(SweepCell(
            method=AttackMethod(method),
            axis_value=json.loads(first["axis_value"]),
            seed=int(seed),
            report=report
        ))
    return SweepResult(axis=SweepAxis(frame["axis"].iloc[0]), axis_values=axis_values, cells=cells)
