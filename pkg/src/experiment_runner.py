"""Experiment orchestration: attack grids, evaluation, sweeps and analysis artifacts."""
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from config import settings
from src.analysis import (
    coverage_points, decoding_report, emit_curves, project_2d, write_decoding,
    write_projection, write_trace
)
from src.asr_evaluator import ASREvaluator, aggregate, asr_table
from src.attack_engine import AttackEngine, AttackRun
from src.exceptions import ConfigurationError, StateError, StoreError
from src.images import LoadedImage, caption_shots, load_images
from src.models import (
    AggregateReport, ASRReport, AttackConfig, AttackMethod, AttackMode, DefenseConfig,
    EvalSplit, ExperimentManifest, Objective, ProjectionMethod, SweepAxis, SweepCell,
    SweepResult, parse_fraction
)
from src.prompt_suite import attack_prompts, load_suite
from src.run_store import RunStore, run_id_for
from src.toy_vlm import Shot, ToyVLM

logger = logging.getLogger(__name__)

ANALYSES = ("projection", "decoding", "trace")

# Seed offsets of the in-context example streams
TRAIN_SHOT_STREAM = 10_000
EVAL_SHOT_STREAM = 20_000


def load_manifest(path: Path) -> ExperimentManifest:
    """
    Read and validate a JSON manifest; every referenced path must exist.

    Raises:
        ConfigurationError: If the file is missing, malformed or names missing paths
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Manifest not found: {path}")
    try:
        manifest = ExperimentManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid manifest {path}: {e}") from e
    for task, prompt_path in manifest.suite.paths.items():
        if not Path(prompt_path).exists():
            raise ConfigurationError(f"Prompt file for {task.value} not found: {prompt_path}")
    return manifest


def apply_overrides(manifest: ExperimentManifest, overrides: Dict[str, object]) -> ExperimentManifest:
    """Replace attack-grid fields; the result is revalidated."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if not overrides:
        return manifest
    try:
        grid = type(manifest.grid).model_validate({**manifest.grid.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid override: {e}") from e
    return manifest.model_copy(update={"grid": grid})


def aggregate_key(label: str) -> str:
    """A report label without its seed and image parts; reports sharing it are aggregated."""
    return "|".join(part for part in label.split("|") if not part.startswith(("seed=", "img")))


@dataclass
class EvalOutcome:
    """Reports of one evaluation pass and where they were written."""
    reports: List[ASRReport] = field(default_factory=list)
    aggregates: List[AggregateReport] = field(default_factory=list)
    paths: List[Path] = field(default_factory=list)
    table: Optional[pd.DataFrame] = None


class ExperimentRunner:
    """Drives the attack engine and the evaluator from one manifest."""

    def __init__(
        self,
        manifest: ExperimentManifest,
        store: Optional[RunStore] = None,
        workers: Optional[int] = None,
        progress: bool = False
    ):
        self.manifest = manifest
        self.store = store or RunStore()
        self.workers = workers or settings.workers
        self.progress = progress

        self.suite = load_suite(
            manifest.suite.paths, manifest.suite.split_seed, manifest.suite.holdout_fraction
        )
        targets = [manifest.grid.target_text or ""]
        targets += [str(v) for v in manifest.sweep.get(SweepAxis.TARGET_TEXT, [])]
        self.model: ToyVLM = self.store.get_model(manifest.model, self.suite.tasks, targets)
        self.transfer_models = [
            self.store.get_model(m, self.suite.tasks, targets) for m in manifest.transfer_models
        ]
        self.images: List[LoadedImage] = load_images(
            manifest.images, size=self.model.spec.image_size, dtype=self.model.dtype
        )
        self.engine = AttackEngine(self.model, progress=progress)
        self.digest = manifest.digest()

    def objective(self, target_text: Optional[str] = None) -> Objective:
        grid = self.manifest.grid
        if grid.mode == AttackMode.TARGETED:
            return Objective(mode=grid.mode, target_text=target_text or grid.target_text)
        return Objective(mode=grid.mode, target_text=None)

    def train_shots(self, image_index: int) -> List[Shot]:
        count = self.manifest.grid.shots_at_train
        return caption_shots(
            TRAIN_SHOT_STREAM + image_index, count, self.model.spec.image_size, self.model.dtype
        )

    def eval_shots(self, count: int, image_index: int) -> List[Shot]:
        return caption_shots(
            EVAL_SHOT_STREAM + image_index, count, self.model.spec.image_size, self.model.dtype
        )

    def attack_config(self, method: AttackMethod, seed: int, **updates) -> AttackConfig:
        """AttackConfig for one grid cell; `updates` override grid values along a sweep axis."""
        grid = self.manifest.grid
        k = updates.pop("num_prompts", grid.num_prompts)
        prompts = attack_prompts(self.suite, k, seed)
        if method == AttackMethod.SINGLE_P:
            prompts = prompts[:1]
        values = {
            "method": method,
            "prompt_set": prompts,
            "epsilon": grid.epsilon,
            "alpha1": grid.alpha1,
            "alpha2": grid.alpha2,
            "iterations": grid.iterations,
            "update_interval": grid.update_interval,
            "seed": seed,
            "shots_at_train": grid.shots_at_train,
            "objective": self.objective(updates.pop("target_text", None)),
            "prompt_init": grid.prompt_init,
        }
        values.update(updates)
        try:
            return AttackConfig(**values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid attack config for {method.value}: {e}") from e

    def _label(self, method: AttackMethod, image_index: int, extra: str = "") -> str:
        return f"{self.manifest.experiment_id}/{method.value}/img{image_index}{extra}"

    def _attack_cell(self, method: AttackMethod, seed: int, image_index: int, **updates) -> Tuple[str, AttackRun]:
        config = self.attack_config(method, seed, **updates)
        image = self.images[image_index].pixels
        shots = self.train_shots(image_index)
        run_id = run_id_for(config, self.model.model_id, image, shots)
        if self.store.has_run(run_id):
            logger.info(f"Reusing stored run {run_id}")
            return run_id, self.store.load_run(run_id)
        run = self.engine.run(config, image, shots)
        stored_id = self.store.save_run(
            run, self.digest, image_index, self._label(method, image_index)
        )
        return stored_id, run

    def cells(self) -> List[Tuple[AttackMethod, int, int]]:
        grid = self.manifest.grid
        return list(itertools.product(grid.methods, grid.seeds, range(len(self.images))))

    def cmd_attack(self) -> List[str]:
        """
        Run every (method, seed, image) cell; stored cells are not recomputed.

        Returns:
            Run ids in cell order
        """
        cells = self.cells()
        logger.info(f"Attack grid {self.manifest.experiment_id}: {len(cells)} cells")
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results = list(pool.map(lambda cell: self._attack_cell(*cell)[0], cells))
        return results

    def attack_summary(self, run_ids: Sequence[str]) -> pd.DataFrame:
        rows = []
        for run_id in run_ids:
            run = self.store.load_run(run_id)
            rows.append({
                "run_id": run_id,
                "method": run.config.method.value,
                "seed": run.config.seed,
                "k": run.config.k,
                "steps": run.steps_done,
                "first_loss": run.trace[0].loss,
                "last_loss": run.trace[-1].loss,
            })
        return pd.DataFrame(rows)

    def _evaluate_image(
        self,
        model: ToyVLM,
        clean,
        adversarial,
        image_index: int,
        objective: Objective,
        shots_count: int,
        defense: DefenseConfig,
        label: str
    ) -> ASRReport:
        evaluation = self.manifest.evaluation
        return ASREvaluator(model, evaluation.strict).evaluate(
            clean,
            adversarial,
            self.suite,
            objective,
            shots=self.eval_shots(shots_count, image_index),
            defense=defense,
            split=evaluation.split,
            image_index=image_index,
            label=label
        )

    def evaluate_run(self, run: AttackRun, image_index: int, method_label: str) -> List[ASRReport]:
        """Reports of one run for every (model, shots, defense) combination."""
        objective = Objective(
            mode=run.config.objective.mode, target_text=run.config.objective.target_text
        )
        reports = []
        for model in [self.model] + self.transfer_models:
            if objective.mode == AttackMode.TARGETED and not model.tokenizer.covers(objective.target_text):
                raise ConfigurationError(
                    f"Target {objective.target_text!r} is outside {model.model_id}'s vocabulary"
                )
            for shots_count in self.manifest.evaluation.shots:
                for defense in self.manifest.evaluation.defenses:
                    label = f"{method_label}|{model.model_id}|shots={shots_count}|{defense.kind.value}"
                    reports.append(self._evaluate_image(
                        model, run.clean_image, run.adversarial_image, image_index,
                        objective, shots_count, defense, label
                    ))
        return reports

    def cmd_eval(self, run_ids: Optional[Sequence[str]] = None) -> EvalOutcome:
        """
        Evaluate stored runs (or, with no runs, the clean images themselves) and
        persist per-run reports plus per-row aggregates.

        Raises:
            StoreError: If a run id is unknown
        """
        outcome = EvalOutcome()
        if run_ids:
            records = {r.run_id: r for r in self.store.list_runs()}
            for run_id in run_ids:
                if not self.store.has_run(run_id):
                    raise StoreError(f"Run not found: {run_id}")
                run = self.store.load_run(run_id)
                image_index = records[run_id].image_index if run_id in records else 0
                run_label = f"{run.config.method.value}|seed={run.config.seed}|img{image_index}"
                reports = self.evaluate_run(run, image_index, run_label)
                for report in reports:
                    outcome.paths.append(self.store.save_report(
                        {"kind": "asr", "run_id": run_id, "config_digest": run.config.digest(),
                         "report": report.model_dump(mode="json")},
                        "asr"
                    ))
                outcome.reports.extend(reports)
        else:
            objective = self.objective()
            for image_index, image in enumerate(self.images):
                for shots_count in self.manifest.evaluation.shots:
                    for defense in self.manifest.evaluation.defenses:
                        label = (
                            f"clean|img{image_index}|{self.model.model_id}"
                            f"|shots={shots_count}|{defense.kind.value}"
                        )
                        outcome.reports.append(self._evaluate_image(
                            self.model, image.pixels, image.pixels, image_index,
                            objective, shots_count, defense, label
                        ))

        rows: Dict[str, object] = {report.label: report for report in outcome.reports}
        grouped: Dict[str, List[ASRReport]] = {}
        for report in outcome.reports:
            grouped.setdefault(aggregate_key(report.label), []).append(report)
        for label, reports in grouped.items():
            if len(reports) >= 2:
                summary = aggregate(reports, label)
                outcome.aggregates.append(summary)
                outcome.paths.append(self.store.save_report(
                    {"kind": "aggregate", "report": summary.model_dump(mode="json")}, "aggregate"
                ))
                rows[label] = summary
        if rows:
            outcome.table = asr_table(rows)
            table_path = self.store.reports_dir / f"{self.manifest.experiment_id}-table.csv"
            try:
                outcome.table.to_csv(table_path)
            except OSError as e:
                raise StoreError(f"Failed to write {table_path}: {e}") from e
            outcome.paths.append(table_path)
        logger.info(f"Evaluation wrote {len(outcome.paths)} files")
        return outcome

    def _axis_updates(self, axis: SweepAxis, value) -> Dict[str, object]:
        if axis == SweepAxis.PROMPT_COUNT:
            return {"num_prompts": int(value)}
        if axis == SweepAxis.EPSILON:
            return {"epsilon": float(parse_fraction(value))}
        if axis == SweepAxis.ALPHA2:
            return {"alpha2": float(parse_fraction(value))}
        if axis == SweepAxis.TARGET_TEXT:
            return {"target_text": str(value)}
        raise ConfigurationError(f"Axis {axis.value} has no per-value config update")

    def _sweep_report(self, run: AttackRun, image_index: int, label: str) -> ASRReport:
        evaluation = self.manifest.evaluation
        objective = Objective(
            mode=run.config.objective.mode, target_text=run.config.objective.target_text
        )
        return self._evaluate_image(
            self.model, run.clean_image, run.adversarial_image, image_index,
            objective, evaluation.shots[0], evaluation.defenses[0], label
        )

    def cmd_sweep(self, axis: SweepAxis, values: Optional[Sequence] = None) -> Tuple[SweepResult, Tuple[Path, Path]]:
        """
        Run the grid along one axis and emit curves.

        The iterations axis extends one run per (method, seed) through a resume chain.

        Raises:
            ConfigurationError: If the axis is unknown or has no values
        """
        try:
            axis = SweepAxis(axis)
        except ValueError as e:
            raise ConfigurationError(f"Unknown sweep axis: {axis}") from e
        values = list(values if values is not None else self.manifest.sweep.get(axis, []))
        if not values:
            raise ConfigurationError(f"No values for sweep axis {axis.value}")
        if axis in (SweepAxis.EPSILON, SweepAxis.ALPHA2):
            values = [float(parse_fraction(v)) for v in values]
        if axis in (SweepAxis.PROMPT_COUNT, SweepAxis.ITERATIONS):
            values = [int(v) for v in values]

        result = SweepResult(axis=axis, axis_values=values)
        grid = self.manifest.grid
        for method, seed in itertools.product(grid.methods, grid.seeds):
            for image_index in range(len(self.images)):
                if axis == SweepAxis.ITERATIONS:
                    result.cells.extend(self._iteration_chain(method, seed, image_index, values))
                    continue
                for value in values:
                    if axis == SweepAxis.PROMPT_COUNT and method == AttackMethod.SINGLE_P and value != 1:
                        continue
                    _, run = self._attack_cell(method, seed, image_index, **self._axis_updates(axis, value))
                    label = self._label(method, image_index, f"|{axis.value}={value}")
                    result.cells.append(SweepCell(
                        method=method, axis_value=value, seed=seed,
                        report=self._sweep_report(run, image_index, label)
                    ))

        out_dir = self.store.root / "sweeps" / f"{self.manifest.experiment_id}-{axis.value}"
        paths = emit_curves(result, out_dir)
        return result, paths

    def _iteration_chain(
        self,
        method: AttackMethod,
        seed: int,
        image_index: int,
        values: Sequence[int]
    ) -> List[SweepCell]:
        values = sorted(values)
        cells = []
        _, run = self._attack_cell(method, seed, image_index, iterations=values[0])
        for position, iterations in enumerate(values):
            if position > 0:
                run = self.engine.resume(run, iterations - run.steps_done)
                self.store.save_run(run, self.digest, image_index, self._label(method, image_index))
            label = self._label(method, image_index, f"|iterations={iterations}")
            cells.append(SweepCell(
                method=method, axis_value=iterations, seed=seed,
                report=self._sweep_report(run, image_index, label)
            ))
        return cells

    def cmd_analyze(
        self,
        run_id: str,
        what: Iterable[str] = ANALYSES,
        out_dir: Optional[Path] = None,
        projection: ProjectionMethod = ProjectionMethod.PCA
    ) -> Dict[str, Path]:
        """
        Write projection, decoding and loss-trace artifacts for one stored run.

        Raises:
            StateError: If decoding is requested for a run without prompt perturbations
        """
        what = list(what)
        unknown = set(what) - set(ANALYSES)
        if unknown:
            raise ConfigurationError(f"Unknown analyses: {sorted(unknown)}")
        run = self.store.load_run(run_id)
        out_dir = Path(out_dir or self.store.root / "analysis" / run_id)
        paths: Dict[str, Path] = {}

        if "decoding" in what and not run.prompt.entries:
            raise StateError(f"Run {run_id} ({run.config.method.value}) has no prompt perturbations to decode")

        if "trace" in what:
            paths["trace"] = write_trace(run.trace, out_dir / "trace.csv")
        if "decoding" in what:
            report = decoding_report(self.model, run.config.prompt_set, run.prompt)
            paths["decoding"] = write_decoding(report, self.model, out_dir / "decoding.csv")
            summary = {"fraction_original": report.fraction_original, "rows": len(report.rows)}
            summary_path = out_dir / "decoding_summary.json"
            summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
            paths["decoding_summary"] = summary_path
        if "projection" in what:
            held_out = [
                prompt
                for task in self.suite.ordered_tasks()
                for _, prompt in self.suite.prompts(task, EvalSplit.HOLDOUT)
            ][:max(run.config.k, 3)]
            points = coverage_points(self.model, run.config.prompt_set, held_out, run.prompt)
            projected = project_2d(points, projection, seed=run.config.seed)
            paths["projection"] = write_projection(projected, out_dir / f"projection_{projection.value}.csv")
        logger.info(f"Analysis of {run_id} wrote {sorted(paths)}")
        return paths


def render_reports(paths: Sequence[Path]) -> pd.DataFrame:
    """Re-render stored report files as one table."""
    rows: Dict[str, object] = {}
    for path in paths:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise StoreError(f"Failed to read report {path}: {e}") from e
        if document.get("kind") == "aggregate":
            item = AggregateReport.model_validate(document["report"])
        elif document.get("kind") == "asr":
            item = ASRReport.model_validate(document["report"])
        else:
            raise ConfigurationError(f"{path} is not a workbench report")
        key = item.label or Path(path).stem
        if key in rows:
            key = f"{key} ({Path(path).stem})"
        rows[key] = item
    if not rows:
        raise ConfigurationError("No reports to render")
    return asr_table(rows)
