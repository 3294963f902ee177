"""Content-addressed run persistence with a SQLite index."""
import hashlib
import json
import logging
import os
import pickle
import threading
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from sqlalchemy import Column, DateTime, Integer, String, create_engine
from sqlalchemy.exc import OperationalError
from sqlalchemy.orm import declarative_base, sessionmaker
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from config import settings
from src.attack_engine import AttackRun, ResumeState
from src.exceptions import StoreError
from src.images import COLOR_WORDS, image_digest
from src.models import (
    AttackConfig, AttackMethod, ModelSettings, RunRecord, TaskName, TraceEntry, canonical_digest
)
from src.perturbation import PerturbationSnapshot, PromptPerturbation, VisualPerturbation
from src.tokenizer import DEFAULT_TARGET_TEXTS, build_vocab
from src.toy_vlm import Shot, ToyVLM, load_checkpoint, make_toy_vlm, save_checkpoint

logger = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1


def pretrain_responses(targets: Sequence[str]) -> Tuple[str, ...]:
    """Default target texts followed by any extra ones, without repeats."""
    return tuple(dict.fromkeys(list(DEFAULT_TARGET_TEXTS) + [t for t in targets if t]))


Base = declarative_base()


class RunDB(Base):
    """Index entry of a stored run."""
    __tablename__ = "runs"

    run_id = Column(String, primary_key=True)
    manifest_digest = Column(String, nullable=False, index=True)
    method = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    image_index = Column(Integer, default=0)
    label = Column(String, default="")
    created_at = Column(DateTime, default=datetime.utcnow)


def run_id_for(config: AttackConfig, model_id: str, image: torch.Tensor, shots: Sequence[Shot] = ()) -> str:
    """Digest of config, model and every input image."""
    h = hashlib.sha256()
    h.update(config.digest().encode())
    h.update(model_id.encode())
    h.update(image_digest(image).encode())
    for shot_image, shot_text in shots:
        h.update(image_digest(shot_image).encode())
        h.update(shot_text.encode())
    return h.hexdigest()[:32]


def compute_run_id(run: AttackRun) -> str:
    return run_id_for(run.config, run.model_id, run.clean_image, run.shots)


def _prompt_payload(prompt: PromptPerturbation) -> Dict[int, torch.Tensor]:
    return {int(i): t.clone() for i, t in prompt.entries.items()}


def run_to_payload(run: AttackRun) -> dict:
    resume = None
    if run.resume_state is not None:
        resume = {
            "step": run.resume_state.step,
            "delta": run.resume_state.delta.clone(),
            "prompt_deltas": _prompt_payload(run.resume_state.prompt),
            "rng_state": run.resume_state.rng_state,
        }
    return {
        "format_version": RUN_FORMAT_VERSION,
        "config": run.config.model_dump_json(),
        "model_id": run.model_id,
        "clean_image": run.clean_image.clone(),
        "epsilon": run.visual.epsilon,
        "delta": run.visual.delta.clone(),
        "prompt_deltas": _prompt_payload(run.prompt),
        "trace": [[t.step, t.prompt_index, t.loss] for t in run.trace],
        "shots": [{"image": image.clone(), "text": text} for image, text in run.shots],
        "checkpoints": {
            int(step): {"delta": snap.visual.delta.clone(), "prompt_deltas": _prompt_payload(snap.prompt)}
            for step, snap in run.checkpoints.items()
        },
        "resume": resume,
    }


def run_from_payload(payload: dict) -> AttackRun:
    config = AttackConfig.model_validate_json(payload["config"])
    epsilon = payload["epsilon"]
    resume = payload["resume"]
    return AttackRun(
        config=config,
        model_id=payload["model_id"],
        clean_image=payload["clean_image"],
        visual=VisualPerturbation(payload["delta"], epsilon),
        prompt=PromptPerturbation(dict(payload["prompt_deltas"])),
        trace=[TraceEntry(step=s, prompt_index=i, loss=l) for s, i, l in payload["trace"]],
        shots=[(shot["image"], shot["text"]) for shot in payload["shots"]],
        checkpoints={
            int(step): PerturbationSnapshot(
                visual=VisualPerturbation(snap["delta"], epsilon),
                prompt=PromptPerturbation(dict(snap["prompt_deltas"])),
                seed=config.seed,
                iteration=int(step)
            )
            for step, snap in payload["checkpoints"].items()
        },
        resume_state=None if resume is None else ResumeState(
            step=resume["step"],
            delta=resume["delta"],
            prompt=PromptPerturbation(dict(resume["prompt_deltas"])),
            rng_state=resume["rng_state"]
        )
    )


class RunStore:
    """Stores runs, models and reports under one root directory."""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root or settings.store_root)
        self.runs_dir = self.root / "runs"
        self.models_dir = self.root / "models"
        self.reports_dir = self.root / "reports"
        for directory in (self.runs_dir, self.models_dir, self.reports_dir):
            directory.mkdir(parents=True, exist_ok=True)

        self.engine = create_engine(f"sqlite:///{self.root / 'index.db'}", echo=False)
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(bind=self.engine)
        self._lock = threading.RLock()
        self._models: Dict[str, ToyVLM] = {}

        logger.info(f"Run store initialized at {self.root}")

    def run_path(self, run_id: str) -> Path:
        return self.runs_dir / f"{run_id}.pt"

    def has_run(self, run_id: str) -> bool:
        return self.run_path(run_id).exists()

    @retry(
        retry=retry_if_exception_type(OperationalError),
        stop=stop_after_attempt(5),
        wait=wait_exponential(multiplier=0.05, max=1.0),
        reraise=True
    )
    def _commit(self, action: Callable) -> None:
        db_session = self.SessionLocal()
        try:
            action(db_session)
            db_session.commit()
        except Exception:
            db_session.rollback()
            raise
        finally:
            db_session.close()

    def _write_atomic(self, payload: dict, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        try:
            torch.save(payload, tmp)
            os.replace(tmp, path)
        except OSError as e:
            raise StoreError(f"Failed to write {path}: {e}") from e

    def save_run(
        self,
        run: AttackRun,
        manifest_digest: str = "",
        image_index: int = 0,
        label: str = ""
    ) -> str:
        """
        Persist a run under its content address; an existing file is never rewritten.

        Returns:
            Run id
        """
        run_id = compute_run_id(run)
        with self._lock:
            if not self.has_run(run_id):
                self._write_atomic(run_to_payload(run), self.run_path(run_id))
                logger.info(f"Stored run {run_id}")

            def upsert(db_session):
                if db_session.get(RunDB, run_id) is None:
                    db_session.add(RunDB(
                        run_id=run_id,
                        manifest_digest=manifest_digest,
                        method=run.config.method.value,
                        seed=run.config.seed,
                        image_index=image_index,
                        label=label
                    ))

            self._commit(upsert)
        return run_id

    def load_run(self, run_id: str) -> AttackRun:
        """
        Reload a stored run bit-exactly.

        Raises:
            StoreError: If the run is missing or unreadable
        """
        path = self.run_path(run_id)
        if not path.exists():
            raise StoreError(f"Run not found: {run_id}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
            raise StoreError(f"Failed to read run {run_id}: {e}") from e
        if payload.get("format_version") != RUN_FORMAT_VERSION:
            raise StoreError(f"Unsupported run format in {path}")
        return run_from_payload(payload)

    def list_runs(self, manifest_digest: Optional[str] = None) -> List[RunRecord]:
        db_session = self.SessionLocal()
        try:
            query = db_session.query(RunDB)
            if manifest_digest is not None:
                query = query.filter(RunDB.manifest_digest == manifest_digest)
            return [
                RunRecord(
                    run_id=r.run_id,
                    manifest_digest=r.manifest_digest,
                    method=AttackMethod(r.method),
                    seed=r.seed,
                    image_index=r.image_index,
                    label=r.label,
                    created_at=r.created_at
                )
                for r in query.order_by(RunDB.created_at, RunDB.run_id).all()
            ]
        finally:
            db_session.close()

    def verify(self) -> int:
        """Drop index entries whose run file is missing; returns how many were removed."""
        removed = []

        def prune(db_session):
            for record in db_session.query(RunDB).all():
                if not self.has_run(record.run_id):
                    removed.append(record.run_id)
                    db_session.delete(record)

        with self._lock:
            self._commit(prune)
        if removed:
            logger.warning(f"Removed {len(removed)} dangling index entries")
        return len(removed)

    def _model_key(
        self,
        model_settings: ModelSettings,
        task_prompts: Mapping[TaskName, Sequence[str]],
        responses: Sequence[str]
    ) -> str:
        return canonical_digest({
            "model": model_settings.model_dump(mode="json"),
            "prompts": {TaskName(task).value: list(prompts) for task, prompts in sorted(task_prompts.items())},
            "responses": list(responses),
        })[:32]

    def model_path(
        self,
        model_settings: ModelSettings,
        task_prompts: Mapping[TaskName, Sequence[str]],
        targets: Sequence[str] = ()
    ) -> Path:
        """Checkpoint file of a model built from these settings, prompts and target texts."""
        key = self._model_key(model_settings, task_prompts, pretrain_responses(targets))
        return self.models_dir / f"{key}.pt"

    def get_model(
        self,
        model_settings: ModelSettings,
        task_prompts: Mapping[TaskName, Sequence[str]],
        targets: Sequence[str] = ()
    ) -> ToyVLM:
        """
        Load a cached ToyVLM, building and caching it on first use.

        The vocabulary covers the given prompts, the default and extra target
        texts and the caption words; every target text is also a pretraining response.
        """
        path = self.model_path(model_settings, task_prompts, targets)
        with self._lock:
            key = str(path)
            if key in self._models:
                return self._models[key]
            if path.exists():
                model = load_checkpoint(path)
            else:
                responses = pretrain_responses(targets)
                corpus = [p for prompts in task_prompts.values() for p in prompts]
                tokenizer = build_vocab(corpus, list(responses) + list(COLOR_WORDS))
                model = make_toy_vlm(
                    model_settings.spec,
                    model_settings.seed,
                    model_settings.pretrain_steps,
                    tokenizer=tokenizer,
                    prompts=task_prompts,
                    responses=responses
                )
                save_checkpoint(model, path)
            self._models[key] = model
            return model

    def save_report(self, document: dict, name: str) -> Path:
        """Write a JSON report named by its content digest; returns the path."""
        digest = canonical_digest(document)[:16]
        path = self.reports_dir / f"{name}-{digest}.json"
        if not path.exists():
            try:
                path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
            except OSError as e:
                raise StoreError(f"Failed to write report {path}: {e}") from e
        return path
