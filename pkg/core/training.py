"""Adaptive weighted task sampling and the three-step training strategy."""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import copy
import hashlib
import json
import logging

import numpy as np
import torch

from config.config import PHASES, PhaseConfig, RunConfig, config_hash
from .base import Database, Modality, Phase, SplitAssignment
from .media_data import split_database
from .model import (
    PreparedInput,
    UNQAModel,
    build_model,
    load_checkpoint,
    merge_heads,
    prepare_sample,
    save_checkpoint,
)
from .objectives import pearson, phase_loss, srcc_exact
from .operations import MetricsLog
from .utils import derive_seed, parameter_checksum, read_json, write_json
from .verification import ConfigHashError, DegenerateBatchError, UnknownDatabaseError

logger = logging.getLogger(__name__)

RUN_FILE = 'run.json'
CHECKPOINT_DIR = 'checkpoints'
PHASE_INDEX = {Phase.STEP1: 1, Phase.STEP2: 2, Phase.STEP3: 3, Phase.BASELINE: 4}


@dataclass(frozen=True)
class TrainingPool:
    """One database as the scheduler sees it."""
    name: str
    modality: Modality
    steps_per_epoch: int
    train_ids: Tuple[str, ...]


@dataclass(frozen=True)
class Draw:
    database: str
    sample_ids: Tuple[str, ...]


@dataclass(frozen=True)
class SamplingSchedule:
    epoch: int
    seed: int
    draws: Tuple[Draw, ...]

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for draw in self.draws:
            out[draw.database] = out.get(draw.database, 0) + 1
        return out

    @property
    def total(self) -> int:
        return len(self.draws)


def resolve_repeat_factor(pools: Sequence[TrainingPool], factor: Union[int, str]) -> int:
    """'auto': rounded ratio of mean visual steps to mean audio steps, at least 1."""
    if factor != 'auto':
        return int(factor)
    visual = [p.steps_per_epoch for p in pools if p.modality != Modality.AUDIO]
    audio = [p.steps_per_epoch for p in pools if p.modality == Modality.AUDIO]
    if not visual or not audio:
        return 1
    return max(1, int(round(np.mean(visual) / np.mean(audio))))


def adjusted_steps(pools: Sequence[TrainingPool], factor: Union[int, str]) -> Dict[str, int]:
    factor = resolve_repeat_factor(pools, factor)
    return {p.name: p.steps_per_epoch * (factor if p.modality == Modality.AUDIO else 1) for p in pools}


def _minibatches(train_ids: Sequence[str], count: int, batch_size: int,
                 rng: np.random.Generator) -> List[Tuple[str, ...]]:
    """`count` minibatches without replacement; reshuffle once fewer than batch_size remain."""
    ids = np.array(sorted(train_ids))
    batches, queue = [], []
    for _ in range(count):
        if len(queue) < batch_size:
            queue = list(ids[rng.permutation(len(ids))])
        batches.append(tuple(str(i) for i in queue[:batch_size]))
        queue = queue[batch_size:]
    return batches


def build_schedule(pools: Sequence[TrainingPool], batch_size: int, audio_repeat_factor: Union[int, str],
                   seed: int, epoch: int = 0) -> SamplingSchedule:
    """Seeded single-database draws with exact per-database counts for one epoch."""
    if not pools:
        raise ValueError("build_schedule needs at least one database")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if audio_repeat_factor != 'auto' and int(audio_repeat_factor) < 1:
        raise ValueError("audio_repeat_factor must be >= 1")
    for pool in pools:
        if pool.steps_per_epoch < 1:
            raise ValueError(f"{pool.name}: steps_per_epoch must be >= 1")
    smallest = min(pools, key=lambda p: len(p.train_ids))
    if batch_size > len(smallest.train_ids):
        raise ValueError(f"batch_size {batch_size} exceeds the train split of {smallest.name} "
                         f"({len(smallest.train_ids)} samples)")

    counts = adjusted_steps(pools, audio_repeat_factor)
    rng = np.random.default_rng([seed, epoch])
    queues = {}
    for index, pool in enumerate(pools):
        pool_rng = np.random.default_rng([seed, epoch, index + 1])
        queues[pool.name] = iter(_minibatches(pool.train_ids, counts[pool.name], batch_size, pool_rng))
    slots = [p.name for p in pools for _ in range(counts[p.name])]
    order = rng.permutation(len(slots))
    draws = tuple(Draw(slots[i], next(queues[slots[i]])) for i in order)
    return SamplingSchedule(epoch=epoch, seed=seed, draws=draws)


class PreparedCache:
    """Preprocessed inputs, computed once per sample."""

    def __init__(self, config: RunConfig, databases: Sequence[Database]):
        self.config = config
        self._samples = {(db.name, s.sample_id): s for db in databases for s in db.samples}
        self._prepared: Dict[Tuple[str, str], PreparedInput] = {}

    def get(self, database: str, sample_id: str) -> PreparedInput:
        key = (database, sample_id)
        if key not in self._prepared:
            if key not in self._samples:
                raise UnknownDatabaseError(f"Sample {sample_id} of {database} is not registered for training")
            self._prepared[key] = prepare_sample(self._samples[key], self.config)
        return self._prepared[key]

    def batch(self, database: str, sample_ids: Sequence[str]) -> List[PreparedInput]:
        return [self.get(database, i) for i in sample_ids]


@dataclass(frozen=True)
class PhaseOutcome:
    phase: Phase
    best_epoch: Optional[int]
    best_val_srcc: Optional[float]
    steps: int
    skipped_batches: int


class Trainer:
    """Shared state of one training run: databases, splits, targets, cache and log."""

    def __init__(self, config: RunConfig, databases: Sequence[Database], metrics: Optional[MetricsLog] = None,
                 cache: Optional[PreparedCache] = None, targets: Optional[Dict[str, Dict[str, float]]] = None):
        if not databases:
            raise ValueError("Training needs at least one database")
        names = [db.name for db in databases]
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate database names: {names}")
        self.config = config
        self.databases = list(databases)
        self.by_name = {db.name: db for db in self.databases}
        self.splits: Dict[str, SplitAssignment] = {db.name: split_database(db, config.seed)
                                                    for db in self.databases}
        self.metrics = metrics
        self.cache = cache or PreparedCache(config, self.databases)
        self.targets = targets or {db.name: {s.sample_id: s.mos for s in db.samples} for db in self.databases}

    def pools(self) -> List[TrainingPool]:
        return [TrainingPool(db.name, db.modality, db.spec.steps_per_epoch, self.splits[db.name].train)
                for db in self.databases]

    def target_tensor(self, database: str, sample_ids: Sequence[str], dtype: torch.dtype) -> torch.Tensor:
        if database not in self.targets:
            raise UnknownDatabaseError(f"Draw from unregistered database {database}")
        values = self.targets[database]
        return torch.tensor([values[i] for i in sample_ids], dtype=dtype)

    def log(self, kind: str, **fields) -> None:
        if self.metrics is not None:
            self.metrics.add_record(kind, **fields)

    def validate(self, model: UNQAModel, phase_config: PhaseConfig) -> Dict[str, Dict[str, Optional[float]]]:
        """Validation SRCC, PLCC and phase loss per database."""
        results = {}
        with torch.no_grad():
            for db in self.databases:
                ids = self.splits[db.name].val
                if len(ids) < 2:
                    results[db.name] = {'srcc': None, 'plcc': None, 'loss': None}
                    continue
                o = model.score_batch(self.cache.batch(db.name, ids))
                s = self.target_tensor(db.name, ids, o.dtype)
                try:
                    loss = float(phase_loss(phase_config.loss, o, s, phase_config.soft_rank_tau))
                except DegenerateBatchError:
                    loss = None
                plcc = pearson(o.numpy(), s.numpy())
                results[db.name] = {'srcc': srcc_exact(o, s), 'plcc': 0.0 if plcc is None else plcc,
                                    'loss': loss}
        return results

    def train_phase(self, model: UNQAModel, phase_config: PhaseConfig, phase: Phase) -> PhaseOutcome:
        """Scheduled minibatch training with best-validation selection."""
        seed = derive_seed(self.config.seed, PHASE_INDEX[phase])
        if self.metrics is not None:
            self.metrics.current_phase = phase.value
        if phase_config.trainable == 'heads':
            for module in model.extractor_modules().values():
                module.requires_grad_(False)
            parameters = list(model.heads.parameters())
        else:
            parameters = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(parameters, lr=phase_config.learning_rate)
        pools = self.pools()
        skip_degenerate = phase_config.loss == 'srcc_soft'

        best_state, best_epoch, best_srcc = None, None, None
        step = skipped = 0
        for epoch in range(phase_config.epochs):
            schedule = build_schedule(pools, phase_config.batch_size, phase_config.audio_repeat_factor,
                                      seed, epoch)
            self.log('schedule', epoch=epoch, counts=schedule.counts(), total=schedule.total)
            losses = []
            for draw in schedule.draws:
                o = model.score_batch(self.cache.batch(draw.database, draw.sample_ids))
                s = self.target_tensor(draw.database, draw.sample_ids, o.dtype)
                try:
                    loss = phase_loss(phase_config.loss, o, s, phase_config.soft_rank_tau)
                except DegenerateBatchError as e:
                    if not skip_degenerate:
                        raise
                    logger.warning(f"Skipping {draw.database} batch at step {step}: {e}")
                    skipped += 1
                    continue
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss))
                if self.metrics is not None:
                    self.metrics.step(step, draw.database, float(loss), epoch)
                step += 1

            val = self.validate(model, phase_config)
            scores = [v['srcc'] for v in val.values() if v['srcc'] is not None]
            mean_srcc = float(np.mean(scores)) if scores else None
            selected = best_state is None or (mean_srcc is not None and
                                              (best_srcc is None or mean_srcc > best_srcc))
            if selected:
                best_state = copy.deepcopy(model.state_dict())
                best_epoch, best_srcc = epoch, mean_srcc
            train_loss = float(np.mean(losses)) if losses else float('nan')
            if self.metrics is not None:
                self.metrics.epoch(epoch, train_loss, val, selected)
            logger.info(f"{phase.value} epoch {epoch + 1}/{phase_config.epochs}: train loss {train_loss:.4f}, "
                        f"mean val SRCC {mean_srcc if mean_srcc is None else round(mean_srcc, 4)}")

        if best_state is not None:
            model.load_state_dict(best_state)
        return PhaseOutcome(phase, best_epoch, best_srcc, step, skipped)


def _trainer_for(model: UNQAModel, databases: Sequence[Database], trainer: Optional[Trainer]) -> Trainer:
    return trainer if trainer is not None else Trainer(model.config, databases)


def _seed_phase(config: RunConfig, phase: Phase) -> None:
    torch.manual_seed(derive_seed(config.seed, PHASE_INDEX[phase], 0))


def run_step1(model: UNQAModel, databases: Sequence[Database], phase_config: PhaseConfig,
              trainer: Optional[Trainer] = None) -> UNQAModel:
    """Pretrain all branches with one head per database on absolute MOS."""
    if model.phase != Phase.STEP1:
        raise ValueError(f"run_step1 expects a step1 model, got {model.phase.value}")
    trainer = _trainer_for(model, databases, trainer)
    for db in trainer.databases:
        model.head_for(db.name, db.modality)
    _seed_phase(model.config, Phase.STEP1)
    trainer.train_phase(model, phase_config, Phase.STEP1)
    return model


def _modality_model(model: UNQAModel, phase: Phase) -> UNQAModel:
    if model.phase != Phase.STEP1:
        return model
    if model.database_heads():
        return merge_heads(model)
    logger.warning("No database-specific heads to merge; starting from fresh modality heads")
    model.install_modality_heads(phase)
    return model


def run_step2(model: UNQAModel, databases: Sequence[Database], phase_config: PhaseConfig,
              trainer: Optional[Trainer] = None) -> UNQAModel:
    """Merge heads per modality, then train everything with the soft SRCC loss."""
    trainer = _trainer_for(model, databases, trainer)
    _seed_phase(model.config, Phase.STEP2)
    model = _modality_model(model, Phase.STEP2)
    model.phase = Phase.STEP2
    trainer.train_phase(model, phase_config, Phase.STEP2)
    return model


def run_step3(model: UNQAModel, databases: Sequence[Database], phase_config: PhaseConfig,
              trainer: Optional[Trainer] = None) -> UNQAModel:
    """Freeze the feature extractors and refine the modality heads."""
    trainer = _trainer_for(model, databases, trainer)
    _seed_phase(model.config, Phase.STEP3)
    model = _modality_model(model, Phase.STEP3)
    model.phase = Phase.STEP3
    frozen = {name: parameter_checksum(m) for name, m in model.extractor_modules().items()}
    trainer.train_phase(model, replace(phase_config, trainable='heads'), Phase.STEP3)
    for name, module in model.extractor_modules().items():
        if parameter_checksum(module) != frozen[name]:
            raise RuntimeError(f"{name} extractor changed during step3")
    return model


def lrs_targets(databases: Sequence[Database]) -> Dict[str, Dict[str, float]]:
    """MOS of every database mapped linearly onto [0, 1] via its declared range."""
    out = {}
    for db in databases:
        lo, hi = db.spec.mos_range
        out[db.name] = {s.sample_id: (s.mos - lo) / (hi - lo) for s in db.samples}
    return out


def baseline_phase_config(config: RunConfig) -> PhaseConfig:
    step1 = config.phases['step1']
    return PhaseConfig('baseline', step1.epochs, learning_rate=step1.learning_rate,
                       batch_size=step1.batch_size, loss='mse', trainable='all', audio_repeat_factor=1)


def run_lrs_baseline(model: UNQAModel, databases: Sequence[Database], phase_config: PhaseConfig,
                     trainer: Optional[Trainer] = None) -> UNQAModel:
    """One joint phase on [0, 1]-rescaled MOS with modality heads and MSE."""
    if trainer is None:
        trainer = Trainer(model.config, databases, targets=lrs_targets(databases))
    _seed_phase(model.config, Phase.BASELINE)
    if model.phase != Phase.BASELINE:
        model.install_modality_heads(Phase.BASELINE)
    trainer.train_phase(model, phase_config, Phase.BASELINE)
    return model


@dataclass
class PipelineResult:
    model: UNQAModel
    final_checkpoint: Path
    phases_run: List[str] = field(default_factory=list)
    phases_resumed: List[str] = field(default_factory=list)


def planned_phases(config: RunConfig) -> List[str]:
    if config.strategy == 'lrs':
        return [Phase.BASELINE.value]
    phases = [p for p in PHASES if p not in config.skip_steps]
    if not phases:
        raise ValueError("skip_steps removes every training step")
    return phases


def checkpoint_path(run_dir: Path, phase: str) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"{phase}.pt"


def data_fingerprint(databases: Sequence[Database]) -> str:
    """SHA-256 over the databases in training order: specs, sample ids and MOS."""
    sha = hashlib.sha256()
    for db in databases:
        sha.update(json.dumps(db.spec.to_dict(), sort_keys=True, default=str).encode('utf-8'))
        for sample in db.samples:
            sha.update(f"{sample.sample_id}={sample.mos!r};".encode('utf-8'))
    return sha.hexdigest()


def _check_run_file(run_dir: Path, config: RunConfig, databases: Sequence[Database]) -> None:
    """Record config hash and data fingerprint; an existing record must match both."""
    path = run_dir / RUN_FILE
    expected = config_hash(config)
    fingerprint = data_fingerprint(databases)
    if path.exists():
        run = read_json(path)
        recorded = run.get('config_hash')
        if recorded != expected:
            raise ConfigHashError(f"{run_dir} was started under config {str(recorded)[:12]}, "
                                  f"current config is {expected[:12]}")
        if run.get('data_fingerprint') != fingerprint:
            raise ConfigHashError(f"{run_dir} was started on other data "
                                  f"(recorded {sorted(run.get('sample_ids', {}))}, "
                                  f"now {[db.name for db in databases]}); specs, sample ids or MOS differ")
        return
    write_json(path, {
        'name': config.name, 'config_hash': expected, 'data_fingerprint': fingerprint,
        'strategy': config.strategy, 'seed': config.seed,
        'databases': [db.spec.to_dict() for db in databases], 'phases': planned_phases(config),
        'sample_ids': {db.name: list(db.sample_ids) for db in databases},
    })


def run_full_pipeline(databases: Sequence[Database], config: RunConfig,
                      run_dir: Union[str, Path, None] = None) -> PipelineResult:
    """step1 -> step2 -> step3 (or the lrs baseline) with a checkpoint per step.

    Phases whose checkpoint already exists in `run_dir` are loaded instead of
    retrained, so an interrupted run resumes at the last completed step.
    """
    run_dir = Path(run_dir or config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _check_run_file(run_dir, config, databases)
    metrics = MetricsLog(run_dir)
    targets = lrs_targets(databases) if config.strategy == 'lrs' else None
    trainer = Trainer(config, databases, metrics=metrics, targets=targets)
    runners = {'step1': run_step1, 'step2': run_step2, 'step3': run_step3, 'baseline': run_lrs_baseline}

    phases = planned_phases(config)
    # without step1 there is nothing to merge; later steps start from fresh modality heads
    specs = [db.spec for db in databases] if Phase.STEP1.value in phases else []
    model = build_model(config, specs)
    for db in databases:
        model.constituents(db.modality)
    result = PipelineResult(model=model, final_checkpoint=Path())
    for phase in phases:
        path = checkpoint_path(run_dir, phase)
        if path.exists():
            logger.info(f"Resuming: loading completed {phase} checkpoint {path}")
            model = load_checkpoint(path, config)
            result.phases_resumed.append(phase)
        else:
            phase_config = baseline_phase_config(config) if phase == 'baseline' else config.phase(phase)
            metrics.current_phase = phase
            metrics.add_record('phase', status='started', epochs=phase_config.epochs)
            model = runners[phase](model, databases, phase_config, trainer)
            save_checkpoint(model, path)
            last = [r for r in metrics.records('epoch', phase) if r['selected']]
            best = last[-1]['val'] if last else {}
            scores = [v['srcc'] for v in best.values() if v.get('srcc') is not None]
            metrics.add_record('phase', status='completed', epochs=phase_config.epochs,
                               best_val_srcc=float(np.mean(scores)) if scores else float('nan'))
            result.phases_run.append(phase)
        result.final_checkpoint = path
    result.model = model
    logger.info(f"Final checkpoint: {result.final_checkpoint}")
    return result
