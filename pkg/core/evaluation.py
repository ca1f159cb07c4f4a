"""Evaluation protocol: SRCC/PLCC, repeated 7:1:2 splits, cross-database tests."""
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union
import logging
import time

import numpy as np
import torch
from scipy.optimize import curve_fit

from config.config import RunConfig, config_hash
from .base import Database, EvalReport, EvalRow, MetricPair, Modality
from .media_data import split_database
from .model import PreparedInput, UNQAModel, checkpoint_digest, load_checkpoint
from .objectives import pearson, srcc_exact
from .operations import MetricsLog
from .training import (
    RUN_FILE,
    PreparedCache,
    checkpoint_path,
    planned_phases,
    run_full_pipeline,
)
from .utils import Colors, read_json, write_json
from .verification import OverlapError

logger = logging.getLogger(__name__)

EVAL_REPORT = 'eval_report.json'
CROSS_EVAL_REPORT = 'cross_eval_report.json'
COMPARISON_FILE = 'comparison.json'
COMPLEXITY_SAMPLES = 4  # timed test samples per database

# predict(database, sample_ids, repeat_seed) -> scores
Predictor = Callable[[Database, Sequence[str], Optional[int]], np.ndarray]


def logistic_4(x: np.ndarray, b1: float, b2: float, b3: float, b4: float) -> np.ndarray:
    """Monotone logistic from prediction scale to MOS scale."""
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def fit_logistic(predictions: np.ndarray, ground_truth: np.ndarray) -> Optional[np.ndarray]:
    """Least-squares logistic mapping of predictions; None if the fit fails."""
    spread = float(np.std(predictions)) or 1.0
    p0 = [float(np.max(ground_truth)), float(np.min(ground_truth)), float(np.mean(predictions)), spread]
    try:
        params, _ = curve_fit(logistic_4, predictions, ground_truth, p0=p0, maxfev=10000)
    except (RuntimeError, ValueError) as e:
        logger.warning(f"Logistic fit failed ({e}); using unmapped predictions")
        return None
    mapped = logistic_4(predictions, *params)
    if not np.all(np.isfinite(mapped)):
        logger.warning("Logistic fit produced non-finite values; using unmapped predictions")
        return None
    return mapped


def plcc(predictions, ground_truth, fit_logistic_map: bool = False) -> float:
    o = np.asarray(predictions, dtype=np.float64)
    s = np.asarray(ground_truth, dtype=np.float64)
    if o.shape != s.shape or o.size < 2:
        raise ValueError("PLCC needs two vectors of equal length >= 2")
    if fit_logistic_map and np.ptp(o) > 0:
        mapped = fit_logistic(o, s)
        if mapped is not None:
            o = mapped
    value = pearson(o, s)
    if value is None:
        logger.warning(f"PLCC undefined for constant input (n={o.size}); reporting 0")
        return 0.0
    return value


def srcc(predictions, ground_truth) -> float:
    return srcc_exact(predictions, ground_truth)


def metric_pair(predictions, ground_truth, fit_logistic_map: bool = False) -> MetricPair:
    """Both PLCC modes are computed; `plcc` follows the flag."""
    fitted = plcc(predictions, ground_truth, fit_logistic_map=True)
    plain = fitted if fit_logistic_map else plcc(predictions, ground_truth)
    return MetricPair(srcc=srcc(predictions, ground_truth), plcc=plain,
                      n=len(predictions), plcc_fitted=fitted)


def evaluate_predictor(predict: Predictor, databases: Sequence[Database], repeat_seeds: Sequence[int],
                       split: str = 'test', fit_logistic_map: bool = False) -> EvalReport:
    """Score each repeat's `split` of every database with any predictor."""
    if split not in ('train', 'val', 'test'):
        raise ValueError(f"Unknown split {split}")
    report = EvalReport()
    for seed in repeat_seeds:
        for db in databases:
            ids = getattr(split_database(db, seed), split)
            scores = np.asarray(predict(db, ids, seed), dtype=np.float64)
            report.rows.append(EvalRow(db.name, seed, metric_pair(scores, db.mos_of(ids), fit_logistic_map)))
    return report


def model_predictor(model: UNQAModel, cache: PreparedCache) -> Callable[[Database, Sequence[str]], np.ndarray]:
    def predict(database: Database, sample_ids: Sequence[str]) -> np.ndarray:
        with torch.no_grad():
            return model.score_batch(cache.batch(database.name, sample_ids)).double().numpy()
    return predict


def model_complexity(model: UNQAModel, samples: Sequence[PreparedInput]) -> Dict[str, Any]:
    """Parameters in use and mean scoring wall time per sample, by modality.

    Samples arrive prepared, so preprocessing is not timed.
    """
    branches = {name: sum(p.numel() for p in module.parameters())
                for name, module in model.extractor_modules().items() if name in model.active_branches()}
    heads = sum(p.numel() for p in model.heads.parameters())
    seconds = {}
    with torch.no_grad():
        for modality in Modality:
            chosen = [p for p in samples if p.modality == modality]
            if not chosen:
                continue
            start = time.perf_counter()
            for prepared in chosen:
                model(prepared)
            seconds[modality.value] = (time.perf_counter() - start) / len(chosen)
    return {'parameters': sum(branches.values()) + heads, 'branch_parameters': branches,
            'head_parameters': heads, 'seconds_per_sample': seconds}


def _final_checkpoint(run_dir: Path, config: RunConfig) -> Path:
    return checkpoint_path(run_dir, planned_phases(config)[-1])


def evaluate(config: RunConfig, databases: Sequence[Database], repeat_seeds: Optional[Sequence[int]] = None,
             checkpoint: Union[str, Path, None] = None, run_dir: Union[str, Path, None] = None,
             split: str = 'test') -> EvalReport:
    """Repeated-split evaluation.

    Without `checkpoint` every repeat retrains the full pipeline under the
    repeat's seed in `<run_dir>/repeat_<seed>`. With a checkpoint file that
    one model scores every repeat; with a directory each repeat loads
    `<checkpoint>/repeat_<seed>`'s final checkpoint and a missing one is an
    error.
    """
    run_dir = Path(run_dir or config.run_dir)
    seeds = list(repeat_seeds if repeat_seeds is not None else config.evaluation.repeat_seeds)
    if not seeds:
        raise ValueError("evaluate needs at least one repeat seed")
    cache = PreparedCache(config, databases)
    models: Dict[int, UNQAModel] = {}
    checkpoint = Path(checkpoint) if checkpoint is not None else None

    if checkpoint is not None and checkpoint.is_file():
        shared = load_checkpoint(checkpoint, config)
        models = {seed: shared for seed in seeds}
    for seed in seeds:
        if seed in models:
            continue
        repeat_config = replace(config, seed=seed)
        if checkpoint is not None:
            path = _final_checkpoint(checkpoint / f"repeat_{seed}", repeat_config)
            if not path.exists():
                raise FileNotFoundError(f"Eval-only mode: no checkpoint for repeat {seed} at {path}")
            models[seed] = load_checkpoint(path, repeat_config)
        else:
            logger.info(f"Repeat {seed}: training from scratch")
            models[seed] = run_full_pipeline(databases, repeat_config, run_dir / f"repeat_{seed}").model

    predictors = {seed: model_predictor(m, cache) for seed, m in models.items()}
    report = evaluate_predictor(lambda db, ids, seed: predictors[seed](db, ids), databases, seeds,
                                split=split, fit_logistic_map=config.evaluation.fit_logistic)
    report.config_hash = config_hash(config)
    report.checkpoint_id = (checkpoint_digest(models[seeds[0]]) if checkpoint is not None and checkpoint.is_file()
                            else str(checkpoint or run_dir))
    report.kind = split
    write_json(run_dir / EVAL_REPORT, report.to_dict())
    _log_means(report)

    timed = [cache.get(db.name, i) for db in databases
             for i in split_database(db, seeds[0]).test[:COMPLEXITY_SAMPLES]]
    complexity = model_complexity(models[seeds[0]], timed)
    MetricsLog(run_dir).add_record('complexity', phase=None, **complexity)
    timing = ', '.join(f"{k} {1000 * v:.2f} ms" for k, v in complexity['seconds_per_sample'].items())
    logger.info(f"Model uses {complexity['parameters']:,} parameters; per sample: {timing}")
    return report


def _training_sample_ids(checkpoint: Path) -> Optional[Dict[str, List[str]]]:
    run_file = checkpoint.parent.parent / RUN_FILE
    if not run_file.exists():
        return None
    return read_json(run_file).get('sample_ids')


def check_disjoint(held_out: Sequence[Database], training: Dict[str, Sequence[str]]) -> None:
    """Held-out databases must share neither a name nor a sample id with training data."""
    train_ids = {i for ids in training.values() for i in ids}
    for db in held_out:
        if db.name in training:
            raise OverlapError(f"{db.name} was used for training")
        shared = train_ids.intersection(db.sample_ids)
        if shared:
            raise OverlapError(f"{db.name} shares {len(shared)} sample ids with the training data, "
                               f"e.g. {sorted(shared)[0]}")


def cross_evaluate(checkpoint: Union[str, Path], held_out: Sequence[Database], config: RunConfig,
                   training_databases: Optional[Sequence[Database]] = None,
                   run_dir: Union[str, Path, None] = None) -> EvalReport:
    """Zero-shot scoring of whole held-out databases."""
    checkpoint = Path(checkpoint)
    if training_databases is not None:
        training = {db.name: db.sample_ids for db in training_databases}
    else:
        training = _training_sample_ids(checkpoint)
        if training is None:
            raise OverlapError(f"Cannot verify disjointness: no {RUN_FILE} next to {checkpoint}")
    check_disjoint(held_out, training)

    model = load_checkpoint(checkpoint, config)
    predict = model_predictor(model, PreparedCache(config, held_out))
    report = EvalReport(config_hash=config_hash(config), checkpoint_id=checkpoint_digest(model), kind='cross')
    for db in held_out:
        ids = db.sample_ids
        scores = predict(db, ids)
        report.rows.append(EvalRow(db.name, None, metric_pair(scores, db.mos_of(ids),
                                                              config.evaluation.fit_logistic)))
    write_json(Path(run_dir or config.run_dir) / CROSS_EVAL_REPORT, report.to_dict())
    _log_means(report)
    return report


def joint_vs_single(target: Database, others: Sequence[Database], config: RunConfig, seeds: Sequence[int],
                    run_dir: Union[str, Path, None] = None) -> List[Dict]:
    """Test SRCC on `target` after joint training versus training on `target` alone."""
    run_dir = Path(run_dir or config.run_dir)
    rows = []
    for seed in seeds:
        repeat_config = replace(config, seed=seed)
        joint = run_full_pipeline([target, *others], repeat_config, run_dir / f"joint_{seed}").model
        single = run_full_pipeline([target], repeat_config, run_dir / f"single_{seed}").model
        cache = PreparedCache(repeat_config, [target])
        ids = split_database(target, seed).test
        s = target.mos_of(ids)
        joint_srcc = srcc(model_predictor(joint, cache)(target, ids), s)
        single_srcc = srcc(model_predictor(single, cache)(target, ids), s)
        passed = joint_srcc >= single_srcc
        status = Colors.success('pass') if passed else Colors.warning('fail')
        logger.info(f"{target.name} seed {seed}: joint SRCC {joint_srcc:.4f} vs single {single_srcc:.4f} {status}")
        rows.append({'database': target.name, 'seed': seed, 'joint_srcc': joint_srcc,
                     'single_srcc': single_srcc, 'passed': passed})
    MetricsLog(run_dir).add_record('comparison', phase=None, rows=rows)
    write_json(run_dir / COMPARISON_FILE, {'database': target.name, 'rows': rows,
                                           'passes': sum(r['passed'] for r in rows)})
    return rows


def _log_means(report: EvalReport) -> None:
    for name, means in report.means().items():
        logger.info(f"{report.kind} {name}: SRCC {means['srcc']:.4f}, PLCC {means['plcc']:.4f} "
                    f"over {means['repeats']} repeat(s)")
