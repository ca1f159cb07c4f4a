"""Core package for unified no-reference quality assessment."""
from .base import (
    Database,
    DatabaseSpec,
    EvalReport,
    MediaSample,
    MetricPair,
    Modality,
    Phase,
)
from .verification import (
    VerificationError,
    ManifestError,
    DegenerateBatchError,
    get_payload_validator
)
from .media_data import (
    DatabaseRegistry,
    generate_synthetic_database,
    load_manifest,
    write_manifest,
    split_database,
)
from .model import UNQAModel, build_model, compose_features, merge_heads, regress
from .objectives import combined_loss, rank_loss, srcc_exact, srcc_loss
from .training import build_schedule, run_full_pipeline
from .evaluation import cross_evaluate, evaluate, plcc
from .operations import MetricsLog
from .reporting import report

__all__ = [
    'Database',
    'DatabaseSpec',
    'EvalReport',
    'MediaSample',
    'MetricPair',
    'Modality',
    'Phase',
    'VerificationError',
    'ManifestError',
    'DegenerateBatchError',
    'get_payload_validator',
    'DatabaseRegistry',
    'generate_synthetic_database',
    'load_manifest',
    'write_manifest',
    'split_database',
    'UNQAModel',
    'build_model',
    'compose_features',
    'merge_heads',
    'regress',
    'combined_loss',
    'rank_loss',
    'srcc_exact',
    'srcc_loss',
    'build_schedule',
    'run_full_pipeline',
    'cross_evaluate',
    'evaluate',
    'plcc',
    'MetricsLog',
    'report',
]
