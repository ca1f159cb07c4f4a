"""Base data classes shared across the package."""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import math

import numpy as np


class Modality(str, Enum):
    AUDIO = 'audio'
    IMAGE = 'image'
    VIDEO = 'video'
    AV = 'av'

    @property
    def has_frames(self) -> bool:
        return self in (Modality.IMAGE, Modality.VIDEO, Modality.AV)

    @property
    def has_audio(self) -> bool:
        return self in (Modality.AUDIO, Modality.AV)

    @property
    def has_motion(self) -> bool:
        return self in (Modality.VIDEO, Modality.AV)


class Phase(str, Enum):
    STEP1 = 'step1'
    STEP2 = 'step2'
    STEP3 = 'step3'
    # linear-rescale regression baseline, modality heads
    BASELINE = 'baseline'


@dataclass(frozen=True)
class DatabaseSpec:
    """A named quality database."""
    name: str
    modality: Modality
    mos_range: Tuple[float, float]
    n_samples: int
    steps_per_epoch: int

    def __post_init__(self):
        lo, hi = self.mos_range
        if not lo < hi:
            raise ValueError(f"{self.name}: mos_range lower bound must be below upper bound")
        if self.n_samples < 1:
            raise ValueError(f"{self.name}: n_samples must be positive")
        if self.steps_per_epoch < 1:
            raise ValueError(f"{self.name}: steps_per_epoch must be positive")

    def contains(self, mos: float) -> bool:
        lo, hi = self.mos_range
        return lo <= mos <= hi

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'modality': self.modality.value,
            'mos_range': list(self.mos_range),
            'steps_per_epoch': self.steps_per_epoch,
        }


@dataclass(frozen=True, eq=False)
class Payload:
    """Decoded media: frames are (T, C, H, W) float32 in [0, 1]; waveform is mono."""
    frames: Optional[np.ndarray] = None
    frame_rate: Optional[float] = None
    waveform: Optional[np.ndarray] = None
    sample_rate: Optional[int] = None

    def equals(self, other: 'Payload') -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)
        return (same(self.frames, other.frames) and same(self.waveform, other.waveform)
                and self.frame_rate == other.frame_rate and self.sample_rate == other.sample_rate)


@dataclass(frozen=True)
class MediaSample:
    database: str
    sample_id: str
    modality: Modality
    mos: float
    media_path: Optional[Path] = None
    audio_path: Optional[Path] = None
    latent_quality: Optional[float] = None
    # in-memory media for synthetic databases; None means read from the locators
    payload: Optional[Payload] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Database:
    spec: DatabaseSpec
    samples: Tuple[MediaSample, ...]

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def modality(self) -> Modality:
        return self.spec.modality

    @property
    def sample_ids(self) -> Tuple[str, ...]:
        return tuple(s.sample_id for s in self.samples)

    def by_id(self) -> Dict[str, MediaSample]:
        return {s.sample_id: s for s in self.samples}

    def mos_of(self, sample_ids) -> np.ndarray:
        index = self.by_id()
        return np.array([index[i].mos for i in sample_ids], dtype=np.float64)


@dataclass(frozen=True)
class SplitAssignment:
    database: str
    seed: int
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-power mel grid (frames x bands) with its overlapping segments."""
    values: np.ndarray
    frame_hop: float
    segments: np.ndarray       # (S, segment_width, bands)
    segment_starts: Tuple[int, ...]
    log_floor: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MetricPair:
    srcc: float
    plcc: float
    n: int
    plcc_fitted: Optional[float] = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("A metric pair needs at least 2 samples")
        if not (math.isfinite(self.srcc) and math.isfinite(self.plcc)):
            raise ValueError("SRCC and PLCC must be finite")


@dataclass(frozen=True)
class EvalRow:
    database: str
    repeat_seed: Optional[int]
    metrics: MetricPair

    def to_dict(self) -> Dict[str, Any]:
        return {
            'database': self.database,
            'repeat': self.repeat_seed,
            'srcc': self.metrics.srcc,
            'plcc': self.metrics.plcc,
            'plcc_fitted': self.metrics.plcc_fitted,
            'n': self.metrics.n,
        }


@dataclass
class EvalReport:
    """Per-database metrics per repeat plus their arithmetic means."""
    rows: List[EvalRow] = field(default_factory=list)
    config_hash: str = ''
    checkpoint_id: str = ''
    kind: str = 'test'

    @property
    def databases(self) -> List[str]:
        seen = []
        for row in self.rows:
            if row.database not in seen:
                seen.append(row.database)
        return seen

    def means(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for name in self.databases:
            rows = [r.metrics for r in self.rows if r.database == name]
            fitted = [m.plcc_fitted for m in rows if m.plcc_fitted is not None]
            out[name] = {
                'srcc': float(np.mean([m.srcc for m in rows])),
                'plcc': float(np.mean([m.plcc for m in rows])),
                'plcc_fitted': float(np.mean(fitted)) if fitted else None,
                'repeats': len(rows),
            }
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'config_hash': self.config_hash,
            'checkpoint_id': self.checkpoint_id,
            'rows': [r.to_dict() for r in self.rows],
            'means': self.means(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        rows = [
            EvalRow(
                database=r['database'],
                repeat_seed=r['repeat'],
                metrics=MetricPair(srcc=r['srcc'], plcc=r['plcc'], n=r['n'],
                                   plcc_fitted=r.get('plcc_fitted')),
            )
            for r in data.get('rows', [])
        ]
        return cls(rows=rows, config_hash=data.get('config_hash', ''),
                   checkpoint_id=data.get('checkpoint_id', ''), kind=data.get('kind', 'test'))


@dataclass
class ErrorResult:
    """Standardized error result structure."""
    error: str
    kind: str = 'Error'
    suggestion: Optional[str] = None
    details: Optional[dict] = None

    def format_message(self) -> str:
        """Format the error message with colors and icons."""
        from .utils import Colors  # Import here to avoid circular dependency
        msg = [Colors.error(self.error)]
        if self.suggestion:
            msg.append(Colors.info(f"Suggestion: {self.suggestion}"))
        return "\n".join(msg)

    def to_dict(self) -> dict:
        """Machine-readable form printed on the CLI error line."""
        return {
            'error': self.error,
            'type': self.kind,
            'suggestion': self.suggestion,
            'details': self.details
        }
