# Run configuration
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

# Defaults - override with environment variables
RUN_DIR = os.getenv('UNQA_RUN_DIR', 'runs/default')
DATA_DIR = os.getenv('UNQA_DATA_DIR', 'data')
SEED = int(os.getenv('UNQA_SEED', '0'))
LOG_LEVEL = os.getenv('UNQA_LOG_LEVEL', 'INFO')

# Preprocessing geometry
SHORT_SIDE = 520          # shortest side after aspect-preserving resize
CROP_SIZE = 384           # center crop fed to the spatial branch
MOTION_SIZE = 224         # square frame size fed to the motion branch
KEY_FRAME_RATE = 1.0      # spatial key frames per second of video
CHUNK_SECONDS = 1.0       # motion chunk length, non-overlapping

# Mel spectrogram
SAMPLE_RATE = 16000
MEL_WINDOW_SECONDS = 0.020
MEL_HOP_SECONDS = 0.010
MEL_BANDS = 48
MEL_FLOOR = 1e-10
SEGMENT_WIDTH = 15
SEGMENT_OVERLAP = 0.5

# Branches
BACKBONE_CHANNELS = (8, 16, 32, 64)
BACKBONE_STRIDES = (4, 2, 2, 2)
MHSA_HEADS = 4
MHSA_EMBED_DIM = 32
MOTION_DIM = 256
MOTION_SEED = 1234
AUDIO_DIM = 64
AUDIO_HEADS = 4
AUDIO_MAX_SEGMENTS = 512

# Training
EPOCHS = (20, 10, 10)
LEARNING_RATE = float(os.getenv('UNQA_LEARNING_RATE', '1e-5'))
BATCH_SIZE = int(os.getenv('UNQA_BATCH_SIZE', '8'))
AUDIO_REPEAT_FACTOR = 4
SOFT_RANK_TAU = 0.1

# Evaluation
REPEATS = 10
SYNTHETIC_MOS_NOISE = 0.02  # fraction of the MOS range width

PHASES = ('step1', 'step2', 'step3')
STRATEGIES = ('unqa', 'wts', 'lrs')
BRANCHES = ('spatial', 'motion', 'audio')
HEAD_LAYOUTS = ('modality', 'single')
FUSIONS = ('mhsa', 'none')


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    window_seconds: float = MEL_WINDOW_SECONDS
    hop_seconds: float = MEL_HOP_SECONDS
    n_mels: int = MEL_BANDS
    floor: float = MEL_FLOOR
    segment_width: int = SEGMENT_WIDTH
    segment_overlap: float = SEGMENT_OVERLAP

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_seconds))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_seconds))

    def __post_init__(self):
        if not 0.0 <= self.segment_overlap < 1.0:
            raise ValueError("segment_overlap must lie in [0, 1)")
        if self.segment_width < 1:
            raise ValueError("segment_width must be >= 1")

    @property
    def segment_hop(self) -> int:
        """Hop between segment starts, rounded down.

        Consecutive segments therefore share at least the configured fraction:
        width 15 at overlap 0.5 gives hop 7 and 8 shared frames.
        """
        return max(1, int(self.segment_width * (1.0 - self.segment_overlap)))


@dataclass(frozen=True)
class PreprocessConfig:
    short_side: int = SHORT_SIDE
    crop_size: int = CROP_SIZE
    motion_size: int = MOTION_SIZE
    key_frame_rate: float = KEY_FRAME_RATE
    chunk_seconds: float = CHUNK_SECONDS


@dataclass(frozen=True)
class BackboneConfig:
    """Toy spatial backbone plus the MHSA fusion block."""
    channels: Tuple[int, ...] = BACKBONE_CHANNELS
    strides: Tuple[int, ...] = BACKBONE_STRIDES
    mhsa_heads: int = MHSA_HEADS
    embed_dim: int = MHSA_EMBED_DIM
    # 1-based stage indices fed to the fusion; None taps every stage
    tapped_stages: Optional[Tuple[int, ...]] = None
    in_channels: int = 3
    # 'none' concatenates the pooled stage maps without attention
    fusion: str = 'mhsa'

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"Unknown fusion {self.fusion}; expected one of {FUSIONS}")
        if len(self.channels) < 2:
            raise ValueError("Backbone needs at least 2 stages")
        if len(self.strides) != len(self.channels):
            raise ValueError("One stride per stage is required")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ValueError("Channel counts and strides must be >= 1")
        if self.embed_dim % self.mhsa_heads:
            raise ValueError(
                f"MHSA head count {self.mhsa_heads} must divide embedding width {self.embed_dim}"
            )
        for stage in self.stages:
            if not 1 <= stage <= self.n_stages:
                raise ValueError(f"Tapped stage {stage} outside 1..{self.n_stages}")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def stages(self) -> Tuple[int, ...]:
        if self.tapped_stages is None:
            return tuple(range(1, self.n_stages + 1))
        return tuple(sorted(self.tapped_stages))

    @property
    def fused_channels(self) -> int:
        return sum(self.channels[i - 1] for i in self.stages)

    @property
    def feature_width(self) -> int:
        return 2 * self.fused_channels


# ConvNeXt-V2-Nano stage widths, last three stages tapped: 160 + 320 + 640 = 1120
NANO_BACKBONE = BackboneConfig(
    channels=(80, 160, 320, 640),
    strides=(4, 2, 2, 2),
    mhsa_heads=8,
    embed_dim=256,
    tapped_stages=(2, 3, 4),
)


@dataclass(frozen=True)
class MotionConfig:
    dim: int = MOTION_DIM
    hidden_channels: int = 16
    seed: int = MOTION_SEED


@dataclass(frozen=True)
class AudioConfig:
    dim: int = AUDIO_DIM
    heads: int = AUDIO_HEADS
    conv_channels: Tuple[int, int] = (8, 16)
    max_segments: int = AUDIO_MAX_SEGMENTS

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"Audio head count {self.heads} must divide width {self.dim}")


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    epochs: int
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    loss: str = 'combined'
    trainable: str = 'all'  # 'all' or 'heads'
    audio_repeat_factor: Union[int, str] = AUDIO_REPEAT_FACTOR
    soft_rank_tau: float = SOFT_RANK_TAU

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ('combined', 'srcc_soft', 'mse'):
            raise ValueError(f"Unknown loss {self.loss}")
        if self.trainable not in ('all', 'heads'):
            raise ValueError(f"Unknown trainable set {self.trainable}")
        if self.phase == 'step3' and self.trainable != 'heads':
            raise ValueError("step3 must train the regression heads only")
        if self.phase == 'step1' and self.loss != 'combined':
            raise ValueError("step1 trains with the combined loss")
        if self.phase in ('step2', 'step3') and self.loss != 'srcc_soft':
            raise ValueError(f"{self.phase} trains with the soft SRCC loss")
        if isinstance(self.audio_repeat_factor, str):
            if self.audio_repeat_factor != 'auto':
                raise ValueError("audio_repeat_factor must be a positive integer or 'auto'")
        elif self.audio_repeat_factor < 1:
            raise ValueError("audio_repeat_factor must be >= 1")


def default_phase_configs(
    epochs: Tuple[int, int, int] = EPOCHS,
    learning_rate: float = LEARNING_RATE,
    batch_size: int = BATCH_SIZE,
    audio_repeat_factor: Union[int, str] = AUDIO_REPEAT_FACTOR,
) -> Dict[str, PhaseConfig]:
    """Phase configs as the three-step strategy prescribes."""
    common = dict(learning_rate=learning_rate, batch_size=batch_size,
                  audio_repeat_factor=audio_repeat_factor)
    return {
        'step1': PhaseConfig('step1', epochs[0], loss='combined', trainable='all', **common),
        'step2': PhaseConfig('step2', epochs[1], loss='srcc_soft', trainable='all', **common),
        'step3': PhaseConfig('step3', epochs[2], loss='srcc_soft', trainable='heads', **common),
    }


@dataclass(frozen=True)
class EvaluationConfig:
    repeats: int = REPEATS
    fit_logistic: bool = False
    base_seed: int = 0

    @property
    def repeat_seeds(self) -> List[int]:
        return [self.base_seed + i for i in range(self.repeats)]


@dataclass(frozen=True)
class SyntheticDatabaseConfig:
    """One synthetic database to generate for a run."""
    name: str
    modality: str
    n_samples: int
    families: Tuple[str, ...]
    seed: int = 0
    mos_range: Tuple[float, float] = (1.0, 5.0)
    mos_noise: float = SYNTHETIC_MOS_NOISE
    height: int = 48
    width: int = 64
    n_frames: int = 8
    frame_rate: float = 4.0
    duration: float = 1.0
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class RunConfig:
    name: str = 'default'
    run_dir: str = RUN_DIR
    data_dir: str = DATA_DIR
    seed: int = SEED
    strategy: str = 'unqa'
    manifests: Tuple[str, ...] = ()
    synthetic: Tuple[SyntheticDatabaseConfig, ...] = ()
    held_out_manifests: Tuple[str, ...] = ()
    held_out_synthetic: Tuple[SyntheticDatabaseConfig, ...] = ()
    skip_steps: Tuple[str, ...] = ()
    disabled_branches: Tuple[str, ...] = ()
    head_layout: str = 'modality'
    phases: Dict[str, PhaseConfig] = field(default_factory=default_phase_configs)
    mel: MelConfig = field(default_factory=MelConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown strategy {self.strategy}; expected one of {STRATEGIES}")
        unknown = set(self.skip_steps) - set(PHASES)
        if unknown:
            raise ValueError(f"Unknown steps in skip_steps: {sorted(unknown)}")
        unknown = set(self.disabled_branches) - set(BRANCHES)
        if unknown:
            raise ValueError(f"Unknown branches in disabled_branches: {sorted(unknown)}")
        if set(self.disabled_branches) == set(BRANCHES):
            raise ValueError("disabled_branches removes every feature branch")
        if self.head_layout not in HEAD_LAYOUTS:
            raise ValueError(f"Unknown head_layout {self.head_layout}; expected one of {HEAD_LAYOUTS}")
        missing = set(PHASES) - set(self.phases)
        if missing:
            raise ValueError(f"Missing phase configs: {sorted(missing)}")

    def phase(self, name: str) -> PhaseConfig:
        config = self.phases[name]
        if self.strategy == 'wts' and config.audio_repeat_factor != 1:
            config = replace(config, audio_repeat_factor=1)
        return config


def _tuple(value):
    return tuple(value) if isinstance(value, list) else value


def _build(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**{k: _tuple(v) for k, v in data.items()})


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from parsed JSON."""
    data = dict(data)
    kwargs: Dict[str, Any] = {}
    nested = {
        'mel': MelConfig,
        'preprocess': PreprocessConfig,
        'backbone': BackboneConfig,
        'motion': MotionConfig,
        'audio': AudioConfig,
        'evaluation': EvaluationConfig,
    }
    for key, cls in nested.items():
        if key in data:
            kwargs[key] = _build(cls, data.pop(key))
    for key in ('synthetic', 'held_out_synthetic'):
        if key in data:
            kwargs[key] = tuple(_build(SyntheticDatabaseConfig, d) for d in data.pop(key))
    if 'phases' in data:
        phases = default_phase_configs()
        for name, overrides in data.pop('phases').items():
            if name not in phases:
                raise ValueError(f"Unknown phase {name}")
            phases[name] = replace(phases[name], **{k: _tuple(v) for k, v in overrides.items()})
        kwargs['phases'] = phases
    for key, value in data.items():
        kwargs[key] = _tuple(value)
    return _build(RunConfig, kwargs)


def _apply_env_overrides(config: RunConfig) -> RunConfig:
    """Override top-level scalar fields from UNQA_<FIELD> variables."""
    overrides = {}
    for f in fields(RunConfig):
        value = os.getenv(f'UNQA_{f.name.upper()}')
        if value is None:
            continue
        current = getattr(config, f.name)
        if isinstance(current, bool):
            overrides[f.name] = value.lower() in ('1', 'true', 'yes')
        elif isinstance(current, int):
            overrides[f.name] = int(value)
        elif isinstance(current, str):
            overrides[f.name] = value
    return replace(config, **overrides) if overrides else config


def load_run_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Load a JSON run config; environment overrides win over the file."""
    if path is None:
        return _apply_env_overrides(RunConfig())
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return _apply_env_overrides(run_config_from_dict(data))


def config_hash(config: RunConfig) -> str:
    """SHA-256 over every field that changes what training produces."""
    payload = asdict(config)
    for key in ('name', 'run_dir', 'data_dir', 'manifests', 'synthetic',
                'held_out_manifests', 'held_out_synthetic', 'evaluation'):
        payload.pop(key, None)
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()
