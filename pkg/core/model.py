"""Feature composition, regression heads and the full quality model."""
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import copy
import hashlib
import logging

import torch
import torch.nn as nn

from config.config import BRANCHES, RunConfig, config_hash
from .audio_features import AudioFeatureExtractor, mel_segments_tensor
from .base import DatabaseSpec, MediaSample, Modality, Phase
from .media_data import load_payload, preprocess_image, select_key_frames
from .motion_features import MotionExtractor, motion_feature, prepare_motion_chunks
from .spatial_features import SpatialFeatureExtractor, spatial_feature
from .utils import parameter_checksum
from .verification import ConfigHashError, FeatureCompositionError, HeadMismatchError, UnknownDatabaseError

logger = logging.getLogger(__name__)

# constituents per modality, in composition order
CONSTITUENTS = {
    Modality.AUDIO: ('audio',),
    Modality.IMAGE: ('spatial',),
    Modality.VIDEO: ('spatial', 'motion'),
    Modality.AV: ('spatial', 'motion', 'audio'),
}


@dataclass(frozen=True)
class ComposedFeature:
    modality: Modality
    values: torch.Tensor


def compose_features(modality: Union[Modality, str], f_s: Optional[torch.Tensor] = None,
                     f_m: Optional[torch.Tensor] = None, f_a: Optional[torch.Tensor] = None,
                     constituents: Optional[Sequence[str]] = None) -> ComposedFeature:
    """Concatenate exactly the constituents a modality takes: spatial, motion, audio.

    `constituents` narrows the modality's set when branches are disabled.
    """
    modality = Modality(modality)
    given = {'spatial': f_s, 'motion': f_m, 'audio': f_a}
    required = CONSTITUENTS[modality] if constituents is None else tuple(constituents)
    if not set(required) <= set(CONSTITUENTS[modality]):
        raise FeatureCompositionError(f"{sorted(required)} are not constituents of {modality.value}")
    for name, value in given.items():
        if name in required and value is None:
            raise FeatureCompositionError(f"{name} feature required for {modality.value}")
        if name not in required and value is not None:
            raise FeatureCompositionError(f"{name} feature not accepted for {modality.value}")
    return ComposedFeature(modality, torch.cat([given[name] for name in required], dim=-1))


class RegressionHead(nn.Module):
    """Two fully connected layers with a GELU between them.

    A head without a modality is the shared regressor of the single-head layout.
    """

    def __init__(self, in_width: int, modality: Union[Modality, str, None], database: Optional[str] = None):
        super().__init__()
        self.in_width = in_width
        self.modality = Modality(modality) if modality is not None else None
        self.database = database
        hidden = max(1, in_width // 2)
        self.fc1 = nn.Linear(in_width, hidden)
        self.activation = nn.GELU()
        self.fc2 = nn.Linear(hidden, 1)

    @property
    def kind(self) -> str:
        if self.database is not None:
            return 'database_specific'
        return 'modality_specific' if self.modality is not None else 'shared'

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.activation(self.fc1(x))).squeeze(-1)


def regress(head: RegressionHead, composed: ComposedFeature) -> torch.Tensor:
    if head.modality is not None and composed.modality != head.modality:
        raise HeadMismatchError(f"{head.modality.value} head cannot score a {composed.modality.value} feature")
    if composed.values.shape[-1] != head.in_width:
        raise HeadMismatchError(f"Head expects width {head.in_width}, feature has {composed.values.shape[-1]}")
    return head(composed.values)


@dataclass(frozen=True, eq=False)
class PreparedInput:
    """A sample after all preprocessing, ready for the branches."""
    database: str
    sample_id: str
    modality: Modality
    key_frames: Optional[torch.Tensor] = None       # (T, C, crop, crop)
    motion_chunks: Optional[List[torch.Tensor]] = None
    mel_segments: Optional[torch.Tensor] = None     # (S, width, bands)


def prepare_sample(sample: MediaSample, config: RunConfig) -> PreparedInput:
    payload = load_payload(sample, sample_rate=config.mel.sample_rate)
    pre = config.preprocess
    key_frames = chunks = segments = None
    if sample.modality.has_frames:
        frames = select_key_frames(payload.frames, payload.frame_rate, pre.key_frame_rate)
        key_frames = torch.stack([preprocess_image(f, pre.short_side, pre.crop_size) for f in frames])
    if sample.modality.has_motion:
        chunks = prepare_motion_chunks(payload.frames, payload.frame_rate, pre)
    if sample.modality.has_audio:
        segments = mel_segments_tensor(payload.waveform, payload.sample_rate, config.mel)
    return PreparedInput(sample.database, sample.sample_id, sample.modality, key_frames, chunks, segments)


SHARED_HEAD = 'shared'


def _head_key(database: Optional[str], modality: Optional[Modality]) -> str:
    if database is not None:
        return 'db__' + database.replace('.', '_')
    if modality is None:
        return SHARED_HEAD
    return 'modality__' + modality.value


class UNQAModel(nn.Module):
    """Spatial, motion and audio branches plus a bank of regression heads."""

    def __init__(self, config: RunConfig, phase: Union[Phase, str] = Phase.STEP1):
        super().__init__()
        self.config = config
        self.phase = Phase(phase)
        self.spatial = SpatialFeatureExtractor(config.backbone)
        self.motion = MotionExtractor(config.motion)
        self.audio = AudioFeatureExtractor(config.audio, config.mel)
        self.heads = nn.ModuleDict()
        self.branch_calls: Counter = Counter()

    @property
    def shared_head(self) -> bool:
        return self.config.head_layout == 'single'

    def active_branches(self) -> Tuple[str, ...]:
        return tuple(name for name in BRANCHES if name not in self.config.disabled_branches)

    def constituents(self, modality: Union[Modality, str]) -> Tuple[str, ...]:
        """The modality's branches minus the disabled ones."""
        modality = Modality(modality)
        active = tuple(name for name in CONSTITUENTS[modality] if name not in self.config.disabled_branches)
        if not active:
            raise FeatureCompositionError(f"Every branch feeding {modality.value} is disabled "
                                          f"({', '.join(self.config.disabled_branches)})")
        return active

    @property
    def modalities(self) -> List[Modality]:
        return [m for m in Modality if set(CONSTITUENTS[m]) - set(self.config.disabled_branches)]

    def branch_widths(self) -> Dict[str, int]:
        return {'spatial': self.spatial.output_dim, 'motion': self.motion.output_dim,
                'audio': self.audio.output_dim}

    def feature_width(self, modality: Optional[Modality]) -> int:
        """Head input width; the single-head layout slots every active branch."""
        widths = self.branch_widths()
        if modality is None or self.shared_head:
            if modality is not None:
                self.constituents(modality)
            names = self.active_branches()
        else:
            names = self.constituents(modality)
        return sum(widths[name] for name in names)

    def new_head(self, modality: Optional[Modality], database: Optional[str] = None) -> RegressionHead:
        return RegressionHead(self.feature_width(modality), modality, database).to(dtype=self._param_dtype())

    def install_database_heads(self, specs: Iterable[DatabaseSpec]) -> None:
        self.heads = nn.ModuleDict({_head_key(s.name, s.modality): self.new_head(s.modality, s.name)
                                    for s in specs})
        self.phase = Phase.STEP1

    def install_modality_heads(self, phase: Union[Phase, str] = Phase.STEP2,
                               heads: Optional[Dict[Optional[Modality], RegressionHead]] = None) -> None:
        """One head per modality, or the one shared head of the single-head layout."""
        heads = heads or {}
        keys = [None] if self.shared_head else self.modalities
        self.heads = nn.ModuleDict({_head_key(None, m): heads.get(m) or self.new_head(m) for m in keys})
        self.phase = Phase(phase)

    def head_for(self, database: str, modality: Modality) -> RegressionHead:
        self.constituents(modality)
        if self.phase == Phase.STEP1:
            key = _head_key(database, modality)
            if key not in self.heads:
                raise UnknownDatabaseError(f"No database-specific head for {database}")
        else:
            key = _head_key(None, None if self.shared_head else Modality(modality))
        return self.heads[key]

    def database_heads(self) -> List[RegressionHead]:
        return [h for h in self.heads.values() if h.database is not None]

    def extractor_modules(self) -> Dict[str, nn.Module]:
        return {'spatial': self.spatial, 'motion': self.motion, 'audio': self.audio}

    def _param_dtype(self) -> torch.dtype:
        return next(self.spatial.parameters()).dtype

    def spatial_branch(self, key_frames: torch.Tensor) -> torch.Tensor:
        self.branch_calls['spatial'] += 1
        return spatial_feature(self.spatial, key_frames.to(self._param_dtype()).unsqueeze(0))[0]

    def motion_branch(self, chunks: Sequence[torch.Tensor]) -> torch.Tensor:
        self.branch_calls['motion'] += 1
        return motion_feature(self.motion, [c.to(self._param_dtype()) for c in chunks])

    def audio_branch(self, mel_segments: torch.Tensor) -> torch.Tensor:
        self.branch_calls['audio'] += 1
        return self.audio(mel_segments.to(self._param_dtype()))

    def features(self, prepared: PreparedInput) -> ComposedFeature:
        required = self.constituents(prepared.modality)
        f_s = self.spatial_branch(prepared.key_frames) if 'spatial' in required else None
        f_m = self.motion_branch(prepared.motion_chunks) if 'motion' in required else None
        f_a = self.audio_branch(prepared.mel_segments) if 'audio' in required else None
        composed = compose_features(prepared.modality, f_s, f_m, f_a, constituents=required)
        if not self.shared_head:
            return composed
        # fixed slot per active branch, zeros where the modality has no input
        given = {'spatial': f_s, 'motion': f_m, 'audio': f_a}
        widths = self.branch_widths()
        parts = [given[name] if given[name] is not None
                 else composed.values.new_zeros(*composed.values.shape[:-1], widths[name])
                 for name in self.active_branches()]
        return ComposedFeature(prepared.modality, torch.cat(parts, dim=-1))

    def forward(self, prepared: PreparedInput) -> torch.Tensor:
        head = self.head_for(prepared.database, prepared.modality)
        return regress(head, self.features(prepared))

    def score_batch(self, batch: Sequence[PreparedInput]) -> torch.Tensor:
        return torch.stack([self(p) for p in batch])


def build_model(config: RunConfig, specs: Iterable[DatabaseSpec] = ()) -> UNQAModel:
    """Fresh model under the run seed with database-specific heads installed."""
    torch.manual_seed(config.seed)
    model = UNQAModel(config)
    model.install_database_heads(list(specs))
    return model


def merge_heads(model: UNQAModel) -> UNQAModel:
    """Step-2 model: one head per modality, the mean of that modality's database heads.

    Under the single-head layout every database head is averaged into the shared head.
    """
    if model.phase != Phase.STEP1:
        raise ValueError(f"merge_heads expects a step1 model, got {model.phase.value}")
    merged = copy.deepcopy(model)
    groups: Dict[Optional[Modality], List[RegressionHead]]
    if merged.shared_head:
        groups = {None: model.database_heads()}
    else:
        groups = {m: [] for m in merged.modalities}
        for head in model.database_heads():
            groups[head.modality].append(head)
    new_heads = {}
    for modality, heads in groups.items():
        if not heads:
            label = modality.value if modality is not None else 'shared'
            logger.warning(f"No {label} database heads to merge; using a fresh head")
            continue
        head = merged.new_head(modality)
        with torch.no_grad():
            for name, param in head.named_parameters():
                param.copy_(torch.stack([dict(h.named_parameters())[name] for h in heads]).mean(dim=0))
        new_heads[modality] = head
    merged.install_modality_heads(Phase.STEP2, new_heads)
    merged.branch_calls = Counter()
    return merged


def head_layout(model: UNQAModel) -> List[Dict]:
    return [{'key': k, 'modality': h.modality.value if h.modality is not None else None,
             'database': h.database, 'in_width': h.in_width}
            for k, h in model.heads.items()]


def checkpoint_digest(model: UNQAModel) -> str:
    sha = hashlib.sha256(model.phase.value.encode('utf-8'))
    sha.update(parameter_checksum(model).encode('utf-8'))
    return sha.hexdigest()


def save_checkpoint(model: UNQAModel, path: Path, extra: Optional[Dict] = None) -> Path:
    """Single archive: parameter blocks, head layout, phase tag and config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        'phase': model.phase.value,
        'config_hash': config_hash(model.config),
        'heads': head_layout(model),
        'state_dict': model.state_dict(),
        'digest': checkpoint_digest(model),
        'extra': extra or {},
    }, path)
    logger.info(f"Saved {model.phase.value} checkpoint to {path}")
    return path


def load_checkpoint(path: Path, config: RunConfig) -> UNQAModel:
    """Rebuild a model from a checkpoint after verifying the config hash."""
    archive = torch.load(Path(path), map_location='cpu', weights_only=False)
    expected = config_hash(config)
    if archive['config_hash'] != expected:
        raise ConfigHashError(f"Checkpoint {path} was written under config {archive['config_hash'][:12]}, "
                              f"current config is {expected[:12]}")
    model = UNQAModel(config, phase=archive['phase'])
    model.heads = nn.ModuleDict({
        entry['key']: RegressionHead(entry['in_width'], entry['modality'], entry['database'])
        for entry in archive['heads']
    })
    model.load_state_dict(archive['state_dict'])
    model.motion.requires_grad_(False)
    return model


def read_checkpoint_digest(path: Path) -> str:
    return torch.load(Path(path), map_location='cpu', weights_only=False)['digest']
