"""Quality databases: synthesis, manifest ingestion, splits and preprocessing."""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import logging
import math
import threading

import librosa
import numpy as np
import pandas as pd
import soundfile as sf
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from config.config import (
    BATCH_SIZE,
    CROP_SIZE,
    MOTION_SIZE,
    SHORT_SIDE,
    SYNTHETIC_MOS_NOISE,
    MelConfig,
    RunConfig,
    SyntheticDatabaseConfig,
)
from .base import Database, DatabaseSpec, MediaSample, MelSpectrogram, Modality, Payload, SplitAssignment
from .utils import write_json, read_json
from .verification import (
    DuplicateSampleError,
    ManifestError,
    MissingMediaError,
    MosRangeError,
    SplitError,
    get_payload_validator,
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['sample_id', 'modality', 'media_path', 'audio_path', 'mos']
MIN_DATABASE_SIZE = 10

VISUAL_FAMILIES = ('noise', 'blur', 'brightness')
DISTORTION_FAMILIES: Dict[Modality, Tuple[str, ...]] = {
    Modality.IMAGE: VISUAL_FAMILIES,
    Modality.AUDIO: ('noise', 'clipping'),
    Modality.VIDEO: VISUAL_FAMILIES + ('jitter',),
    Modality.AV: VISUAL_FAMILIES + ('jitter', 'clipping'),
}

# Severity 1 maps to these magnitudes
MAX_NOISE_STD = 0.25
MAX_BLUR_SIGMA = 3.0
MAX_BRIGHTNESS_SHIFT = 0.4
MAX_JITTER_PIXELS = 4
MAX_AUDIO_NOISE_STD = 0.3
MAX_CLIP_REDUCTION = 0.9


class DatabaseRegistry:
    """Named databases; registrations are serialized, reads are lock-free."""

    def __init__(self):
        self._lock = threading.Lock()
        self._databases: Dict[str, Database] = {}

    def register(self, database: Database) -> Database:
        with self._lock:
            if database.name in self._databases:
                raise ValueError(f"Database {database.name} is already registered")
            self._databases[database.name] = database
        logger.info(f"Registered database {database.name} ({database.modality.value}, "
                    f"{database.spec.n_samples} samples)")
        return database

    def get(self, name: str) -> Database:
        return self._databases[name]

    def __contains__(self, name: str) -> bool:
        return name in self._databases

    def __len__(self) -> int:
        return len(self._databases)

    def names(self) -> List[str]:
        return list(self._databases)


@dataclass(frozen=True)
class DistortionConfig:
    """Distortion families and media geometry for one synthetic database."""
    families: Tuple[str, ...]
    mos_range: Tuple[float, float] = (1.0, 5.0)
    mos_noise: float = SYNTHETIC_MOS_NOISE
    height: int = 48
    width: int = 64
    n_frames: int = 8
    frame_rate: float = 4.0
    duration: float = 1.0
    sample_rate: int = 16000

    @classmethod
    def from_synthetic(cls, config: SyntheticDatabaseConfig) -> 'DistortionConfig':
        return cls(
            families=tuple(config.families), mos_range=tuple(config.mos_range),
            mos_noise=config.mos_noise, height=config.height, width=config.width,
            n_frames=config.n_frames, frame_rate=config.frame_rate,
            duration=config.duration, sample_rate=config.sample_rate,
        )


def split_sizes(n_samples: int) -> Tuple[int, int, int]:
    """7:1:2 sizes: val and test floored, remainder to train."""
    n_val = int(math.floor(n_samples * 0.1))
    n_test = int(math.floor(n_samples * 0.2))
    return n_samples - n_val - n_test, n_val, n_test


def steps_per_epoch(n_samples: int, batch_size: int = BATCH_SIZE) -> int:
    n_train = split_sizes(n_samples)[0]
    return max(1, math.ceil(n_train / batch_size))


def _validate_families(modality: Modality, families: Sequence[str]) -> Tuple[str, ...]:
    if not families:
        raise ValueError("distortion_config must name at least one distortion family")
    allowed = DISTORTION_FAMILIES[modality]
    unknown = [f for f in families if f not in allowed]
    if unknown:
        raise ValueError(f"Distortion families {unknown} do not apply to {modality.value}; "
                         f"choose from {list(allowed)}")
    return tuple(families)


def _base_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    texture = gaussian_filter(rng.random((3, height, width)), sigma=(0, 3, 3))
    lo, hi = texture.min(), texture.max()
    return 0.1 + 0.8 * (texture - lo) / max(hi - lo, 1e-12)


def _distort_frame(frame: np.ndarray, severity: float, families: Iterable[str],
                   rng: np.random.Generator) -> np.ndarray:
    out = frame
    if 'blur' in families and severity > 0:
        sigma = MAX_BLUR_SIGMA * severity
        out = gaussian_filter(out, sigma=(0, sigma, sigma))
    if 'brightness' in families:
        out = out + MAX_BRIGHTNESS_SHIFT * severity
    if 'noise' in families:
        out = out + rng.normal(0.0, MAX_NOISE_STD * severity, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _synth_image(rng, severity, families, config: DistortionConfig) -> np.ndarray:
    base = _base_texture(rng, config.height, config.width)
    return _distort_frame(base, severity, families, rng)[None].astype(np.float32)


def _synth_video(rng, severity, families, config: DistortionConfig) -> np.ndarray:
    speed = 2
    pad = speed * config.n_frames + 2 * MAX_JITTER_PIXELS
    scene = _base_texture(rng, config.height, config.width + pad)
    jitter = int(round(MAX_JITTER_PIXELS * severity)) if 'jitter' in families else 0
    frames = []
    for t in range(config.n_frames):
        offset = MAX_JITTER_PIXELS + speed * t
        if jitter:
            offset += int(rng.integers(-jitter, jitter + 1))
        frame = scene[:, :, offset:offset + config.width]
        frames.append(_distort_frame(frame, severity, families, rng))
    return np.stack(frames).astype(np.float32)


def _synth_audio(rng, severity, families, config: DistortionConfig) -> np.ndarray:
    n = int(round(config.duration * config.sample_rate))
    t = np.arange(n) / config.sample_rate
    f0 = rng.uniform(150.0, 400.0)
    wave = sum(0.5 / k * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) for k in (1, 2, 3))
    wave = wave * (0.6 + 0.4 * np.sin(2 * np.pi * 2.0 * t) ** 2)
    if 'noise' in families:
        wave = wave + rng.normal(0.0, MAX_AUDIO_NOISE_STD * severity, size=n)
    if 'clipping' in families:
        threshold = 1.0 - MAX_CLIP_REDUCTION * severity
        wave = np.clip(wave, -threshold, threshold)
    return wave.astype(np.float32)


def _synth_payload(modality: Modality, severity: float, families, config, rng) -> Payload:
    visual = [f for f in families if f in DISTORTION_FAMILIES[Modality.VIDEO]]
    aural = [f for f in families if f in DISTORTION_FAMILIES[Modality.AUDIO]]
    if modality == Modality.IMAGE:
        return Payload(frames=_synth_image(rng, severity, visual, config))
    if modality == Modality.VIDEO:
        return Payload(frames=_synth_video(rng, severity, visual, config), frame_rate=config.frame_rate)
    if modality == Modality.AUDIO:
        return Payload(waveform=_synth_audio(rng, severity, aural, config), sample_rate=config.sample_rate)
    return Payload(
        frames=_synth_video(rng, severity, visual, config), frame_rate=config.frame_rate,
        waveform=_synth_audio(rng, severity, aural, config), sample_rate=config.sample_rate,
    )


def generate_synthetic_database(
    modality: Union[Modality, str],
    n_samples: int,
    distortion_config: DistortionConfig,
    seed: int,
    name: Optional[str] = None,
    registry: Optional[DatabaseRegistry] = None,
    batch_size: int = BATCH_SIZE,
) -> Database:
    """Synthesize a database whose MOS is a hidden affine image of latent quality.

    Distortion severity is 1 - q for latent quality q ~ U[0, 1], so severity
    strictly decreases with q. MOS = a*q + b + N(0, (mos_noise * range width)^2),
    clipped into mos_range.
    """
    try:
        modality = Modality(modality)
    except ValueError:
        raise ValueError(f"Unknown modality {modality!r}")
    if n_samples < MIN_DATABASE_SIZE:
        raise ValueError(f"n_samples must be >= {MIN_DATABASE_SIZE}, got {n_samples}")
    families = _validate_families(modality, distortion_config.families)
    name = name or f"synthetic_{modality.value}_{seed}"

    seq = np.random.SeedSequence(seed)
    score_seed, *sample_seeds = seq.spawn(n_samples + 1)
    rng = np.random.default_rng(score_seed)
    lo, hi = distortion_config.mos_range
    span = hi - lo
    a = rng.uniform(0.6, 0.9) * span
    b = lo + rng.uniform(0.0, span - a)
    latent = rng.uniform(0.0, 1.0, size=n_samples)
    noise = rng.normal(0.0, distortion_config.mos_noise * span, size=n_samples)
    mos = np.clip(a * latent + b + noise, lo, hi)

    samples = []
    for i in range(n_samples):
        sample_rng = np.random.default_rng(sample_seeds[i])
        payload = _synth_payload(modality, 1.0 - latent[i], families, distortion_config, sample_rng)
        samples.append(MediaSample(
            database=name, sample_id=f"{name}_{i:05d}", modality=modality,
            mos=float(mos[i]), latent_quality=float(latent[i]), payload=payload,
        ))

    spec = DatabaseSpec(name=name, modality=modality, mos_range=(float(lo), float(hi)),
                        n_samples=n_samples, steps_per_epoch=steps_per_epoch(n_samples, batch_size))
    database = Database(spec=spec, samples=tuple(samples))
    logger.debug(f"Generated {name}: families={families}, hidden map a={a:.3f} b={b:.3f}")
    if registry is not None:
        registry.register(database)
    return database


def database_from_config(config: SyntheticDatabaseConfig, registry: Optional[DatabaseRegistry] = None,
                         batch_size: int = BATCH_SIZE) -> Database:
    return generate_synthetic_database(
        config.modality, config.n_samples, DistortionConfig.from_synthetic(config),
        config.seed, name=config.name, registry=registry, batch_size=batch_size,
    )


def write_manifest(database: Database, directory: Path) -> Path:
    """Serialize a database to CSV + sidecar JSON + .npz media files."""
    directory = Path(directory)
    media_dir = directory / 'media' / database.name
    media_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in database.samples:
        payload = load_payload(sample)
        media_path = audio_path = ''
        if payload.frames is not None:
            path = media_dir / f"{sample.sample_id}.npz"
            np.savez(path, frames=payload.frames, frame_rate=np.float64(payload.frame_rate or 0.0))
            media_path = str(path.relative_to(directory))
        if payload.waveform is not None:
            path = media_dir / f"{sample.sample_id}_audio.npz"
            np.savez(path, waveform=payload.waveform, sample_rate=np.int64(payload.sample_rate))
            audio_path = str(path.relative_to(directory))
        rows.append({
            'sample_id': sample.sample_id, 'modality': sample.modality.value,
            'media_path': media_path, 'audio_path': audio_path, 'mos': repr(sample.mos),
        })
    manifest = directory / f"{database.name}.csv"
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False, encoding='utf-8')
    write_json(manifest.with_suffix('.json'), database.spec.to_dict())
    logger.info(f"Wrote manifest {manifest} ({len(rows)} rows)")
    return manifest


def load_manifest(path: Union[str, Path], registry: Optional[DatabaseRegistry] = None) -> Database:
    """Read a manifest CSV and its sidecar JSON into a validated database."""
    path = Path(path)
    sidecar = path.with_suffix('.json')
    if not path.exists() or not sidecar.exists():
        raise ManifestError(f"Manifest {path} or its sidecar {sidecar.name} is missing")
    meta = read_json(sidecar)
    try:
        modality = Modality(meta['modality'])
        lo, hi = (float(v) for v in meta['mos_range'])
        name = meta['name']
        steps = int(meta['steps_per_epoch'])
    except (KeyError, ValueError, TypeError) as e:
        raise ManifestError(f"Invalid sidecar {sidecar}: {e}")

    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    if list(table.columns) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")

    samples, seen = [], set()
    for row in table.itertuples(index=False):
        sample_id = row.sample_id
        if sample_id in seen:
            raise DuplicateSampleError(f"{path}: duplicate sample_id {sample_id}")
        seen.add(sample_id)
        if row.modality != modality.value:
            raise ManifestError(f"{sample_id}: modality {row.modality} differs from database modality "
                                f"{modality.value}")
        try:
            mos = float(row.mos)
        except ValueError:
            raise ManifestError(f"{sample_id}: MOS {row.mos!r} is not a number")
        if not lo <= mos <= hi:
            raise MosRangeError(f"{sample_id}: MOS {mos} outside declared range [{lo}, {hi}]")
        if row.audio_path and not modality.has_audio:
            raise ManifestError(f"{sample_id}: audio_path must be empty for {modality.value}")
        if row.media_path and not modality.has_frames:
            raise ManifestError(f"{sample_id}: media_path must be empty for {modality.value}")
        media_path = _resolve(path.parent, row.media_path, sample_id, required=modality.has_frames)
        audio_path = _resolve(path.parent, row.audio_path, sample_id, required=modality.has_audio)
        samples.append(MediaSample(database=name, sample_id=sample_id, modality=modality, mos=mos,
                                   media_path=media_path, audio_path=audio_path))

    spec = DatabaseSpec(name=name, modality=modality, mos_range=(lo, hi),
                        n_samples=len(samples), steps_per_epoch=steps)
    database = Database(spec=spec, samples=tuple(samples))
    if registry is not None:
        registry.register(database)
    return database


def _resolve(root: Path, value: str, sample_id: str, required: bool) -> Optional[Path]:
    if not value:
        if required:
            raise ManifestError(f"{sample_id}: media locator missing")
        return None
    path = Path(value)
    if not path.is_absolute():
        path = root / path
    if not path.exists():
        raise MissingMediaError(f"{sample_id}: media file {path} does not exist")
    return path


def _read_frames(path: Path) -> Tuple[np.ndarray, Optional[float]]:
    suffix = path.suffix.lower()
    frame_rate = None
    if suffix == '.npz':
        with np.load(path) as data:
            frames = data['frames']
            if 'frame_rate' in data and float(data['frame_rate']) > 0:
                frame_rate = float(data['frame_rate'])
    elif suffix == '.npy':
        frames = np.load(path)
    else:
        image = np.asarray(Image.open(path).convert('RGB'), dtype=np.float32) / 255.0
        frames = image.transpose(2, 0, 1)[None]
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.shape[1] == 1:
        frames = np.repeat(frames, 3, axis=1)
    return frames, frame_rate


def _read_waveform(path: Path) -> Tuple[np.ndarray, int]:
    if path.suffix.lower() == '.npz':
        with np.load(path) as data:
            waveform, sample_rate = data['waveform'], int(data['sample_rate'])
    else:
        waveform, sample_rate = sf.read(str(path), always_2d=False)
    waveform = np.asarray(waveform, dtype=np.float32)
    if waveform.ndim == 2:
        waveform = waveform.mean(axis=1)
    return waveform, sample_rate


def load_payload(sample: MediaSample, sample_rate: Optional[int] = None) -> Payload:
    """Decode a sample's media, resampling audio to `sample_rate` when given."""
    if sample.payload is not None:
        payload = sample.payload
    else:
        frames = frame_rate = waveform = rate = None
        if sample.media_path is not None:
            frames, frame_rate = _read_frames(sample.media_path)
        if sample.audio_path is not None:
            waveform, rate = _read_waveform(sample.audio_path)
        payload = Payload(frames=frames, frame_rate=frame_rate, waveform=waveform, sample_rate=rate)
    if sample_rate is not None and payload.waveform is not None and payload.sample_rate != sample_rate:
        waveform = librosa.resample(payload.waveform, orig_sr=payload.sample_rate, target_sr=sample_rate)
        payload = replace(payload, waveform=waveform.astype(np.float32), sample_rate=sample_rate)
    get_payload_validator(sample.modality)(payload, sample.sample_id)
    return payload


def split_database(database: Database, seed: int) -> SplitAssignment:
    """Seeded 7:1:2 partition of a database's sample ids."""
    n = len(database.samples)
    if n < MIN_DATABASE_SIZE:
        raise SplitError(f"{database.name}: {n} samples is too few to split (need {MIN_DATABASE_SIZE})")
    n_train, n_val, _ = split_sizes(n)
    ids = sorted(database.sample_ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return SplitAssignment(
        database=database.name, seed=seed,
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
    )


def rescale_mos(database: Database, a: float, b: float) -> Database:
    """Map every MOS (and the declared range) through a*s + b with a > 0."""
    if a <= 0:
        raise ValueError("rescale_mos needs a strictly increasing map (a > 0)")
    lo, hi = database.spec.mos_range
    spec = replace(database.spec, mos_range=(a * lo + b, a * hi + b))
    samples = tuple(replace(s, mos=a * s.mos + b) for s in database.samples)
    return Database(spec=spec, samples=samples)


def _as_tensor(frames) -> torch.Tensor:
    if isinstance(frames, torch.Tensor):
        return frames.float()
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resized_shape(height: int, width: int, short_side: int = SHORT_SIDE) -> Tuple[int, int]:
    """Shape after scaling the shortest side to `short_side`, aspect preserved."""
    if height <= width:
        return short_side, _round_half_up(width * short_side / height)
    return _round_half_up(height * short_side / width), short_side


def crop_offsets(height: int, width: int, crop_size: int = CROP_SIZE) -> Tuple[int, int]:
    return (height - crop_size) // 2, (width - crop_size) // 2


def preprocess_image(frame, short_side: int = SHORT_SIDE, crop_size: int = CROP_SIZE) -> torch.Tensor:
    """Resize a (C, H, W) frame so its short side is `short_side`, then center crop."""
    frame = _as_tensor(frame)
    if frame.ndim != 3:
        raise ValueError(f"Expected a (C, H, W) frame, got shape {tuple(frame.shape)}")
    _, height, width = frame.shape
    if height < 1 or width < 1:
        raise ValueError("Frame must be at least 1x1")
    if min(height, width) != short_side:
        new_h, new_w = resized_shape(height, width, short_side)
        frame = F.interpolate(frame[None], size=(new_h, new_w), mode='bilinear', align_corners=False)[0]
    _, height, width = frame.shape
    if min(height, width) < crop_size:
        raise ValueError(f"Crop {crop_size} exceeds rescaled frame {height}x{width}")
    top, left = crop_offsets(height, width, crop_size)
    return frame[:, top:top + crop_size, left:left + crop_size]


def preprocess_motion_clip(frames, size: int = MOTION_SIZE) -> torch.Tensor:
    """Resize every frame of a (T, C, H, W) clip to size x size, no crop."""
    frames = _as_tensor(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("Motion clip must be a non-empty (T, C, H, W) array")
    if tuple(frames.shape[-2:]) == (size, size):
        return frames
    return F.interpolate(frames, size=(size, size), mode='bilinear', align_corners=False)


def select_key_frames(frames: np.ndarray, frame_rate: Optional[float], key_frame_rate: float) -> np.ndarray:
    """Frames fed to the spatial branch: `key_frame_rate` frames per second."""
    if frame_rate is None or frames.shape[0] == 1:
        return frames
    step = max(frame_rate / key_frame_rate, 1.0)
    indices = []
    k = 0
    while int(math.floor(k * step)) < frames.shape[0]:
        indices.append(int(math.floor(k * step)))
        k += 1
    return frames[indices]


def chunk_frames(frames: np.ndarray, frame_rate: float, chunk_seconds: float) -> List[np.ndarray]:
    """Non-overlapping chunks; a trailing single frame joins the previous chunk."""
    total = frames.shape[0]
    if total < 2:
        raise ValueError("Motion features need at least 2 frames")
    length = max(2, _round_half_up(frame_rate * chunk_seconds))
    starts = list(range(0, total, length))
    chunks = [frames[s:s + length] for s in starts]
    if len(chunks) > 1 and chunks[-1].shape[0] < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def compute_mel_spectrogram(waveform: np.ndarray, sample_rate: int, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-power mel grid (frames x bands) plus overlapping fixed-width segments."""
    if sample_rate <= 0:
        raise ValueError(f"Sample rate must be positive, got {sample_rate}")
    waveform = np.asarray(waveform, dtype=np.float64)
    window = int(round(sample_rate * config.window_seconds))
    hop = int(round(sample_rate * config.hop_seconds))
    if waveform.ndim != 1 or waveform.shape[0] < window:
        raise ValueError(f"Waveform of {waveform.shape[-1]} samples is shorter than one {window}-sample window")

    power = librosa.feature.melspectrogram(
        y=waveform, sr=sample_rate, n_fft=window, hop_length=hop, win_length=window,
        window='hann', center=False, power=2.0, n_mels=config.n_mels, fmin=0.0, fmax=sample_rate / 2,
    )
    log_floor = float(np.log10(config.floor))
    values = np.log10(np.maximum(power, config.floor)).T

    width = config.segment_width
    grid = values
    if grid.shape[0] < width:
        pad = np.full((width - grid.shape[0], grid.shape[1]), log_floor)
        grid = np.concatenate([grid, pad])
    starts = tuple(range(0, grid.shape[0] - width + 1, config.segment_hop))
    segments = np.stack([grid[s:s + width] for s in starts])
    return MelSpectrogram(values=values, frame_hop=hop / sample_rate, segments=segments,
                          segment_starts=starts, log_floor=log_floor)


def databases_for_run(config: RunConfig, held_out: bool = False,
                      registry: Optional[DatabaseRegistry] = None) -> List[Database]:
    """Manifest databases followed by synthetic ones, for training or held-out use."""
    registry = registry if registry is not None else DatabaseRegistry()
    manifests = config.held_out_manifests if held_out else config.manifests
    synthetic = config.held_out_synthetic if held_out else config.synthetic
    batch_size = config.phases['step1'].batch_size
    databases = [load_manifest(path, registry) for path in manifests]
    databases += [database_from_config(c, registry, batch_size=batch_size) for c in synthetic]
    if not databases:
        kind = 'held-out' if held_out else 'training'
        raise ValueError(f"Run config {config.name} lists no {kind} databases")
    return databases
