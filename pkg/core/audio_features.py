"""Audio branch: framewise CNN, self-attention time dependency, attention pooling."""
from typing import Tuple
import logging

import numpy as np
import torch
import torch.nn as nn

from config.config import AudioConfig, MelConfig
from .media_data import compute_mel_spectrogram

logger = logging.getLogger(__name__)


class FramewiseCNN(nn.Module):
    """Two conv-pool stages over each (bands x width) mel segment, then a projection."""

    def __init__(self, n_mels: int, segment_width: int, config: AudioConfig = AudioConfig()):
        super().__init__()
        c1, c2 = config.conv_channels
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=3, padding=1),
            nn.GELU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, kernel_size=3, padding=1),
            nn.GELU(),
            nn.MaxPool2d(2),
        )
        out_h, out_w = n_mels // 4, segment_width // 4
        if out_h < 1 or out_w < 1:
            raise ValueError(f"Segments of {n_mels}x{segment_width} are too small for two 2x2 poolings")
        self.project = nn.Linear(c2 * out_h * out_w, config.dim)

    def forward(self, segments: torch.Tensor) -> torch.Tensor:
        """(S, width, bands) -> (S, D_a)"""
        x = segments.transpose(1, 2).unsqueeze(1)
        return self.project(self.features(x).flatten(1))


def framewise_embed(module: FramewiseCNN, mel_segments: torch.Tensor) -> torch.Tensor:
    if mel_segments.ndim != 3 or mel_segments.shape[0] == 0:
        raise ValueError("framewise_embed needs a non-empty (S, width, bands) segment stack")
    return module(mel_segments)


class TimeDependency(nn.Module):
    """One self-attention block with learned positional embedding and a residual."""

    def __init__(self, config: AudioConfig = AudioConfig()):
        super().__init__()
        self.max_segments = config.max_segments
        self.position = nn.Embedding(config.max_segments, config.dim)
        self.attention = nn.MultiheadAttention(config.dim, config.heads, batch_first=True)
        self.output = nn.Linear(config.dim, config.dim)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(S, D) or (B, S, D) -> same shape"""
        squeeze = embeddings.ndim == 2
        x = embeddings.unsqueeze(0) if squeeze else embeddings
        n_segments = x.shape[1]
        if n_segments < 1:
            raise ValueError("time_dependency needs at least one segment")
        if n_segments > self.max_segments:
            raise ValueError(f"{n_segments} segments exceed the positional table ({self.max_segments})")
        positions = torch.arange(n_segments, device=x.device)
        h = x + self.position(positions)
        attended, _ = self.attention(h, h, h, need_weights=False)
        out = x + self.output(attended)
        return out.squeeze(0) if squeeze else out


def time_dependency(module: TimeDependency, embeddings: torch.Tensor) -> torch.Tensor:
    return module(embeddings)


class AttentionPool(nn.Module):
    """F_a = sum_t softmax(score(e_t)) * e_t."""

    def __init__(self, config: AudioConfig = AudioConfig()):
        super().__init__()
        self.score = nn.Linear(config.dim, 1)

    def forward(self, embeddings: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(S, D) -> ((D,), (S,) weights)"""
        weights = torch.softmax(self.score(embeddings).squeeze(-1), dim=-1)
        return weights @ embeddings, weights


def attention_pool(module: AttentionPool, embeddings: torch.Tensor) -> torch.Tensor:
    return module(embeddings)[0]


class AudioFeatureExtractor(nn.Module):
    def __init__(self, config: AudioConfig = AudioConfig(), mel: MelConfig = MelConfig()):
        super().__init__()
        self.config = config
        self.mel = mel
        self.framewise = FramewiseCNN(mel.n_mels, mel.segment_width, config)
        self.time_dependency = TimeDependency(config)
        self.pool = AttentionPool(config)

    @property
    def output_dim(self) -> int:
        return self.config.dim

    def forward(self, mel_segments: torch.Tensor) -> torch.Tensor:
        """(S, width, bands) -> (D_a,)"""
        embeddings = framewise_embed(self.framewise, mel_segments)
        embeddings = self.time_dependency(embeddings)
        feature, _ = self.pool(embeddings)
        return feature


def mel_segments_tensor(waveform: np.ndarray, sample_rate: int, mel: MelConfig = MelConfig()) -> torch.Tensor:
    spectrogram = compute_mel_spectrogram(waveform, sample_rate, mel)
    return torch.from_numpy(spectrogram.segments.astype(np.float32))


def audio_feature(extractor: AudioFeatureExtractor, waveform: np.ndarray, sample_rate: int) -> torch.Tensor:
    """mel spectrogram -> framewise -> time dependency -> attention pool."""
    segments = mel_segments_tensor(waveform, sample_rate, extractor.mel)
    param = next(extractor.parameters())
    return extractor(segments.to(dtype=param.dtype))
