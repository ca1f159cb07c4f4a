"""Motion branch: a frozen 3D-convolutional extractor applied per video chunk."""
from typing import List, Sequence
import logging

import numpy as np
import torch
import torch.nn as nn

from config.config import MotionConfig, PreprocessConfig
from .media_data import chunk_frames, preprocess_motion_clip

logger = logging.getLogger(__name__)


class MotionExtractor(nn.Module):
    """Two temporal-spatial conv stages and global pooling; seeded and frozen."""

    def __init__(self, config: MotionConfig = MotionConfig(), in_channels: int = 3):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stage1 = nn.Conv3d(in_channels, config.hidden_channels, kernel_size=3,
                                    stride=(1, 2, 2), padding=1)
            self.stage2 = nn.Conv3d(config.hidden_channels, config.dim, kernel_size=3,
                                    stride=(2, 2, 2), padding=1)
        self.activation = nn.GELU()
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.requires_grad_(False)
        self.eval()

    @property
    def output_dim(self) -> int:
        return self.config.dim

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        """clip: (T, C, H, W) -> (D_m,)"""
        x = clip.permute(1, 0, 2, 3).unsqueeze(0)  # (1, C, T, H, W)
        x = self.activation(self.stage1(x))
        x = self.activation(self.stage2(x))
        return self.pool(x).flatten()


def extract_motion_feature(extractor: MotionExtractor, video_chunk) -> torch.Tensor:
    """F_m of one preprocessed chunk of at least two frames."""
    if isinstance(video_chunk, np.ndarray):
        video_chunk = torch.from_numpy(video_chunk)
    if video_chunk.ndim != 4:
        raise ValueError(f"Expected a (T, C, H, W) chunk, got shape {tuple(video_chunk.shape)}")
    if video_chunk.shape[0] < 2:
        raise ValueError("Motion chunk needs at least 2 frames")
    # parameters are frozen; gradients still flow to the input
    param = next(extractor.parameters())
    return extractor(video_chunk.to(dtype=param.dtype))


def aggregate_chunks(chunk_features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over chunks."""
    if len(chunk_features) == 0:
        raise ValueError("No chunk features to aggregate")
    lengths = {f.shape[-1] for f in chunk_features}
    if len(lengths) != 1:
        raise ValueError(f"Chunk features differ in length: {sorted(lengths)}")
    return torch.stack(list(chunk_features)).mean(dim=0)


def prepare_motion_chunks(frames: np.ndarray, frame_rate: float,
                          config: PreprocessConfig = PreprocessConfig()) -> List[torch.Tensor]:
    """Split a video into chunks and resize each to the motion resolution."""
    return [preprocess_motion_clip(c, config.motion_size)
            for c in chunk_frames(frames, frame_rate, config.chunk_seconds)]


def motion_feature(extractor: MotionExtractor, chunks: Sequence[torch.Tensor]) -> torch.Tensor:
    return aggregate_chunks([extract_motion_feature(extractor, c) for c in chunks])
