"""Spatial branch: multi-stage backbone, MHSA fusion, mean/std statistics pooling."""
from typing import List, Sequence, Tuple
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.config import BackboneConfig

logger = logging.getLogger(__name__)

STD_EPSILON = 1e-8


class ToyBackbone(nn.Module):
    """Stages of strided patchify convolution + GELU, one feature map per stage.

    Any module exposing `forward(x) -> list of (BT, C_i, H_i, W_i)` maps can
    replace it.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stages = []
        in_channels = config.in_channels
        for channels, stride in zip(config.channels, config.strides):
            stages.append(nn.Sequential(
                nn.Conv2d(in_channels, channels, kernel_size=stride, stride=stride),
                nn.GELU(),
                nn.Conv2d(channels, channels, kernel_size=3, padding=1),
                nn.GELU(),
            ))
            in_channels = channels
        self.stages = nn.ModuleList(stages)

    def stage_shapes(self, height: int, width: int) -> List[Tuple[int, int]]:
        shapes = []
        for stride in self.config.strides:
            height, width = height // stride, width // stride
            shapes.append((height, width))
        return shapes

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


def extract_stage_maps(backbone: ToyBackbone, batch_frames: torch.Tensor) -> List[torch.Tensor]:
    """Flatten (B, T, C, H, W) to (B*T, C, H, W) and return every stage map."""
    if batch_frames.ndim != 5:
        raise ValueError(f"Expected a (B, T, C, H, W) tensor, got shape {tuple(batch_frames.shape)}")
    b, t, c, h, w = batch_frames.shape
    shapes = backbone.stage_shapes(h, w)
    if any(sh < 1 or sw < 1 for sh, sw in shapes):
        raise ValueError(f"Input {h}x{w} is too small for {len(shapes)} downsampling stages "
                         f"(strides {backbone.config.strides})")
    return backbone(batch_frames.reshape(b * t, c, h, w))


def pool_to_final_resolution(stage_map: torch.Tensor, target_hw: Tuple[int, int]) -> torch.Tensor:
    """Adaptive average pooling of a (N, C, H, W) map to the final stage's size."""
    height, width = stage_map.shape[-2:]
    if target_hw[0] > height or target_hw[1] > width:
        raise ValueError(f"Target {target_hw} exceeds map size {(height, width)}")
    if (height, width) == tuple(target_hw):
        return stage_map
    return F.adaptive_avg_pool2d(stage_map, target_hw)


class MHSAFusion(nn.Module):
    """concat -> 1x1 conv -> multi-head self-attention over tokens -> 1x1 conv -> residual."""

    def __init__(self, channels: int, embed_dim: int, heads: int):
        super().__init__()
        self.channels = channels
        self.reduce = nn.Conv2d(channels, embed_dim, kernel_size=1)
        self.attention = nn.MultiheadAttention(embed_dim, heads, batch_first=True)
        self.expand = nn.Conv2d(embed_dim, channels, kernel_size=1)

    def attend(self, reduced: torch.Tensor) -> torch.Tensor:
        n, e, h, w = reduced.shape
        tokens = reduced.flatten(2).transpose(1, 2)  # (N, H*W, E)
        attended, _ = self.attention(tokens, tokens, tokens, need_weights=False)
        return attended.transpose(1, 2).reshape(n, e, h, w)

    def forward(self, pooled_maps: Sequence[torch.Tensor]) -> torch.Tensor:
        sizes = {tuple(m.shape[-2:]) for m in pooled_maps}
        if len(sizes) != 1:
            raise ValueError(f"Fusion needs equal spatial sizes, got {sorted(sizes)}")
        stacked = torch.cat(list(pooled_maps), dim=1)
        if stacked.shape[1] != self.channels:
            raise ValueError(f"Expected {self.channels} concatenated channels, got {stacked.shape[1]}")
        return stacked + self.expand(self.attend(self.reduce(stacked)))


def fuse_with_mhsa(fusion: MHSAFusion, pooled_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    return fusion(pooled_maps)


def global_mean_std_pool(fused_map: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-channel spatial mean and population std (epsilon inside the root)."""
    if not torch.isfinite(fused_map).all():
        raise ValueError("Fused map contains non-finite values")
    flat = fused_map.flatten(-2)
    mu = flat.mean(dim=-1)
    var = ((flat - mu.unsqueeze(-1)) ** 2).mean(dim=-1)
    sigma = torch.sqrt(var + STD_EPSILON)
    return mu, sigma


class SpatialFeatureExtractor(nn.Module):
    """F_s = cat(mu, sigma) of the fused stage maps, averaged over frames."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = ToyBackbone(config)
        self.fusion = (MHSAFusion(config.fused_channels, config.embed_dim, config.mhsa_heads)
                       if config.fusion == 'mhsa' else None)

    @property
    def output_dim(self) -> int:
        return self.config.feature_width

    def fused_map(self, batch_frames: torch.Tensor) -> torch.Tensor:
        maps = extract_stage_maps(self.backbone, batch_frames)
        tapped = [maps[i - 1] for i in self.config.stages]
        target = tuple(tapped[-1].shape[-2:])
        pooled = [pool_to_final_resolution(m, target) for m in tapped]
        if self.fusion is None:
            return torch.cat(pooled, dim=1)
        return fuse_with_mhsa(self.fusion, pooled)

    def forward(self, batch_frames: torch.Tensor) -> torch.Tensor:
        b, t = batch_frames.shape[:2]
        mu, sigma = global_mean_std_pool(self.fused_map(batch_frames))
        per_frame = torch.cat([mu, sigma], dim=-1).reshape(b, t, -1)
        return per_frame.mean(dim=1)


def spatial_feature(extractor: SpatialFeatureExtractor, batch_frames: torch.Tensor) -> torch.Tensor:
    return extractor(batch_frames)
