"""Desk-scale visual pyramid and audio projector.

The visual side is a 4-stage strided conv net (strides 4/8/16/32) followed by a
top-down feature pyramid: every level is projected to ``dim`` channels, the
coarser merged map is upsampled and added, and a 3x3 conv produces the output.
Level 1 (stride 4) is the mask feature; levels 2..4 feed the decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class ShapeError(ValueError):
    pass


@dataclass
class MultiScaleFeatures:
    f1: torch.Tensor  # [T,D,H/4,W/4]  mask feature
    f2: torch.Tensor  # [T,D,H/8,W/8]
    f3: torch.Tensor  # [T,D,H/16,W/16]
    f4: torch.Tensor  # [T,D,H/32,W/32]

    def level(self, i: int) -> torch.Tensor:
        return (self.f1, self.f2, self.f3, self.f4)[i - 1]


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(_groups(cout), cout),
            nn.GELU(),
        )


class VisualEncoder(nn.Module):
    def __init__(self, dim: int = 64, widths=(16, 32, 48, 64)):
        super().__init__()
        self.dim = dim
        self.widths = tuple(widths)
        stages = []
        cin = 3
        for i, w in enumerate(self.widths):
            # stage 1 reaches stride 4 with two stride-2 convs, the rest halve once
            stages.append(nn.Sequential(ConvBlock(cin, w, 2), ConvBlock(w, w, 2 if i == 0 else 1)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(w, dim, 1) for w in self.widths)
        self.output = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1) for _ in self.widths)

    def forward(self, frames: torch.Tensor) -> MultiScaleFeatures:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ShapeError(f"frames must be [T,3,H,W], got {tuple(frames.shape)}")
        H, W = frames.shape[-2:]
        if H % 32 or W % 32:
            raise ShapeError(f"H and W must be divisible by 32, got {H}x{W}")
        x = frames
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        merged = [None] * 4
        top = None
        for i in reversed(range(4)):
            lat = self.lateral[i](feats[i])
            top = lat if top is None else lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            merged[i] = self.output[i](top)
        return MultiScaleFeatures(*merged)


class AudioProjector(nn.Linear):
    """Linear projection of per-frame audio embeddings: ``fa = audio @ W.T + b``."""

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.dim() != 2 or audio.shape[1] != self.in_features:
            raise ShapeError(f"audio must be [T,{self.in_features}], got {tuple(audio.shape)}")
        return super().forward(audio)


def encode_visual(frames, encoder: VisualEncoder) -> MultiScaleFeatures:
    return encoder(frames)


def encode_audio(audio, projector: AudioProjector) -> torch.Tensor:
    return projector(audio)
