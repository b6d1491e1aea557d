"""The assembled audio-visual segmentation network."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .audioquery import QueryBank
from .decoder import DecoderConfig, Mode, TransformerDecoder
from .encoder import AudioProjector, VisualEncoder
from .heads import PredictionHead, PredictionSet


@dataclass
class ModelConfig:
    dim: int = 64
    widths: tuple[int, ...] = (16, 32, 48, 64)
    num_queries: int = 16
    num_stages: int = 4
    heads: int = 4
    ffn_dim: int = 256
    level_order: tuple[int, ...] = (4, 3, 2)
    adaptive_queries: bool = True
    robust_keys: bool = True
    mask_fusion: bool = True
    prior_attn_init: bool = True
    tau1: float = 0.3
    tau2: float = 0.7

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.level_order = tuple(self.level_order)


class AAVSModel(nn.Module):
    """Visual pyramid + audio projector + audio queries + masked decoder + per-mask heads.

    ``mode`` selects the task: ``AVS`` (one foreground class), ``AVSS_E2E``
    (semantic classes, no prior) or ``AVSS_STONES`` (semantic classes with a
    prior sounding mask fed to the decoder and, with ``mask_fusion``, to the mask head).
    """

    def __init__(self, cfg: ModelConfig, mode: Mode, num_classes: int, audio_dim: int):
        super().__init__()
        self.cfg = cfg
        self.mode = Mode(mode)
        self.num_classes = 1 if self.mode is Mode.AVS else num_classes
        self.encoder = VisualEncoder(cfg.dim, cfg.widths)
        self.audio_proj = AudioProjector(audio_dim, cfg.dim)
        self.queries = QueryBank(cfg.num_queries, cfg.dim, adaptive=cfg.adaptive_queries)
        self.decoder = TransformerDecoder(DecoderConfig(
            num_stages=cfg.num_stages, layers_per_stage=len(cfg.level_order), heads=cfg.heads,
            dim=cfg.dim, ffn_dim=cfg.ffn_dim, mode=self.mode, level_order=cfg.level_order,
            robust_keys=cfg.robust_keys, prior_attn_init=cfg.prior_attn_init,
            tau1=cfg.tau1, tau2=cfg.tau2,
        ))
        fusion = self.mode is Mode.AVSS_STONES and cfg.mask_fusion
        self.head = PredictionHead(cfg.dim, self.num_classes, fusion=fusion)

    @property
    def uses_prior(self) -> bool:
        return self.mode is Mode.AVSS_STONES

    def forward(self, frames: torch.Tensor, audio: torch.Tensor, prior: torch.Tensor | None = None):
        """Returns ``(main PredictionSet, list of per-layer PredictionSets)``."""
        if self.uses_prior and prior is None:
            raise ValueError("AVSS_STONES model needs a prior mask")
        if not self.uses_prior:
            prior = None
        feats = self.encoder(frames)
        fa = self.audio_proj(audio)
        q_a = self.queries(fa)

        def heads(q):
            return self.head(q, feats.f1, prior)

        q_fuse, aux = self.decoder(q_a, feats, self.queries.positional, prior, heads)
        main = aux[-1] if aux else heads(q_fuse)
        return main, aux
