"""Masked-attention transformer decoder with an optional prior sounding mask.

Queries are refined over ``num_stages`` stages of three layers each; layer ``l``
attends to pyramid level ``level_order[l % 3]``. Every layer runs masked
cross-attention, query self-attention and a feed-forward block, each with a
residual connection and post-LayerNorm. After each layer the caller-supplied
prediction head produces mask logits; thresholding them at 0.5 (after a sigmoid)
gives the attention mask of the next layer.

In prior-guided mode a prior sounding mask can (a) replace the all-true
attention mask of the first layer and (b) tag every visual key with one of three
learned embeddings (silent / uncertain / sounding) chosen by thresholding the
resized prior.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torch.nn import functional as F

from .encoder import MultiScaleFeatures

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    AVS = "AVS"
    AVSS_E2E = "AVSS_E2E"
    AVSS_STONES = "AVSS_STONES"


class NumericalError(FloatingPointError):
    pass


@dataclass
class DecoderConfig:
    num_stages: int = 4
    layers_per_stage: int = 3
    heads: int = 4
    dim: int = 64
    ffn_dim: int = 256
    mode: Mode = Mode.AVSS_E2E
    level_order: tuple[int, ...] = (4, 3, 2)
    robust_keys: bool = True
    prior_attn_init: bool = True
    tau1: float = 0.3
    tau2: float = 0.7

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.level_order = tuple(self.level_order)
        if self.layers_per_stage != len(self.level_order):
            raise ValueError("layers_per_stage must equal the number of decoder levels")
        if not 0.0 <= self.tau1 < self.tau2 <= 1.0:
            raise ValueError(f"need 0 <= tau1 < tau2 <= 1, got {self.tau1}, {self.tau2}")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def num_layers(self) -> int:
        return self.num_stages * self.layers_per_stage

    @property
    def uses_prior(self) -> bool:
        return self.mode is Mode.AVSS_STONES


def sine_position_2d(dim: int, h: int, w: int, dtype=torch.float32, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, ``[h*w, dim]`` (half the channels for y, half for x)."""
    npf = dim // 2
    eps = 1e-6
    y = (torch.arange(1, h + 1, dtype=torch.float64) / (h + eps) * 2 * math.pi)[:, None].expand(h, w)
    x = (torch.arange(1, w + 1, dtype=torch.float64) / (w + eps) * 2 * math.pi)[None, :].expand(h, w)
    dim_t = temperature ** (2 * (torch.arange(npf, dtype=torch.float64) // 2) / npf)
    px = x[..., None] / dim_t
    py = y[..., None] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=-1).flatten(-2)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((py, px), dim=-1).reshape(h * w, 2 * npf).to(dtype)


def resize_prior(prior: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a ``[T,H,W]`` prior to ``size`` (half-pixel centers)."""
    if tuple(prior.shape[-2:]) == tuple(size):
        return prior
    return F.interpolate(prior[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]


def key_partition(resized: torch.Tensor, tau1: float, tau2: float) -> torch.Tensor:
    """Index mask: 0 silent (< tau1), 1 uncertain (tau1 <= v <= tau2), 2 sounding (> tau2)."""
    idx = torch.ones_like(resized, dtype=torch.long)
    idx[resized < tau1] = 0
    idx[resized > tau2] = 2
    return idx


class RobustKeyGenerator(nn.Module):
    def __init__(self, dim: int, tau1: float = 0.3, tau2: float = 0.7):
        super().__init__()
        if not 0.0 <= tau1 < tau2 <= 1.0:
            raise ValueError(f"need 0 <= tau1 < tau2 <= 1, got {tau1}, {tau2}")
        self.tau1, self.tau2 = tau1, tau2
        self.e_silent = nn.Parameter(torch.randn(dim) * 0.02)
        self.e_uncertain = nn.Parameter(torch.randn(dim) * 0.02)
        self.e_sounding = nn.Parameter(torch.randn(dim) * 0.02)
        self.clamp_count = 0

    def forward(self, fv: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        """``fv`` [T,D,h,w] plus the embedding selected per position by the resized prior."""
        resized = resize_prior(prior.to(fv.dtype), fv.shape[-2:])
        outside = (resized < 0) | (resized > 1)
        if bool(outside.any()):
            n = int(outside.sum())
            self.clamp_count += n
            log.warning("prior values outside [0,1] clamped at %d positions", n)
            resized = resized.clamp(0.0, 1.0)
        idx = key_partition(resized, self.tau1, self.tau2)
        table = torch.stack([self.e_silent, self.e_uncertain, self.e_sounding])
        return fv + table[idx].permute(0, 3, 1, 2)


def robust_audio_keys(fv_level, prior, params: RobustKeyGenerator):
    return params(fv_level, prior)


def init_attention_mask(prior: torch.Tensor | None, level_dims, num_queries: int, frames: int | None = None):
    """Boolean ``allow`` mask [T,N_q,h*w] for the first decoder layer.

    Without a prior everything is allowed. With a prior, a position is allowed
    where the bilinearly resized prior is >= 0.5; frames whose resized prior is
    empty fall back to all-true.
    """
    h, w = level_dims
    if prior is None:
        if frames is None:
            raise ValueError("frames is required when no prior is given")
        return torch.ones(frames, num_queries, h * w, dtype=torch.bool)
    fg = resize_prior(prior.to(torch.float64), (h, w)).reshape(prior.shape[0], h * w) >= 0.5
    empty = ~fg.any(dim=-1, keepdim=True)
    fg = fg | empty
    return fg[:, None, :].expand(-1, num_queries, -1).clone()


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query, key, value, allow=None, layer_index: int = -1):
        """query [T,N,D], key/value [T,L,D], allow [T,N,L] bool. Returns (out [T,N,D], weights [T,h,N,L])."""
        T, N, D = query.shape
        L = key.shape[1]
        hd = D // self.heads
        q = self.q_proj(query).reshape(T, N, self.heads, hd).transpose(1, 2)
        k = self.k_proj(key).reshape(T, L, self.heads, hd).transpose(1, 2)
        v = self.v_proj(value).reshape(T, L, self.heads, hd).transpose(1, 2)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        if torch.isnan(logits).any():
            raise NumericalError(f"NaN attention logits in decoder layer {layer_index}")
        if allow is not None:
            # a query with no allowed key attends everywhere
            allow = allow | ~allow.any(dim=-1, keepdim=True)
            logits = logits.masked_fill(~allow[:, None], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(T, N, D)
        return self.out_proj(out), weights


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, layer_index: int = -1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.layer_index = layer_index

    def forward(self, q, keys, values, allow=None, pos_q=None, return_weights=False):
        qin = q if pos_q is None else q + pos_q
        out, weights = self.attn(qin, keys, values, allow, self.layer_index)
        q = self.norm(q + out)
        return (q, weights) if return_weights else q


def masked_cross_attention(q, keys, values, allow, pos_q, layer: CrossAttentionLayer, return_weights=False):
    return layer(q, keys, values, allow, pos_q, return_weights=return_weights)


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, layer_index: int = -1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.layer_index = layer_index

    def forward(self, q, pos_q=None):
        qk = q if pos_q is None else q + pos_q
        out, _ = self.attn(qk, qk, q, None, self.layer_index)
        return self.norm(q + out)


class FFNLayer(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden)
        self.linear2 = nn.Linear(hidden, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, q):
        return self.norm(q + self.linear2(F.gelu(self.linear1(q))))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, layer_index: int = -1):
        super().__init__()
        self.cross = CrossAttentionLayer(dim, heads, layer_index)
        self.self_attn = SelfAttentionLayer(dim, heads, layer_index)
        self.ffn = FFNLayer(dim, ffn_dim)

    def forward(self, q, keys, values, allow=None, pos_q=None):
        q = self.cross(q, keys, values, allow, pos_q)
        q = self.self_attn(q, pos_q)
        return self.ffn(q)


def attention_mask_from_logits(mask_logits: torch.Tensor, size) -> torch.Tensor:
    """Allow where sigmoid(resized mask logits) >= 0.5, flattened to [T,N_q,h*w]."""
    T, N = mask_logits.shape[:2]
    resized = F.interpolate(mask_logits.detach(), size=tuple(size), mode="bilinear", align_corners=False)
    return (resized >= 0).reshape(T, N, -1)


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.dim, cfg.heads, cfg.ffn_dim, i) for i in range(cfg.num_layers)
        )
        self.robust = (RobustKeyGenerator(cfg.dim, cfg.tau1, cfg.tau2)
                       if cfg.uses_prior and cfg.robust_keys else None)
        self._pos_cache: dict = {}

    def _key_pos(self, h, w, dtype):
        key = (h, w, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_position_2d(self.cfg.dim, h, w, dtype)
        return self._pos_cache[key]

    def forward(self, q_a: torch.Tensor, feats: MultiScaleFeatures, pos_q: torch.Tensor,
                prior: torch.Tensor | None, mask_head_callback: Callable):
        """Returns ``(q_fuse, aux_outputs)``; ``aux_outputs[l]`` is the head output after layer ``l``."""
        cfg = self.cfg
        if cfg.uses_prior and prior is None:
            raise ValueError("AVSS_STONES mode requires a prior mask")
        if not cfg.uses_prior:
            prior = None
        q = q_a
        T, N = q.shape[:2]
        aux = []
        last_masks = None
        for l, layer in enumerate(self.layers):
            fv = feats.level(cfg.level_order[l % cfg.layers_per_stage])
            h, w = fv.shape[-2:]
            values = fv.flatten(2).transpose(1, 2)
            kv = self.robust(fv, prior) if self.robust is not None else fv
            keys = kv.flatten(2).transpose(1, 2) + self._key_pos(h, w, fv.dtype)
            if l == 0:
                allow = (init_attention_mask(prior, (h, w), N).to(q.device)
                         if prior is not None and cfg.prior_attn_init else None)
            else:
                allow = attention_mask_from_logits(last_masks, (h, w))
            q = layer(q, keys, values, allow, pos_q)
            preds = mask_head_callback(q)
            last_masks = preds.mask_logits
            aux.append(preds)
        return q, aux


def decode(q_a, feats, prior, decoder: TransformerDecoder, pos_q, mask_head_callback):
    return decoder(q_a, feats, pos_q, prior, mask_head_callback)
