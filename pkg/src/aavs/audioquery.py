"""Audio-conditioned object queries.

Each of the ``N_q`` learnable object queries owns an audio prototype. A frame's
audio feature is scaled by its cosine similarity with the prototype and added
to the query. The prototypes are also the queries' positional embeddings in the
decoder, so the adaptive generator adds no parameters over the plain
"repeat the audio feature" baseline.
"""
from __future__ import annotations

import logging

import torch
from torch import nn

log = logging.getLogger(__name__)


def prototype_cosine(fa: torch.Tensor, p_audio: torch.Tensor) -> torch.Tensor:
    """Cosine similarity ``[T, N_q]`` between frame audio ``fa`` [T,D] and prototypes [N_q,D].

    A zero-norm operand yields cosine 0, so the query passes through unchanged.
    """
    dots = fa @ p_audio.T
    denom = fa.norm(dim=-1)[:, None] * p_audio.norm(dim=-1)[None, :]
    degenerate = denom == 0
    if bool(degenerate.any()):
        log.debug("zero-norm audio feature or prototype: cosine set to 0 for %d pairs", int(degenerate.sum()))
    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    return torch.where(degenerate, torch.zeros_like(dots), dots / safe)


def generate_queries(fa: torch.Tensor, q_obj: torch.Tensor, p_audio: torch.Tensor) -> torch.Tensor:
    """``q_a[t,i] = cos(p_audio[i], fa[t]) * fa[t] + q_obj[i]``, shape [T,N_q,D]."""
    cos = prototype_cosine(fa, p_audio)
    return cos[:, :, None] * fa[:, None, :] + q_obj[None]


def repeat_queries(fa: torch.Tensor, q_obj: torch.Tensor, p_audio: torch.Tensor | None = None) -> torch.Tensor:
    """Baseline: ``q_a[t,i] = fa[t] + q_obj[i]``. ``p_audio`` is accepted for signature parity."""
    return fa[:, None, :] + q_obj[None]


class QueryBank(nn.Module):
    def __init__(self, num_queries: int = 16, dim: int = 64, adaptive: bool = True):
        super().__init__()
        self.adaptive = adaptive
        self.q_obj = nn.Parameter(torch.zeros(num_queries, dim))
        p = torch.randn(num_queries, dim)
        self.p_audio = nn.Parameter(p / p.norm(dim=-1, keepdim=True))

    @property
    def num_queries(self) -> int:
        return self.q_obj.shape[0]

    def forward(self, fa: torch.Tensor) -> torch.Tensor:
        fn = generate_queries if self.adaptive else repeat_queries
        return fn(fa, self.q_obj, self.p_audio)

    @property
    def positional(self) -> torch.Tensor:
        return self.p_audio
