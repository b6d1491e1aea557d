"""From per-query predictions to semantic label maps and soft sounding priors."""
from __future__ import annotations

import torch
from torch.nn import functional as F

from .heads import PredictionSet


def postprocess(preds: PredictionSet) -> torch.Tensor:
    """``o_pred`` [T,C+1,h,w].

    Object channel ``c`` (1..C) is ``sum_q softmax(class)[q,c] * sigmoid(mask)[q]``
    with the null column dropped. Channel 0 (background) is one minus the largest
    object channel, so pixels no query claims come out as background.
    """
    prob = preds.class_logits.softmax(-1)[..., :-1]
    masks = preds.mask_logits.sigmoid()
    objects = torch.einsum("tnc,tnhw->tchw", prob, masks)
    background = 1 - objects.max(dim=1, keepdim=True).values
    return torch.cat([background, objects], dim=1)


def upsample(o_pred: torch.Tensor, H: int, W: int) -> torch.Tensor:
    return F.interpolate(o_pred, size=(H, W), mode="bilinear", align_corners=False)


def finalize(o_pred: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Bilinear upsample to ``(H, W)`` and argmax over channels; ties go to the lowest index."""
    up = upsample(o_pred, H, W)
    # torch.argmax returns the first maximal index
    return up.argmax(dim=1)


def binarize_avs(preds: PredictionSet, H: int, W: int) -> torch.Tensor:
    """Soft sounding map ``[T,H,W]`` in [0,1] from a single-class (AVS) prediction set."""
    if preds.class_logits.shape[-1] != 2:
        raise ValueError("binarize_avs expects C=1 predictions (two class columns)")
    o = postprocess(preds)[:, 1:2]
    return upsample(o, H, W)[:, 0].clamp(0.0, 1.0)
