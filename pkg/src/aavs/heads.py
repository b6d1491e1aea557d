"""Per-mask classification heads, Hungarian matching and the set-prediction loss.

Class logits have ``C + 1`` columns: column ``k - 1`` is semantic class ``k``
and the last column is the null ("no object") class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from torch import nn
from torch.nn import functional as F

from .decoder import resize_prior


class MatchingError(ValueError):
    pass


@dataclass
class PredictionSet:
    mask_logits: torch.Tensor   # [T,N_q,h,w] at stride 4
    class_logits: torch.Tensor  # [T,N_q,C+1]


@dataclass
class LossWeights:
    lambda_cls: float = 2.0
    lambda_mask: float = 5.0
    lambda_dice: float = 5.0
    lambda_aux: float = 1.0
    null_weight: float = 0.1

    def __post_init__(self):
        vals = (self.lambda_cls, self.lambda_mask, self.lambda_dice, self.lambda_aux)
        if min(vals) < 0 or not any(vals):
            raise ValueError("loss weights must be nonnegative and not all zero")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda_cls * k, self.lambda_mask * k, self.lambda_dice * k,
                           self.lambda_aux, self.null_weight)


class MLP(nn.Sequential):
    def __init__(self, dim: int, hidden: int, out: int, layers: int = 3):
        mods = []
        d = dim
        for i in range(layers - 1):
            mods += [nn.Linear(d, hidden), nn.GELU()]
            d = hidden
        mods.append(nn.Linear(d, out))
        super().__init__(*mods)


class MaskPredictor(nn.Module):
    """``mask_logits[t,q] = <MLP(q_fuse[t,q]), f1'[t]>`` per pixel.

    With ``fusion`` the prior is resized to the mask-feature resolution and added
    through a learned 1 -> D projection: ``f1' = f1 + W * prior + b``.
    """

    def __init__(self, dim: int, fusion: bool = False):
        super().__init__()
        self.mlp = MLP(dim, dim, dim)
        self.prior_proj = nn.Conv2d(1, dim, 1) if fusion else None

    def mask_feature(self, f1, prior=None):
        if prior is None or self.prior_proj is None:
            return f1
        resized = resize_prior(prior.to(f1.dtype), f1.shape[-2:])
        return f1 + self.prior_proj(resized[:, None])

    def forward(self, q, f1, prior=None):
        if q.shape[0] != f1.shape[0] or q.shape[-1] != f1.shape[1]:
            raise ValueError(f"shape mismatch: queries {tuple(q.shape)} vs mask feature {tuple(f1.shape)}")
        emb = self.mlp(q)
        return torch.einsum("tnd,tdhw->tnhw", emb, self.mask_feature(f1, prior))


def predict_masks(q_fuse, f1, prior, predictor: MaskPredictor):
    return predictor(q_fuse, f1, prior)


def predict_classes(q_fuse, predictor: nn.Linear):
    return predictor(q_fuse)


class PredictionHead(nn.Module):
    """LayerNorm on the queries followed by the class and mask predictors."""

    def __init__(self, dim: int, num_classes: int, fusion: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.class_embed = nn.Linear(dim, num_classes + 1)
        self.mask_pred = MaskPredictor(dim, fusion)

    def forward(self, q, f1, prior=None) -> PredictionSet:
        qn = self.norm(q)
        return PredictionSet(self.mask_pred(qn, f1, prior), self.class_embed(qn))


# ---------------------------------------------------------------------------
# targets

@dataclass
class FrameTargets:
    labels: torch.Tensor  # [K] long, class ids in 1..C
    masks: torch.Tensor   # [K,h,w] float {0,1}


def downsample_nearest(mask: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    return F.interpolate(t, size=tuple(size), mode="nearest")[0, 0].numpy()


def semantic_targets(label_map: np.ndarray, size, binary: bool = False) -> list[FrameTargets]:
    """Per-frame segments from a ``[T,H,W]`` label map, masks downsampled (nearest) to ``size``.

    ``binary``: one segment per frame covering all nonzero pixels, class 1.
    Otherwise one segment per connected region of each class.
    """
    out = []
    for frame in np.asarray(label_map):
        labels, masks = [], []
        if binary:
            regions = [(1, frame > 0)] if frame.any() else []
        else:
            regions = []
            for c in np.unique(frame):
                if c == 0:
                    continue
                comp, n = ndimage.label(frame == c)
                regions += [(int(c), comp == k) for k in range(1, n + 1)]
        for c, region in regions:
            small = downsample_nearest(region, size)
            if small.any():
                labels.append(c)
                masks.append(small)
        h, w = size
        out.append(FrameTargets(
            torch.tensor(labels, dtype=torch.long),
            torch.from_numpy(np.stack(masks)) if masks else torch.zeros(0, h, w),
        ))
    return out


# ---------------------------------------------------------------------------
# losses

def dice_loss(pred_prob: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Mean over masks of ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``; masks on the last two axes."""
    p = pred_prob.flatten(-2)
    t = target.flatten(-2).to(p.dtype)
    per = 1 - (2 * (p * t).sum(-1) + eps) / (p.sum(-1) + t.sum(-1) + eps)
    return per.mean()


def mask_ce_loss(pred_prob: torch.Tensor, target: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """Mean binary cross-entropy over pixels and masks, from probabilities."""
    p = pred_prob
    t = target.to(p.dtype)
    return -(t * p.clamp_min(floor).log() + (1 - t) * (1 - p).clamp_min(floor).log()).mean()


def sigmoid_ce_loss(mask_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``mask_ce_loss(sigmoid(logits), target)`` computed stably from logits."""
    return F.binary_cross_entropy_with_logits(mask_logits, target.to(mask_logits.dtype))


def cls_loss(class_logits: torch.Tensor, target_index: torch.Tensor, null_weight: float = 0.1) -> torch.Tensor:
    """Weighted cross-entropy over ``C+1`` columns; the null column (last) has weight ``null_weight``."""
    n_cols = class_logits.shape[-1]
    weight = torch.ones(n_cols, dtype=class_logits.dtype)
    weight[-1] = null_weight
    return F.cross_entropy(class_logits.reshape(-1, n_cols), target_index.reshape(-1), weight=weight)


def cost_matrix(class_logits, mask_logits, targets: FrameTargets, w: LossWeights) -> torch.Tensor:
    """Matching cost ``[N_q, K]`` for one frame."""
    with torch.no_grad():
        prob = class_logits.softmax(-1)
        cls = -prob[:, targets.labels - 1]
        m = mask_logits.flatten(1)
        t = targets.masks.flatten(1).to(m.dtype)
        P = m.shape[1]
        # mean BCE(sigmoid(m), t) over pixels, as pos/neg parts
        pos = F.binary_cross_entropy_with_logits(m, torch.ones_like(m), reduction="none")
        neg = F.binary_cross_entropy_with_logits(m, torch.zeros_like(m), reduction="none")
        ce = (pos @ t.T + neg @ (1 - t).T) / P
        s = m.sigmoid()
        dice = 1 - (2 * s @ t.T + 1) / (s.sum(-1)[:, None] + t.sum(-1)[None, :] + 1)
        return w.lambda_cls * cls + w.lambda_mask * ce + w.lambda_dice * dice


def match_cost(class_logits_q, mask_logits_q, class_s: int, mask_s, w: LossWeights) -> float:
    """Cost of assigning one query to one target segment."""
    prob = class_logits_q.softmax(-1)[class_s - 1]
    p = mask_logits_q.sigmoid()
    return float(w.lambda_cls * -prob + w.lambda_mask * mask_ce_loss(p, mask_s)
                 + w.lambda_dice * dice_loss(p, mask_s))


def hungarian_match(preds: PredictionSet, targets: list[FrameTargets], w: LossWeights):
    """Per frame, ``(query_idx, target_idx)`` arrays of the min-cost assignment."""
    out = []
    n_q = preds.class_logits.shape[1]
    for t, tg in enumerate(targets):
        k = len(tg.labels)
        if k > n_q:
            raise MatchingError(f"frame {t}: {k} targets but only {n_q} queries")
        if k == 0:
            out.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
            continue
        c = cost_matrix(preds.class_logits[t], preds.mask_logits[t], tg, w)
        rows, cols = linear_sum_assignment(c.cpu().numpy())
        out.append((rows.astype(np.int64), cols.astype(np.int64)))
    return out


def loss_terms(preds: PredictionSet, targets: list[FrameTargets], assignment, w: LossWeights):
    """Unweighted ``(cls, mask_ce, dice)`` for a matched prediction set."""
    T, N, K1 = preds.class_logits.shape
    target_index = torch.full((T, N), K1 - 1, dtype=torch.long)
    src, tgt = [], []
    for t, (rows, cols) in enumerate(assignment):
        if len(rows):
            target_index[t, rows] = targets[t].labels[cols] - 1
            src.append(preds.mask_logits[t, rows])
            tgt.append(targets[t].masks[cols])
    l_cls = cls_loss(preds.class_logits, target_index, w.null_weight)
    if src:
        logits = torch.cat(src)
        target = torch.cat(tgt).to(logits.dtype)
        l_mask = sigmoid_ce_loss(logits, target)
        l_dice = dice_loss(logits.sigmoid(), target)
    else:
        l_mask = l_dice = preds.mask_logits.sum() * 0
    return l_cls, l_mask, l_dice


def loss_main(preds: PredictionSet, targets, assignment, w: LossWeights) -> torch.Tensor:
    l_cls, l_mask, l_dice = loss_terms(preds, targets, assignment, w)
    return w.lambda_cls * l_cls + w.lambda_mask * l_mask + w.lambda_dice * l_dice


def loss_total(main: torch.Tensor, aux_list, w: LossWeights) -> torch.Tensor:
    if not aux_list or w.lambda_aux == 0:
        return main
    return main + w.lambda_aux * torch.stack(list(aux_list)).mean()


def set_criterion(preds: PredictionSet, aux: list[PredictionSet], targets, w: LossWeights) -> torch.Tensor:
    """Total loss: matched main loss plus the mean of independently matched per-layer losses."""
    main = loss_main(preds, targets, hungarian_match(preds, targets, w), w)
    aux_losses = [loss_main(a, targets, hungarian_match(a, targets, w), w) for a in aux]
    return loss_total(main, aux_losses, w)
