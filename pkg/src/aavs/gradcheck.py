"""Central finite-difference check of autograd gradients on sampled coordinates."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch


def fd_relative_error(fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                      coords: int = 10, eps: float = 1e-6, seed: int = 0) -> float:
    """Largest per-tensor relative error ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)``.

    ``fn`` must return a scalar computed from ``tensors`` (float64, requiring grad).
    Errors are norm-wise over ``coords`` randomly sampled entries of each tensor.
    Tensors whose sampled gradients are structurally zero (both norms below the
    finite-difference round-off level) are skipped.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    floor = 1e3 * np.finfo(np.float64).eps * max(abs(out.item()), 1.0) / eps
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            grad = t.grad.reshape(-1)
            idx = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
            auto, num = [], []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num.append((up - down) / (2 * eps))
                auto.append(grad[i].item())
            a, n = np.array(auto), np.array(num)
            scale = max(np.linalg.norm(a), np.linalg.norm(n))
            if scale > floor:
                worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
