"""Training losses: boundary-weighted BCE + IoU per map, L1 on counts, and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    refine: float = 1.0
    coarse: float = 1.0
    count: float = 0.05
    line: float = 0.5


def local_mean(mask, window: int = 31):
    """Zero-padded box mean, computed separably (same values as a 2D average pool)."""
    pad = window // 2
    m = F.avg_pool2d(mask, (window, 1), stride=1, padding=(pad, 0))
    return F.avg_pool2d(m, (1, window), stride=1, padding=(0, pad))


def structure_loss(pred, mask, from_logits: bool = True, window: int = 31, eps: float = 1e-7):
    """Weighted BCE plus weighted IoU, averaged over the batch.

    ``pred`` and ``mask`` are (B, H, W) or (B, 1, H, W). Pixels are weighted by
    ``1 + 5 * |local_mean(mask) - mask|`` over a ``window`` x ``window`` box.
    With ``from_logits=False`` ``pred`` holds probabilities, clamped to [eps, 1 - eps].
    """
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(mask.shape)}")
    if pred.dim() == 3:
        pred, mask = pred.unsqueeze(1), mask.unsqueeze(1)
    mask = mask.to(pred.dtype)
    weit = 1 + 5 * torch.abs(local_mean(mask, window) - mask)
    if from_logits:
        bce = F.binary_cross_entropy_with_logits(pred, mask, reduction="none")
        prob = torch.sigmoid(pred)
    else:
        prob = pred.clamp(eps, 1 - eps)
        bce = -(mask * torch.log(prob) + (1 - mask) * torch.log1p(-prob))
    wbce = (weit * bce).sum(dim=(2, 3)) / weit.sum(dim=(2, 3))
    inter = (prob * mask * weit).sum(dim=(2, 3))
    union = ((prob + mask) * weit).sum(dim=(2, 3))
    wiou = 1 - (inter + 1) / (union - inter + 1)
    return (wbce + wiou).mean()


def _two_channel(pred, mask):
    return sum(structure_loss(pred[:, ch], mask[:, ch]) for ch in range(pred.shape[1]))


def combine(components: Mapping[str, torch.Tensor | float], weights: LossWeights = LossWeights()):
    return (weights.refine * components["refine"] + weights.coarse * components["coarse"]
            + weights.count * components["count"] + weights.line * components["line"])


def loss_components(outputs, targets) -> Dict[str, torch.Tensor]:
    """``targets`` holds ``points`` (B,2,H,W), ``lines`` (B,2,H,W) and ``counts`` (B,2)."""
    return {
        "refine": _two_channel(outputs.refined_logits, targets["points"]),
        "coarse": _two_channel(outputs.coarse_logits, targets["points"]),
        "count": (outputs.counts - targets["counts"].to(outputs.counts.dtype)).abs().sum(1).mean(),
        "line": _two_channel(outputs.line_logits, targets["lines"]),
    }


def total_loss(outputs, targets, weights: LossWeights = LossWeights()):
    """Returns (total, components)."""
    comps = loss_components(outputs, targets)
    return combine(comps, weights), comps
