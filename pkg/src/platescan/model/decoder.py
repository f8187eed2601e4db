"""Point, counting and line predictors."""
from __future__ import annotations

from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvNormAct, upsample_to


class PointPredictor(nn.Module):
    """Top-down fusion over five levels, then a two-channel (anode, cathode) head at input resolution.

    Returns logits of shape (B, 2, H, W).
    """

    def __init__(self, widths: Sequence[int], dec_width: int = 32):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("point predictor needs a 5-level pyramid")
        self.lateral = nn.ModuleList(nn.Conv2d(w, dec_width, 1) for w in widths)
        self.blocks = nn.ModuleList(ConvNormAct(dec_width, dec_width) for _ in widths)
        self.full = ConvNormAct(dec_width, dec_width)
        self.head = nn.Conv2d(dec_width, 2, 1)

    def forward(self, pyramid, out_size: Tuple[int, int]):
        if len(pyramid) != 5:
            raise ValueError(f"expected 5 pyramid levels, got {len(pyramid)}")
        d = None
        for i in reversed(range(5)):
            x = self.lateral[i](pyramid[i])
            if d is not None:
                x = x + upsample_to(d, x)
            d = self.blocks[i](x)
        return self.head(self.full(upsample_to(d, out_size)))


class CountingPredictor(nn.Module):
    """Plate counts from point-map-gated high-level features: ReLU(Conv(GAP(F * DS(M))))."""

    def __init__(self, channels: int):
        super().__init__()
        self.heads = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(2))
        for h in self.heads:
            nn.init.constant_(h.bias, 1.0)

    @staticmethod
    def gate(feature, point_map):
        """Downsample a (B, 1, H, W) map to the feature grid and multiply."""
        m = F.adaptive_avg_pool2d(point_map, feature.shape[-2:])
        return feature * m

    def forward(self, f_e5, point_maps):
        counts = []
        for ch, head in enumerate(self.heads):
            g = F.adaptive_avg_pool2d(self.gate(f_e5, point_maps[:, ch : ch + 1]), 1)
            counts.append(F.relu(head(g)).flatten(1))
        return torch.cat(counts, dim=1)


class LinePredictor(nn.Module):
    """Line logits (B, 2, H, W) from low-level features gated by the point maps, with a residual path."""

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.reduce2 = nn.Conv2d(c2, c1, 1)
        self.fuse = nn.Conv2d(c1, c1, 3, padding=1)
        self.gated = nn.ModuleList(nn.Conv2d(c1, c1, 3, padding=1) for _ in range(2))
        self.heads = nn.ModuleList(nn.Conv2d(c1, 1, 1) for _ in range(2))

    def low_level(self, f_e1, f_e2):
        return self.fuse(f_e1 + upsample_to(self.reduce2(f_e2), f_e1))

    def forward(self, f_e1, f_e2, point_maps):
        f12 = upsample_to(self.low_level(f_e1, f_e2), point_maps)
        logits = []
        for ch in range(2):
            r = self.gated[ch](point_maps[:, ch : ch + 1] * f12) + f12
            logits.append(self.heads[ch](r))
        return torch.cat(logits, dim=1)
