"""Refinement by scanning pixels regrouped by their coarse class.

Pixels are labeled anode / cathode / background from the coarse maps
(background score = 1 - max(anode, cathode)), stably regrouped in that block
order with raster order inside each block, scanned as one sequence, and
put back in place.
"""
from __future__ import annotations

from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..ss2d import SelectiveScanParams
from .layers import ChannelLayerNorm, upsample_to

ANODE, CATHODE, BACKGROUND = 0, 1, 2


def semantic_labels(coarse_points):
    """(..., 2, H, W) probabilities -> (..., H, W) int64 labels in {0, 1, 2}."""
    coarse_points = torch.as_tensor(coarse_points)
    bg = 1.0 - coarse_points.max(dim=-3, keepdim=True).values
    return torch.cat([coarse_points, bg], dim=-3).argmax(dim=-3)


def reorder_index(labels) -> torch.Tensor:
    """Permutation (sequence position -> raster index) for (B, H, W) or (H, W) labels."""
    labels = torch.as_tensor(labels)
    flat = labels.reshape(*labels.shape[:-2], -1).long()
    n = flat.shape[-1]
    key = flat * n + torch.arange(n, device=flat.device)
    return torch.argsort(key, dim=-1)


def density_reorder(feature, coarse_points) -> Tuple[torch.Tensor, torch.Tensor]:
    """Group pixels by coarse class.

    ``feature`` is (B, C, H, W) with ``coarse_points`` (B, 2, H, W), or
    (H, W, C) with (H, W, 2). Returns the (B, N, C) / (N, C) sequence and the
    index map with ``sequence[k] = flat_feature[index_map[k]]``.
    """
    single = feature.dim() == 3
    if single:
        feature = feature.permute(2, 0, 1)[None]
        coarse_points = torch.as_tensor(coarse_points).permute(2, 0, 1)[None]
    if feature.shape[-2:] != coarse_points.shape[-2:] or feature.shape[0] != coarse_points.shape[0]:
        raise ValueError("feature and coarse map shapes differ")
    b, c = feature.shape[:2]
    index = reorder_index(semantic_labels(coarse_points.detach()))
    flat = feature.reshape(b, c, -1).transpose(1, 2)
    seq = torch.gather(flat, 1, index[..., None].expand(-1, -1, c))
    if single:
        return seq[0], index[0]
    return seq, index


def _check_permutation(index_map, n: int) -> None:
    if index_map.shape[-1] != n:
        raise ValueError(f"index map length {index_map.shape[-1]} != sequence length {n}")
    ok = torch.equal(torch.sort(index_map, dim=-1).values, torch.arange(n, device=index_map.device).expand_as(index_map))
    if not ok:
        raise ValueError("index map is not a bijection")


def inverse_reorder(sequence, index_map, height: int, width: int):
    """Place each token back at its raster position. (B, N, C) -> (B, C, H, W), or (N, C) -> (H, W, C)."""
    index_map = torch.as_tensor(index_map, device=sequence.device).long()
    single = sequence.dim() == 2
    if single:
        sequence, index_map = sequence[None], index_map[None]
    b, n, c = sequence.shape
    if n != height * width:
        raise ValueError(f"sequence length {n} does not match a {height}x{width} grid")
    _check_permutation(index_map, n)
    inv = torch.argsort(index_map, dim=-1)
    flat = torch.gather(sequence, 1, inv[..., None].expand(-1, -1, c))
    out = flat.transpose(1, 2).reshape(b, c, height, width)
    if single:
        return out[0].permute(1, 2, 0)
    return out


class DRSSM(nn.Module):
    """linear -> depthwise 3x3 -> SiLU -> reorder -> bidirectional scan -> inverse -> LN -> linear -> 2 logits."""

    def __init__(self, in_channels: int, width: int = 16, state_dim: int = 4, reorder: bool = True,
                 block: int = 16):
        super().__init__()
        self.reorder, self.block = reorder, block
        self.proj_in = nn.Conv2d(in_channels + 2, width, 1)
        self.dwconv = nn.Conv2d(width, width, 3, padding=1, groups=width)
        self.scans = nn.ModuleList(SelectiveScanParams(width, state_dim) for _ in range(2))
        self.norm = ChannelLayerNorm(width)
        self.head = nn.Conv2d(width, 2, 1)
        self.method = "blocked"

    def forward(self, f_low, coarse_points):
        h, w = coarse_points.shape[-2:]
        x = torch.cat([upsample_to(f_low, coarse_points), coarse_points], dim=1)
        x = F.silu(self.dwconv(self.proj_in(x)))
        b, c = x.shape[:2]
        if self.reorder:
            seq, index = density_reorder(x, coarse_points)
        else:
            seq = x.reshape(b, c, -1).transpose(1, 2)
            index = torch.arange(h * w, device=x.device).expand(b, -1)
        fwd = self.scans[0](seq, method=self.method, block=self.block)
        bwd = self.scans[1](seq.flip(1), method=self.method, block=self.block).flip(1)
        y = inverse_reorder(fwd + bwd, index, h, w)
        return self.head(self.norm(y))
