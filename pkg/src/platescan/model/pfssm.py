"""Prompt-conditioned dynamic filtering followed by 2D selective scanning."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..ss2d import SS2D
from .layers import ChannelLayerNorm, group_norm


class PromptFilter(nn.Module):
    """3x3 convolution whose kernel is a prompt-weighted mixture of K base kernels.

    ``a = softmax(conv(GAP(prompt)))`` and ``W = sum_k a_k W_k`` is applied to the
    current features with stride 1, dilation 1 and same padding.
    """

    def __init__(self, channels: int, num_kernels: int = 8):
        super().__init__()
        if num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        self.channels, self.num_kernels = channels, num_kernels
        self.attn = nn.Conv2d(channels, num_kernels, 1)
        self.weight = nn.Parameter(torch.empty(num_kernels, channels, channels, 3, 3))
        for k in range(num_kernels):
            nn.init.kaiming_uniform_(self.weight[k], a=math.sqrt(5))

    def attention(self, f_prompt):
        """(B, K) soft attention over base kernels."""
        return torch.softmax(self.attn(F.adaptive_avg_pool2d(f_prompt, 1)).flatten(1), dim=1)

    def aggregated_kernel(self, f_prompt):
        return torch.einsum("bk,koihw->boihw", self.attention(f_prompt), self.weight)

    def forward(self, f_prompt, f_current):
        b, c, h, w = f_current.shape
        if f_prompt.shape[1] != c:
            raise ValueError(f"prompt has {f_prompt.shape[1]} channels, current has {c}")
        kernel = self.aggregated_kernel(f_prompt)
        if kernel.shape[0] == 1 and b > 1:
            kernel = kernel.expand(b, -1, -1, -1, -1)
        elif kernel.shape[0] != b:
            raise ValueError("prompt batch must be 1 or match the current batch")
        out = F.conv2d(f_current.reshape(1, b * c, h, w), kernel.reshape(b * c, c, 3, 3), padding=1, groups=b)
        return out.reshape(b, c, h, w)


class PFSSM(nn.Module):
    """filter -> (norm) -> SiLU -> SS2D -> LayerNorm -> linear. Output shape equals input shape."""

    def __init__(self, channels: int, num_kernels: int = 8, state_dim: int = 4,
                 filter_norm: bool = True, use_scan: bool = True, use_filter: bool = True,
                 share_params: bool = False):
        super().__init__()
        self.use_filter, self.use_scan = use_filter, use_scan
        self.filter = PromptFilter(channels, num_kernels)
        self.norm = group_norm(channels) if filter_norm else nn.Identity()
        self.scan = SS2D(channels, state_dim, share_params=share_params)
        self.out_norm = ChannelLayerNorm(channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, f_prompt, f_current):
        x = self.filter(f_prompt, f_current) if self.use_filter else f_current
        x = F.silu(self.norm(x))
        if self.use_scan:
            x = self.scan(x)
        return self.proj(self.out_norm(x))
