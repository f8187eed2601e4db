"""Selective state-space scan and its four-direction 2D extension.

Recurrence per channel c and state n (h_0 = 0)::

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = <C_t, h_t> + D * x_t

Tensors are laid out ``(batch, L, channels)`` for sequences and
``(batch, channels, H, W)`` for feature grids.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ScanError(ValueError):
    pass


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor):
    """Zero-order hold on A, Euler on B. Returns (dA, dB) of shape (batch, L, C, N)."""
    dA = torch.exp(delta.unsqueeze(-1) * A)
    dB = delta.unsqueeze(-1) * B.unsqueeze(-2)
    return dA, dB


def scan_sequential(x, dA, dB, C, D):
    """Reference left-to-right recurrence on discretized parameters."""
    batch, L, ch = x.shape
    h = x.new_zeros(batch, ch, dA.shape[-1])
    ys = []
    for t in range(L):
        h = dA[:, t] * h + dB[:, t] * x[:, t, :, None]
        ys.append((h * C[:, t, None, :]).sum(-1))
    return torch.stack(ys, dim=1) + D * x


def _prefix_scan(a, b, dim: int):
    """Inclusive scan of h_t = a_t h_{t-1} + b_t along ``dim`` (Hillis-Steele doubling).

    Returns (cumulative decay, state) with the same shapes as the inputs.
    """
    n = a.shape[dim]
    off = 1
    while off < n:
        a_prev = torch.cat([torch.ones_like(a.narrow(dim, 0, off)), a.narrow(dim, 0, n - off)], dim)
        b_prev = torch.cat([torch.zeros_like(b.narrow(dim, 0, off)), b.narrow(dim, 0, n - off)], dim)
        b = a * b_prev + b
        a = a * a_prev
        off *= 2
    return a, b


def _blocked_states(a, b, block: int):
    """All states h_t for a (batch, L, C, N) problem, scanning within blocks then carrying across."""
    batch, L = a.shape[:2]
    rest = a.shape[2:]
    nb = -(-L // block)
    pad = nb * block - L
    if pad:
        a = torch.cat([a, a.new_ones(batch, pad, *rest)], 1)
        b = torch.cat([b, b.new_zeros(batch, pad, *rest)], 1)
    a = a.reshape(batch, nb, block, *rest)
    b = b.reshape(batch, nb, block, *rest)
    a_cum, h_loc = _prefix_scan(a, b, dim=2)
    if nb > 1:
        # carry[k] = state entering block k
        tot_a, tot_h = a_cum[:, :, -1], h_loc[:, :, -1]
        if nb > block:
            ends = _blocked_states(tot_a, tot_h, block)
        else:
            _, ends = _prefix_scan(tot_a, tot_h, dim=1)
        carry = torch.cat([torch.zeros_like(ends[:, :1]), ends[:, :-1]], 1)
        h_loc = h_loc + a_cum * carry.unsqueeze(2)
    return h_loc.reshape(batch, nb * block, *rest)[:, :L]


def scan_blocked(x, dA, dB, C, D, block: int = 16):
    """Same result as :func:`scan_sequential`, computed with a blocked prefix scan."""
    if block < 2:
        raise ScanError("block size must be >= 2")
    h = _blocked_states(dA, dB * x.unsqueeze(-1), max(2, min(block, x.shape[1])))
    return (h * C.unsqueeze(-2)).sum(-1) + D * x


def selective_scan_1d(x, delta, A, B, C, D, method: str = "blocked", block: int = 16):
    """Selective scan over ``x`` (batch, L, C) or (L, C).

    ``delta`` matches ``x``; ``A`` is (C, N); ``B``/``C`` are (batch, L, N); ``D`` is (C,).
    """
    squeeze = x.dim() == 2
    if squeeze:
        x, delta, B, C = x[None], delta[None], B[None], C[None]
    if x.shape[1] < 1:
        raise ScanError("sequence length must be >= 1")
    for name, t in (("x", x), ("delta", delta), ("B", B), ("C", C)):
        if not torch.isfinite(t).all():
            raise ScanError(f"non-finite values in {name}")
    dA, dB = discretize(delta, A, B)
    if method == "sequential":
        y = scan_sequential(x, dA, dB, C, D)
    elif method == "blocked":
        y = scan_blocked(x, dA, dB, C, D, block)
    else:
        raise ScanError(f"unknown scan method {method!r}")
    return y[0] if squeeze else y


class SelectiveScanParams(nn.Module):
    """Input-dependent projections (delta, B, C) plus A and D for one scan direction.

    With ``selective=False`` delta, B and C are learned constants, which makes
    the scan linear in its input.
    """

    def __init__(self, channels: int, state_dim: int = 4, selective: bool = True,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.channels, self.state_dim, self.selective = channels, state_dim, selective
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(channels, 1))
        self.D = nn.Parameter(torch.ones(channels))
        dt = torch.exp(torch.linspace(math.log(dt_min), math.log(dt_max), channels))
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        if selective:
            self.dt_proj = nn.Linear(channels, channels, bias=False)
            self.B_proj = nn.Linear(channels, state_dim, bias=False)
            self.C_proj = nn.Linear(channels, state_dim, bias=False)
            nn.init.normal_(self.dt_proj.weight, std=channels ** -0.5 * 0.1)
        else:
            self.B0 = nn.Parameter(torch.randn(state_dim) * state_dim ** -0.5)
            self.C0 = nn.Parameter(torch.randn(state_dim) * state_dim ** -0.5)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def project(self, x):
        if self.selective:
            delta = F.softplus(self.dt_proj(x) + self.dt_bias)
            return delta, self.B_proj(x), self.C_proj(x)
        shape = x.shape[:-1]
        delta = F.softplus(self.dt_bias).expand(*shape, self.channels)
        return delta, self.B0.expand(*shape, self.state_dim), self.C0.expand(*shape, self.state_dim)

    def forward(self, x, method: str = "blocked", block: int = 16):
        delta, B, C = self.project(x)
        return selective_scan_1d(x, delta, self.A, B, C, self.D, method=method, block=block)


class Direction(str, Enum):
    ROW_FORWARD = "row-forward"
    ROW_BACKWARD = "row-backward"
    COL_FORWARD = "col-forward"
    COL_BACKWARD = "col-backward"


DIRECTIONS = (Direction.ROW_FORWARD, Direction.ROW_BACKWARD, Direction.COL_FORWARD, Direction.COL_BACKWARD)


class ScanArrangement:
    """Flattening of an H x W grid into independent line sequences for one direction.

    Row directions produce H sequences of length W, column directions W
    sequences of length H; backward directions reverse each line.
    """

    def __init__(self, direction: Direction | str, height: int, width: int):
        self.direction = Direction(direction)
        self.height, self.width = height, width
        grid = np.arange(height * width).reshape(height, width)
        if self.direction in (Direction.COL_FORWARD, Direction.COL_BACKWARD):
            grid = grid.T
        if self.direction in (Direction.ROW_BACKWARD, Direction.COL_BACKWARD):
            grid = grid[:, ::-1]
        self.lines, self.length = grid.shape
        self.flat_index = np.ascontiguousarray(grid).reshape(-1)  # sequence position -> raster index
        self.inverse_index = np.argsort(self.flat_index)  # raster index -> sequence position

    def flatten(self, feat):
        """(B, C, H, W) -> (B * lines, length, C)."""
        b, c = feat.shape[:2]
        seq = feat.reshape(b, c, -1)[:, :, torch.as_tensor(self.flat_index, device=feat.device)]
        return seq.reshape(b, c, self.lines, self.length).permute(0, 2, 3, 1).reshape(b * self.lines, self.length, c)

    def unflatten(self, seq, batch: int):
        """Inverse of :meth:`flatten`."""
        c = seq.shape[-1]
        flat = seq.reshape(batch, self.lines * self.length, c).permute(0, 2, 1)
        flat = flat[:, :, torch.as_tensor(self.inverse_index, device=seq.device)]
        return flat.reshape(batch, c, self.height, self.width)


def ss2d(feature, scans: Sequence[SelectiveScanParams], method: str = "blocked", block: int = 16):
    """Four-direction scan merged by sum in the fixed order row-f, row-b, col-f, col-b.

    ``scans`` holds one module per direction, or a single module shared by all four.
    ``feature`` is (B, C, H, W) or (H, W, C).
    """
    channels_last = feature.dim() == 3
    if channels_last:
        feature = feature.permute(2, 0, 1).unsqueeze(0)
    if len(scans) not in (1, 4):
        raise ScanError("ss2d needs 1 shared or 4 per-direction scan modules")
    b, _, h, w = feature.shape
    if h * w < 1:
        raise ScanError("empty grid")
    out = None
    for i, d in enumerate(DIRECTIONS):
        arr = ScanArrangement(d, h, w)
        scan = scans[0] if len(scans) == 1 else scans[i]
        y = arr.unflatten(scan(arr.flatten(feature), method=method, block=block), b)
        out = y if out is None else out + y
    if channels_last:
        out = out[0].permute(1, 2, 0)
    return out


class SS2D(nn.Module):
    def __init__(self, channels: int, state_dim: int = 4, share_params: bool = False, selective: bool = True):
        super().__init__()
        self.share_params = share_params
        n = 1 if share_params else 4
        self.scans = nn.ModuleList(SelectiveScanParams(channels, state_dim, selective) for _ in range(n))
        self.method = "blocked"

    def forward(self, x):
        return ss2d(x, list(self.scans), method=self.method)
