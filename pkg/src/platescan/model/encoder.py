"""Five-level convolutional pyramid shared by the prompt and current streams."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import torch.nn as nn

from .layers import ConvNormAct


@dataclass(frozen=True)
class EncoderConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 96, 128)
    strides: Tuple[int, ...] = (2, 2, 2, 2, 2)  # per stage; cumulative 1/2 ... 1/32
    in_channels: int = 1
    share_weights: bool = True

    def __post_init__(self):
        if len(self.widths) != 5 or len(self.strides) != 5:
            raise ValueError("encoder needs exactly 5 levels")
        if not self.share_weights:
            raise ValueError("prompt and current streams always share encoder weights")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        stages, cin = [], cfg.in_channels
        for w, s in zip(cfg.widths, cfg.strides):
            stages.append(nn.Sequential(ConvNormAct(cin, w, 3, s), ConvNormAct(w, w, 3, 1)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> List:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
