"""The full point-segmentation network and its checkpoint format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .decoder import CountingPredictor, LinePredictor, PointPredictor
from .drssm import DRSSM
from .encoder import Encoder, EncoderConfig
from .pfssm import PFSSM

CHECKPOINT_VERSION = 1
# five stride-2 stages leave a 2x2 grid at the deepest level; group norm needs more than one value
MIN_INPUT = 64


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dec_width: int = 32
    num_kernels: int = 8
    state_dim: int = 4
    drssm_width: int = 16
    filter_norm: bool = True
    pfssm_scan: bool = True
    prompt_filter: bool = True
    drssm_reorder: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d.get("encoder", {}))
        return cls(**d)


@dataclass
class ModelOutput:
    coarse_logits: torch.Tensor  # (B, 2, H, W) anode, cathode
    refined_logits: torch.Tensor
    line_logits: torch.Tensor
    counts: torch.Tensor  # (B, 2)

    @property
    def coarse_points(self):
        return torch.sigmoid(self.coarse_logits)

    @property
    def refined_points(self):
        return torch.sigmoid(self.refined_logits)

    @property
    def lines(self):
        return torch.sigmoid(self.line_logits)


class MDCNeXt(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder.widths
        self.encoder = Encoder(cfg.encoder)
        self.pfssm = nn.ModuleList(
            PFSSM(w, cfg.num_kernels, cfg.state_dim, cfg.filter_norm, cfg.pfssm_scan, cfg.prompt_filter)
            for w in widths
        )
        self.point_predictor = PointPredictor(widths, cfg.dec_width)
        self.counting_predictor = CountingPredictor(widths[4])
        self.line_predictor = LinePredictor(widths[0], widths[1])
        self.drssm = DRSSM(widths[0], cfg.drssm_width, cfg.state_dim, cfg.drssm_reorder)

    def encode(self, image):
        return self.encoder(image)

    def forward(self, image, prompt, prompt_features=None) -> ModelOutput:
        """``image`` is (B, 1, H, W); ``prompt`` is (1 or B, 1, H', W') with the same pyramid shapes."""
        h, w = image.shape[-2:]
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ValueError(f"input {h}x{w} is smaller than {MIN_INPUT}x{MIN_INPUT}")
        cur = self.encoder(image)
        pro = prompt_features if prompt_features is not None else self.encoder(prompt)
        enhanced = [m(p, c) for m, p, c in zip(self.pfssm, pro, cur)]
        size = image.shape[-2:]
        coarse_logits = self.point_predictor(enhanced, size)
        coarse = torch.sigmoid(coarse_logits)
        counts = self.counting_predictor(cur[4], coarse)
        line_logits = self.line_predictor(cur[0], cur[1], coarse)
        refined_logits = self.drssm(cur[0], coarse)
        return ModelOutput(coarse_logits, refined_logits, line_logits, counts)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def summary(model: nn.Module) -> str:
    lines = [f"{name}\t{tuple(p.shape)}" for name, p in model.named_parameters()]
    n = parameter_count(model)
    lines.append(f"total parameters\t{n}\t({n * 4 / 2**20:.2f} MB float32)")
    return "\n".join(lines)


def save_checkpoint(path: str | Path, model: MDCNeXt, extra: Optional[dict] = None) -> None:
    state = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)


def load_checkpoint(path: str | Path):
    """Returns (model in eval mode, extra dict)."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('version')}")
    model = MDCNeXt(ModelConfig.from_dict(state["config"]))
    model.load_state_dict(state["params"])
    model.eval()
    return model, state.get("extra", {})
