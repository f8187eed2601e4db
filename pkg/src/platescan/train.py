"""Training loop: Adam(0.5, 0.999), gradient clipping, step decay and per-epoch prompt sampling."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import PIXEL_MEAN, PIXEL_STD, LabelCache, Sample, load_samples, resize_image, to_tensor
from .labels import RadiusPolicy
from .model import LossWeights, MDCNeXt, ModelConfig, save_checkpoint, total_loss

log = logging.getLogger(__name__)

DEVICE_ENV = "PLATESCAN_DEVICE"


class NoPromptError(ValueError):
    """Training set has no pure-plate (P) image to use as a prompt."""


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4
    input_size: int = 512
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    weight_decay: float = 1e-3
    grad_clip: float = 0.5
    lr_decay: float = 0.9
    lr_step_epochs: int = 120
    hflip: bool = True
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25)
    brightness: float = 0.2  # multiplicative jitter range, 0 disables
    label_policy: str = "Ada-0.3"
    line_thickness: int = 1
    seed: int = 0
    max_iterations: Optional[int] = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.scales:
            raise ValueError("scale set must be non-empty")
        for name in ("lr", "lr_decay", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.input_size < 64 or self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32 and at least 64")
        RadiusPolicy.parse(self.label_policy)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        for k in ("betas", "scales"):
            if k in d:
                d[k] = tuple(d[k])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def pure_indices(samples: Sequence[Sample]) -> List[int]:
    return [i for i, s in enumerate(samples) if s.ann.is_pure]


def prompt_tensor(image: np.ndarray, size: int) -> torch.Tensor:
    return to_tensor(resize_image(image, (size, size)))[None]


@dataclass
class TrainResult:
    model: MDCNeXt
    losses: List[Dict[str, float]]
    prompts: List[np.ndarray]


def resolve_device(name: Optional[str] = None) -> torch.device:
    """``name``, else $PLATESCAN_DEVICE, else cpu."""
    return torch.device(name or os.environ.get(DEVICE_ENV, "cpu"))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def train(cfg: TrainConfig, samples: Sequence[Sample], log_every: int = 50, device=None) -> TrainResult:
    if not samples:
        raise ValueError("empty training set")
    prompts = pure_indices(samples)
    if not prompts:
        raise NoPromptError("no pure-plate (P) image in the training set; generate data with pure_fraction > 0")
    device = resolve_device(device)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = MDCNeXt(cfg.model).to(device)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    cache = LabelCache(samples, RadiusPolicy.parse(cfg.label_policy), cfg.line_thickness)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    losses: List[Dict[str, float]] = []
    it = 0
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = lr_at_epoch(cfg, epoch)
        prompt_idx = int(rng.choice(prompts))
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                break
            batch = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            scale = float(rng.choice(cfg.scales))
            size = max(64, int(round(cfg.input_size * scale / 32)) * 32)
            imgs, tgts = [], []
            for i in batch:
                flip = bool(cfg.hflip and rng.random() < 0.5)
                img, tgt = cache.get(int(i), size, flip)
                if cfg.brightness > 0:
                    # scale raw intensities, expressed in normalized units
                    f = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
                    img = img * f + (f - 1) * PIXEL_MEAN / PIXEL_STD
                imgs.append(img)
                tgts.append(tgt)
            x = torch.stack(imgs).to(device)
            targets = {k: torch.stack([t[k] for t in tgts]).to(device) for k in tgts[0]}
            prompt = prompt_tensor(samples[prompt_idx].image, size).to(device)
            out = model(x, prompt)
            loss, comps = total_loss(out, targets, cfg.loss_weights)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            rec = {"iteration": it, "epoch": epoch, "total": float(loss.detach())}
            rec.update({k: float(v.detach()) for k, v in comps.items()})
            losses.append(rec)
            if log_every and it % log_every == 0:
                log.info("it %d epoch %d loss %.4f", it, epoch, rec["total"])
            it += 1
        if cfg.max_iterations is not None and it >= cfg.max_iterations:
            break
    model.eval().cpu()
    return TrainResult(model, losses, [samples[i].image for i in prompts])


def train_from_manifest(cfg: TrainConfig, manifest: str | Path, out_dir: str | Path, log_every: int = 50,
                        device=None) -> Path:
    """Train, then write ``checkpoint.pt`` and ``loss_curve.jsonl`` into ``out_dir``."""
    samples = load_samples(manifest)
    res = train(cfg, samples, log_every, device)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    save_checkpoint(ckpt, res.model, {
        "input_size": cfg.input_size,
        "label_policy": cfg.label_policy,
        "prompts": [p.tolist() for p in res.prompts],
        "train_config": cfg.to_dict(),
    })
    with (out / "loss_curve.jsonl").open("w", encoding="utf-8") as fh:
        for rec in res.losses:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return ckpt
