"""Manifest-backed samples, resizing between native and model frames, and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .annotations import EndpointAnnotation, iter_manifest, sort_points
from .labels import RadiusPolicy, make_labels, scale_annotation

PIXEL_MEAN, PIXEL_STD = 0.3, 0.25


@dataclass
class Sample:
    ann: EndpointAnnotation
    image: np.ndarray  # (H, W) uint8, native resolution


def load_samples(manifest: str | Path, root: Optional[str | Path] = None) -> List[Sample]:
    """Read a manifest and its images; image paths are relative to ``root`` (default: manifest dir)."""
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    out = []
    for rec in iter_manifest(manifest):
        ann = EndpointAnnotation.from_record(rec)
        img = np.asarray(Image.open(root / rec["file"]).convert("L"))
        if img.shape != (ann.height, ann.width):
            raise ValueError(f"{ann.image_id}: image is {img.shape[::-1]}, manifest says {ann.width}x{ann.height}")
        out.append(Sample(ann, img))
    return out


def resize_image(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Resize an (H, W) uint8 image to (w, h) = ``size`` with corner-aligned bilinear sampling."""
    w, h = size
    if img.shape == (h, w):
        return img
    t = torch.as_tensor(img, dtype=torch.float32)[None, None]
    r = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)
    return np.clip(np.rint(r[0, 0].numpy()), 0, 255).astype(np.uint8)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return ((torch.tensor(np.asarray(img), dtype=torch.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD)[None]


def hflip(img: np.ndarray, ann: EndpointAnnotation) -> Tuple[np.ndarray, EndpointAnnotation]:
    w = ann.width

    def f(pts):
        return tuple(sort_points(((w - 1 - x, y) for x, y in pts), ann.stack_axis))

    return img[:, ::-1].copy(), replace(ann, anode_points=f(ann.anode_points), cathode_points=f(ann.cathode_points))


def targets_for(ann: EndpointAnnotation, policy: RadiusPolicy, line_thickness: int = 1) -> Dict[str, torch.Tensor]:
    ls = make_labels(ann, policy, line_thickness)
    return {
        "points": torch.as_tensor(np.stack([ls.point_mask_anode, ls.point_mask_cathode]), dtype=torch.float32),
        "lines": torch.as_tensor(np.stack([ls.line_mask_anode, ls.line_mask_cathode]), dtype=torch.float32),
        "counts": torch.tensor([ls.count_anode, ls.count_cathode], dtype=torch.float32),
    }


class LabelCache:
    """Model-frame images and targets per (sample, size, flip), computed once."""

    def __init__(self, samples: Sequence[Sample], policy: RadiusPolicy, line_thickness: int = 1):
        self.samples, self.policy, self.line_thickness = samples, policy, line_thickness
        self._cache: Dict[tuple, tuple] = {}

    def get(self, idx: int, size: int, flip: bool):
        key = (idx, size, flip)
        if key not in self._cache:
            s = self.samples[idx]
            img = resize_image(s.image, (size, size))
            ann = scale_annotation(s.ann, size, size)
            if flip:
                img, ann = hflip(img, ann)
            self._cache[key] = (to_tensor(img), targets_for(ann, self.policy, self.line_thickness))
        return self._cache[key]
