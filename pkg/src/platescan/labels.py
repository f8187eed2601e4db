"""Supervision targets from endpoint annotations, and endpoint extraction from point maps.

Pixel (row r, column c) has its center at coordinate (x=c, y=r). All masks are
``uint8`` arrays holding 0/1. Components use 8-connectivity throughout.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import line as draw_line

from .annotations import AnnotationError, EndpointAnnotation, Point, Polarity, axis_index

EIGHT = np.ones((3, 3), dtype=bool)
# A pixel whose center is within this distance of an endpoint is always drawn.
_NEAREST_PIXEL = math.sqrt(0.5) + 1e-9


class SinglePointWarning(UserWarning):
    """Adaptive radius requested for a polarity with one endpoint; radius 1 used."""


class RadiusKind(str, Enum):
    CONST = "Const"
    ADAPTIVE = "Adaptive"


@dataclass(frozen=True)
class RadiusPolicy:
    kind: RadiusKind
    value: float

    def __post_init__(self):
        object.__setattr__(self, "kind", RadiusKind(self.kind))
        if not self.value > 0:
            raise ValueError("radius policy value must be positive")
        if self.kind is RadiusKind.ADAPTIVE and not self.value < 1:
            raise ValueError("adaptive fraction must be < 1")

    @classmethod
    def parse(cls, text: str) -> "RadiusPolicy":
        """Parse ``Const-3`` / ``Ada-0.3`` style names."""
        kind, _, val = text.partition("-")
        if kind.lower().startswith("const"):
            return cls(RadiusKind.CONST, float(val))
        if kind.lower().startswith("ada"):
            return cls(RadiusKind.ADAPTIVE, float(val))
        raise ValueError(f"unknown radius policy {text!r}")

    def __str__(self) -> str:
        name = "Const" if self.kind is RadiusKind.CONST else "Ada"
        return f"{name}-{self.value:g}"


@dataclass
class LabelSet:
    point_mask_anode: np.ndarray
    point_mask_cathode: np.ndarray
    line_mask_anode: np.ndarray
    line_mask_cathode: np.ndarray
    count_anode: int
    count_cathode: int


def _round_half_up(v):
    return np.floor(np.asarray(v, dtype=float) + 0.5)


def _pairwise_nearest(pts: np.ndarray) -> np.ndarray:
    if len(pts) < 2:
        return np.full(len(pts), np.inf)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def point_radii(ann: EndpointAnnotation, policy: RadiusPolicy, polarity: Polarity | str) -> np.ndarray:
    """Per-endpoint disk radii after the non-touching cap."""
    pts = np.asarray(ann.points(polarity), dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise AnnotationError(f"{ann.image_id}: no {Polarity(polarity).value} endpoints")
    if policy.kind is RadiusKind.CONST:
        radii = np.full(len(pts), float(policy.value))
    elif len(pts) == 1:
        warnings.warn(f"{ann.image_id}: single {Polarity(polarity).value} endpoint, radius 1", SinglePointWarning)
        radii = np.ones(1)
    else:
        gaps = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1))
        prev_gap = np.concatenate([[np.inf], gaps])
        next_gap = np.concatenate([gaps, [np.inf]])
        diam = policy.value * np.minimum(prev_gap, next_gap)
        radii = np.maximum(1.0, _round_half_up(diam / 2.0))

    # Two pixels are 8-adjacent iff their centers are within sqrt(2); keep every
    # cross-disk pixel pair farther apart than that.
    cap = (_pairwise_nearest(pts) - math.sqrt(2.0)) / 2.0 - 1e-9
    if np.any(cap < _NEAREST_PIXEL):
        raise AnnotationError(
            f"{ann.image_id}: {Polarity(polarity).value} endpoints closer than {2 * _NEAREST_PIXEL + math.sqrt(2):.2f} px"
        )
    return np.minimum(radii, cap)


def _paint_disk(mask: np.ndarray, x: float, y: float, r: float) -> None:
    h, w = mask.shape
    x0, x1 = max(0, math.floor(x - r)), min(w - 1, math.ceil(x + r))
    y0, y1 = max(0, math.floor(y - r)), min(h - 1, math.ceil(y + r))
    if x0 <= x1 and y0 <= y1:
        yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        mask[y0 : y1 + 1, x0 : x1 + 1] |= ((xx - x) ** 2 + (yy - y) ** 2 <= r * r).astype(np.uint8)
    cx = min(w - 1, max(0, int(_round_half_up(x))))
    cy = min(h - 1, max(0, int(_round_half_up(y))))
    mask[cy, cx] = 1


def generate_point_mask(ann: EndpointAnnotation, policy: RadiusPolicy, polarity: Polarity | str) -> np.ndarray:
    radii = point_radii(ann, policy, polarity)
    mask = np.zeros((ann.height, ann.width), dtype=np.uint8)
    for (x, y), r in zip(ann.points(polarity), radii):
        _paint_disk(mask, x, y, float(r))
    return mask


def _disk_footprint(thickness: int) -> np.ndarray:
    r = (thickness - 1) / 2.0
    n = int(math.ceil(r))
    yy, xx = np.mgrid[-n : n + 1, -n : n + 1]
    return (xx * xx + yy * yy) <= r * r + 1e-9


def generate_line_mask(ann: EndpointAnnotation, polarity: Polarity | str, thickness: int = 1) -> np.ndarray:
    """Polyline through the ordered endpoints, rasterized with Bresenham and dilated."""
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    pts = ann.points(polarity)
    if not pts:
        raise AnnotationError(f"{ann.image_id}: no {Polarity(polarity).value} endpoints")
    h, w = ann.height, ann.width
    mask = np.zeros((h, w), dtype=np.uint8)
    ipts = [
        (min(w - 1, max(0, int(_round_half_up(x)))), min(h - 1, max(0, int(_round_half_up(y)))))
        for x, y in pts
    ]
    mask[ipts[0][1], ipts[0][0]] = 1
    for (xa, ya), (xb, yb) in zip(ipts, ipts[1:]):
        rr, cc = draw_line(ya, xa, yb, xb)
        mask[rr, cc] = 1
    if thickness > 1:
        mask = ndimage.binary_dilation(mask, structure=_disk_footprint(thickness)).astype(np.uint8)
    return mask


def derive_count_label(mask: np.ndarray) -> int:
    _, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT)
    return int(n)


def extract_points(prob_map: np.ndarray, threshold: float = 0.5, stack_axis: str = "x") -> List[Point]:
    """Centers of the bounding rectangles of the thresholded components, in stacking order."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    k = axis_index(stack_axis)
    labeled, n = ndimage.label(np.asarray(prob_map) > threshold, structure=EIGHT)
    pts = []
    for sl in ndimage.find_objects(labeled):
        rows, cols = sl
        pts.append(((cols.start + cols.stop - 1) / 2.0, (rows.start + rows.stop - 1) / 2.0))
    pts.sort(key=lambda p: (p[k], p[1 - k]))
    return pts


def make_labels(
    ann: EndpointAnnotation, policy: RadiusPolicy, line_thickness: int = 1
) -> LabelSet:
    pa = generate_point_mask(ann, policy, Polarity.ANODE)
    pc = generate_point_mask(ann, policy, Polarity.CATHODE)
    return LabelSet(
        point_mask_anode=pa,
        point_mask_cathode=pc,
        line_mask_anode=generate_line_mask(ann, Polarity.ANODE, line_thickness),
        line_mask_cathode=generate_line_mask(ann, Polarity.CATHODE, line_thickness),
        count_anode=derive_count_label(pa),
        count_cathode=derive_count_label(pc),
    )


def scale_annotation(ann: EndpointAnnotation, width: int, height: int) -> EndpointAnnotation:
    """Map endpoints into a ``width`` x ``height`` frame with corner-aligned linear scaling."""
    sx = (width - 1) / (ann.width - 1) if ann.width > 1 else 1.0
    sy = (height - 1) / (ann.height - 1) if ann.height > 1 else 1.0

    def f(pts: Sequence[Point]):
        return tuple((x * sx, y * sy) for x, y in pts)

    return EndpointAnnotation(
        image_id=ann.image_id,
        width=width,
        height=height,
        anode_points=f(ann.anode_points),
        cathode_points=f(ann.cathode_points),
        shot=ann.shot,
        clarity=ann.clarity,
        attributes=ann.attributes,
        difficulty=ann.difficulty,
        stack_axis=ann.stack_axis,
    )


def rescale_points(points: Sequence[Point], src: Tuple[int, int], dst: Tuple[int, int]) -> List[Point]:
    """Corner-aligned mapping of (x, y) points from a (w, h) frame ``src`` to ``dst``."""
    (sw, sh), (dw, dh) = src, dst
    sx = (dw - 1) / (sw - 1) if sw > 1 else 1.0
    sy = (dh - 1) / (sh - 1) if sh > 1 else 1.0
    return [(x * sx, y * sy) for x, y in points]


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)
