"""Synthetic X-ray battery corners with exact endpoint annotations.

Plates are drawn as anti-aliased strokes running along the plate-length axis
and stacked along ``stack_axis``; anodes and cathodes alternate a, c, a, ..., a.
A stroke's tip sits exactly at its annotated endpoint: the pixel whose center
lies on the endpoint receives half the stroke intensity.

Rendering order: plates, then interference artifacts, then blur and noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import (
    INTERFERENCE, Clarity, Difficulty, EndpointAnnotation, Shot, write_manifest,
)

ANODE_LEVEL = 190.0
CATHODE_LEVEL = 120.0
BACKGROUND_LEVEL = 35.0


class GeometryError(ValueError):
    """The requested scene does not fit inside the image."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 64
    n_cathode: int = 3
    plate_spacing: float = 6.0  # anode-to-cathode distance along the stack axis
    plate_length: float = 34.0
    overhang_mean: float = 3.5
    overhang_std: float = 0.8
    tilt_deg: float = 0.0
    interference: frozenset = frozenset()
    noise_std: float = 3.0
    blur_sigma: float = 0.0
    clarity: Clarity = Clarity.CLEAR
    stack_axis: str = "x"
    image_id: str = ""
    margin: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "interference", frozenset(self.interference))
        object.__setattr__(self, "clarity", Clarity(self.clarity))
        unknown = self.interference - set(INTERFERENCE)
        if unknown:
            raise ValueError(f"unknown interference {sorted(unknown)}")
        if self.n_cathode < 1:
            raise ValueError("n_cathode must be >= 1")
        if not self.overhang_mean > 0:
            raise ValueError("overhang_mean must be positive")
        if self.stack_axis not in ("x", "y"):
            raise ValueError("stack_axis must be 'x' or 'y'")

    @property
    def n_anode(self) -> int:
        return self.n_cathode + 1

    @property
    def attributes(self) -> frozenset:
        attrs = set(self.interference)
        if abs(self.tilt_deg) >= 1.0:
            attrs.add("T")
        if not attrs and self.clarity is Clarity.CLEAR:
            attrs.add("P")
        return frozenset(attrs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interference"] = sorted(self.interference)
        d["clarity"] = self.clarity.value
        return d


@dataclass
class _Plate:
    tip: np.ndarray  # (x, y) in the upright frame (stack along x, tips at the top)
    base: np.ndarray
    level: float
    half_width: float


def _stroke(canvas: np.ndarray, tip, base, half_width: float, level: float) -> None:
    """Add an anti-aliased flat-capped stroke from ``tip`` to ``base``."""
    tip, base = np.asarray(tip, float), np.asarray(base, float)
    d = base - tip
    length = float(np.hypot(*d))
    u = d / length
    h, w = canvas.shape
    pad = half_width + 2
    x0 = max(0, int(math.floor(min(tip[0], base[0]) - pad)))
    x1 = min(w - 1, int(math.ceil(max(tip[0], base[0]) + pad)))
    y0 = max(0, int(math.floor(min(tip[1], base[1]) - pad)))
    y1 = min(h - 1, int(math.ceil(max(tip[1], base[1]) + pad)))
    if x0 > x1 or y0 > y1:
        return
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(float)
    rx, ry = xx - tip[0], yy - tip[1]
    along = rx * u[0] + ry * u[1]
    perp = np.abs(-rx * u[1] + ry * u[0])
    cov = np.clip(half_width + 0.5 - perp, 0, 1) * np.clip(along + 0.5, 0, 1) * np.clip(length - along + 0.5, 0, 1)
    canvas[y0 : y1 + 1, x0 : x1 + 1] += level * cov


def _rotate(points: np.ndarray, center: np.ndarray, deg: float) -> np.ndarray:
    t = math.radians(deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (points - center) @ rot.T + center


def _layout(spec: SceneSpec, rng: np.random.Generator):
    """Plate geometry in the upright frame, before tilt. Returns (anodes, cathodes)."""
    # the upright frame always stacks along x; stack_axis='y' transposes at the end
    w, h = (spec.width, spec.height) if spec.stack_axis == "x" else (spec.height, spec.width)
    n_plates = spec.n_anode + spec.n_cathode
    span = (n_plates - 1) * spec.plate_spacing
    x_start = (w - span) / 2.0 + rng.uniform(-1.0, 1.0)
    tip_y = (h - spec.plate_length) / 2.0 - spec.overhang_mean / 2.0 + rng.uniform(-1.0, 1.0)
    anode_tips = tip_y + rng.normal(0.0, 0.4, spec.n_anode)
    base_y = tip_y + spec.plate_length
    lo, hi = 0.4 * spec.overhang_mean, spec.overhang_mean + 3 * spec.overhang_std
    overhang = np.clip(rng.normal(spec.overhang_mean, spec.overhang_std, spec.n_cathode), lo, hi)
    anodes, cathodes = [], []
    for j in range(spec.n_anode):
        x = x_start + 2 * j * spec.plate_spacing
        anodes.append(_Plate(np.array([x, anode_tips[j]]), np.array([x, base_y]), ANODE_LEVEL, 0.8))
    for j in range(spec.n_cathode):
        x = x_start + (2 * j + 1) * spec.plate_spacing
        y = 0.5 * (anode_tips[j] + anode_tips[j + 1]) + overhang[j]
        cathodes.append(_Plate(np.array([x, y]), np.array([x, base_y - 1.0]), CATHODE_LEVEL, 0.6))
    return anodes, cathodes, (w, h)


def render(spec: SceneSpec) -> Tuple[np.ndarray, EndpointAnnotation]:
    """Render one scene. Returns an (H, W) uint8 image and its exact annotation."""
    rng = np.random.default_rng(spec.seed)
    anodes, cathodes, (w, h) = _layout(spec, rng)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    for p in anodes + cathodes:
        p.tip, p.base = _rotate(np.stack([p.tip, p.base]), center, spec.tilt_deg)
    m = spec.margin
    for p in anodes + cathodes:
        for q in (p.tip, p.base):
            if not (m <= q[0] <= w - 1 - m and m <= q[1] <= h - 1 - m):
                raise GeometryError(f"plate point {q.round(2).tolist()} outside the {w}x{h} image margin")
    img = np.full((h, w), BACKGROUND_LEVEL)
    img += rng.uniform(-5, 5) * np.linspace(-1, 1, h)[:, None]
    for p in anodes + cathodes:
        _stroke(img, p.tip, p.base, p.half_width, p.level)
    _interference(img, spec, anodes, cathodes, rng)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    an = [tuple(map(float, p.tip)) for p in anodes]
    ca = [tuple(map(float, p.tip)) for p in cathodes]
    if spec.stack_axis == "y":
        img = np.ascontiguousarray(img.T)
        an = [(y, x) for x, y in an]
        ca = [(y, x) for x, y in ca]
    k = 0 if spec.stack_axis == "x" else 1
    if any(b[k] <= a[k] for pts in (an, ca) for a, b in zip(pts, pts[1:])):
        raise GeometryError("tilt too large: endpoints no longer strictly ordered along the stack axis")
    shot = Shot.CS if spec.plate_spacing >= 7 else (Shot.MS if spec.plate_spacing >= 5.5 else Shot.LS)
    ann = EndpointAnnotation(
        image_id=spec.image_id or f"synth_{spec.seed}",
        width=spec.width,
        height=spec.height,
        anode_points=tuple(an),
        cathode_points=tuple(ca),
        shot=shot,
        clarity=spec.clarity,
        attributes=spec.attributes,
        stack_axis=spec.stack_axis,
    ).validate()
    return img, ann


def _interference(img: np.ndarray, spec: SceneSpec, anodes, cathodes, rng) -> None:
    h, w = img.shape
    xs = [p.tip[0] for p in anodes + cathodes]
    left, right = min(xs), max(xs)
    if "SI" in spec.interference:
        # faint separator membranes between neighbouring plates, reaching past the anode tips
        plates = sorted(anodes + cathodes, key=lambda p: p.tip[0])
        for a, b in zip(plates, plates[1:]):
            mid_tip = 0.5 * (a.tip + b.tip) + np.array([0.0, -2.5])
            mid_base = 0.5 * (a.base + b.base)
            _stroke(img, mid_tip, mid_base, 0.3, 30.0)
    if "BI" in spec.interference:
        p = anodes[int(rng.integers(0, len(anodes)))]
        u = (p.base - p.tip) / np.linalg.norm(p.base - p.tip)
        side = np.array([-u[1], u[0]]) * rng.choice([-1.0, 1.0])
        fork_start = p.tip + 7.0 * u
        fork_end = p.tip + 2.5 * u + side * 0.35 * spec.plate_spacing
        _stroke(img, fork_end, fork_start, 0.5, 0.8 * p.level)
    if "TRI" in spec.interference:
        edge = rng.choice(["left", "right"])
        x0 = 0 if edge == "left" else w - 2
        img[:, x0 : x0 + 2] += 150.0
    if "TAI" in spec.interference:
        img[h - 2 :, int(left) : int(right) + 1] += 140.0
    if "PI" in spec.interference:
        # a neighbouring cell cut off by the top border: plates without visible tips
        edge_x = 1.0 if rng.random() < 0.5 else w - 2.0
        for i in range(2):
            x = edge_x + (i if edge_x < w / 2 else -i) * 0.5 * spec.plate_spacing
            _stroke(img, np.array([x, -1.0]), np.array([x, 0.45 * h]), 0.5, 90.0)
    if "II" in spec.interference:
        ramp = np.linspace(0.65, 1.35, w)
        if rng.random() < 0.5:
            ramp = ramp[::-1]
        img *= ramp[None, :]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    train: int = 12
    test: int = 8
    seed: int = 0
    width: int = 64
    height: int = 64
    pure_fraction: float = 0.25
    attribute_mix: Dict[str, float] = field(
        default_factory=lambda: {"II": 0.15, "PI": 0.15, "BI": 0.15, "TRI": 0.15, "TAI": 0.15, "SI": 0.2}
    )
    tilt_fraction: float = 0.2
    blur_fraction: float = 0.15
    n_cathode_range: Tuple[int, int] = (2, 4)
    spacing_range: Tuple[float, float] = (5.0, 7.0)
    # difficulty: attribute count (excluding P) and total plate count
    difficult_attributes: int = 1
    tough_attributes: int = 2
    difficult_plates: int = 8
    tough_plates: int = 10

    def __post_init__(self):
        if self.train <= 0 or self.test <= 0:
            raise ValueError("split sizes must be positive")
        if not (self.difficult_attributes <= self.tough_attributes and self.difficult_plates <= self.tough_plates):
            raise ValueError("difficulty thresholds must be monotone")
        unknown = set(self.attribute_mix) - set(INTERFERENCE)
        if unknown:
            raise ValueError(f"unknown attributes in mix: {sorted(unknown)}")
        self.n_cathode_range = tuple(self.n_cathode_range)
        self.spacing_range = tuple(self.spacing_range)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetConfig":
        keys = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in keys})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_cathode_range"] = list(self.n_cathode_range)
        d["spacing_range"] = list(self.spacing_range)
        return d


def assign_difficulty(ann: EndpointAnnotation, cfg: DatasetConfig) -> Difficulty:
    n_attr = len(ann.attributes - {"P"})
    n_plates = len(ann.anode_points) + len(ann.cathode_points)
    if n_attr >= cfg.tough_attributes or n_plates >= cfg.tough_plates:
        return Difficulty.TOUGH
    if n_attr >= cfg.difficult_attributes or n_plates >= cfg.difficult_plates:
        return Difficulty.DIFFICULT
    return Difficulty.REGULAR


def _quota(n: int, frac: float) -> int:
    return int(math.floor(frac * n + 0.5))


def plan_split(cfg: DatasetConfig, split: str, n: int, seed: int) -> List[SceneSpec]:
    """Scene recipes for one split with attribute counts fixed by quota."""
    rng = np.random.default_rng(seed)
    n_pure = _quota(n, cfg.pure_fraction)
    if split == "train" and cfg.pure_fraction > 0:
        n_pure = max(1, n_pure)
    order = rng.permutation(n)
    pure = set(order[:n_pure].tolist())
    others = [i for i in range(n) if i not in pure]
    inter: Dict[int, set] = {i: set() for i in range(n)}
    for attr in INTERFERENCE:
        k = min(len(others), _quota(n, cfg.attribute_mix.get(attr, 0.0)))
        for i in rng.permutation(others)[:k]:
            inter[int(i)].add(attr)
    tilted = set(rng.permutation(others)[: min(len(others), _quota(n, cfg.tilt_fraction))].tolist())
    blurred = set(rng.permutation(others)[: min(len(others), _quota(n, cfg.blur_fraction))].tolist())
    specs = []
    for i in range(n):
        n_c = int(rng.integers(cfg.n_cathode_range[0], cfg.n_cathode_range[1] + 1))
        spacing = float(rng.uniform(*cfg.spacing_range))
        n_plates = 2 * n_c + 1
        # keep the stack inside the image
        spacing = min(spacing, (cfg.width - 14) / (n_plates - 1))
        tilt = float(rng.choice([-1, 1]) * rng.uniform(2.0, 5.0)) if i in tilted else 0.0
        blur = float(rng.uniform(0.9, 1.3)) if i in blurred else 0.0
        specs.append(SceneSpec(
            seed=int(rng.integers(0, 2**31 - 1)),
            width=cfg.width,
            height=cfg.height,
            n_cathode=n_c,
            plate_spacing=spacing,
            plate_length=0.55 * cfg.height,
            overhang_mean=float(rng.uniform(2.5, 4.5)),
            overhang_std=0.7,
            tilt_deg=tilt,
            interference=frozenset(inter[i]),
            noise_std=float(rng.uniform(2.0, 5.0)),
            blur_sigma=blur,
            clarity=Clarity.BLUR if blur > 0 else Clarity.CLEAR,
            image_id=f"{split}_{i:05d}",
        ))
    return specs


def make_dataset(cfg: DatasetConfig, out_dir: str | Path) -> Dict[str, Path]:
    """Render the train and test splits. Returns the manifest path per split."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    manifests = {}
    for k, (split, n) in enumerate((("train", cfg.train), ("test", cfg.test))):
        img_dir = out / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        anns, extra = [], {}
        for spec in plan_split(cfg, split, n, seed=cfg.seed * 1000 + k):
            img, ann = render(spec)
            ann = replace(ann, difficulty=assign_difficulty(ann, cfg))
            fname = f"images/{split}/{ann.image_id}.png"
            Image.fromarray(img).save(out / fname)
            anns.append(ann)
            extra[ann.image_id] = {"file": fname}
        manifests[split] = out / f"{split}.jsonl"
        write_manifest(manifests[split], anns, extra)
    return manifests
