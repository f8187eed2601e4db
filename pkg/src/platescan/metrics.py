"""Coordinate-level plate metrics, pixel segmentation scores and split aggregation.

Localization and overhang errors are defined only on images whose plate counts
are exact; such metrics are ``None`` when no image qualifies (printed as a dash).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .annotations import EndpointAnnotation, Point, Polarity, axis_index

MODES = ("pixel", "paper")
SPLITS = ("regular", "difficult", "tough")
COORD_METRICS = ("AN_MAE", "CN_MAE", "AN_ACC", "CN_ACC", "PN_ACC", "AL_MAE", "CL_MAE", "OH_MAE")
SEG_METRICS = ("PA", "mIoU", "mDice", "BER", "MAE")


class MetricError(ValueError):
    pass


@dataclass
class ImageResult:
    pred_anode: List[Point]
    pred_cathode: List[Point]
    gt: EndpointAnnotation
    pred_point_maps: Optional[np.ndarray] = None  # (2, H, W) anode/cathode probabilities

    def pred(self, polarity: Polarity | str) -> List[Point]:
        return self.pred_anode if Polarity(polarity) is Polarity.ANODE else self.pred_cathode


@dataclass
class SegScores:
    PA: float
    mIoU: float
    mDice: float
    BER: float
    MAE: float
    skipped: Tuple[str, ...] = ()


@dataclass
class MetricReport:
    AN_MAE: Optional[float]
    CN_MAE: Optional[float]
    AN_ACC: Optional[float]
    CN_ACC: Optional[float]
    PN_ACC: Optional[float]
    AL_MAE: Optional[float]
    CL_MAE: Optional[float]
    OH_MAE: Optional[float]
    N: int = 0
    N_p: int = 0
    seg: Optional[Dict[str, Optional[float]]] = None
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# counting


def count_mae(pairs: Sequence[Tuple[int, int]]) -> float:
    if len(pairs) == 0:
        raise MetricError("count_mae needs at least one image")
    return math.fsum(abs(int(p) - int(g)) for p, g in pairs) / len(pairs)


def count_acc(pairs: Sequence[Tuple[int, int]]) -> float:
    if len(pairs) == 0:
        raise MetricError("count_acc needs at least one image")
    return sum(int(p) == int(g) for p, g in pairs) / len(pairs)


def _counts_exact(r: ImageResult, polarity: Polarity) -> bool:
    return len(r.pred(polarity)) == r.gt.count(polarity)


def pair_acc(results: Sequence[ImageResult]) -> Optional[float]:
    """Fraction of images whose anode and cathode counts are both exact."""
    if not results:
        return None
    hits = sum(_counts_exact(r, Polarity.ANODE) and _counts_exact(r, Polarity.CATHODE) for r in results)
    return hits / len(results)


# ---------------------------------------------------------------------------
# localization


def _check_sorted(points: Sequence[Point], stack_axis: str, what: str) -> None:
    k = axis_index(stack_axis)
    for a, b in zip(points, points[1:]):
        if (b[k], b[1 - k]) < (a[k], a[1 - k]):
            raise MetricError(f"{what} coordinates are not sorted along {stack_axis}")


def _scale(r: ImageResult, mode: str) -> float:
    if mode == "pixel":
        return 1.0
    if mode == "paper":
        return 1.0 / (r.gt.width * r.gt.height)
    raise MetricError(f"unknown normalization mode {mode!r}")


def _image_localization_error(r: ImageResult, polarity: Polarity, mode: str) -> float:
    pred, gt = r.pred(polarity), r.gt.points(polarity)
    _check_sorted(pred, r.gt.stack_axis, f"{r.gt.image_id} predicted {polarity.value}")
    _check_sorted(gt, r.gt.stack_axis, f"{r.gt.image_id} ground-truth {polarity.value}")
    errs = [math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in zip(pred, gt)]
    return _scale(r, mode) * math.fsum(errs) / len(errs)


def localization_mae(results: Sequence[ImageResult], polarity: Polarity | str, mode: str = "pixel") -> Optional[float]:
    """Mean endpoint error over images with an exact count for ``polarity``; None if none qualify."""
    polarity = Polarity(polarity)
    per_image = [_image_localization_error(r, polarity, mode) for r in results if _counts_exact(r, polarity)]
    if not per_image:
        return None
    return math.fsum(per_image) / len(per_image)


def overhang_values(anodes: Sequence[Point], cathodes: Sequence[Point], axis: int) -> List[float]:
    """Per-cathode sum of offsets to its two neighboring anodes along coordinate ``axis``."""
    if len(anodes) != len(cathodes) + 1:
        raise MetricError("overhang needs exactly one more anode than cathodes")
    return [
        abs(c[axis] - anodes[j][axis]) + abs(c[axis] - anodes[j + 1][axis]) for j, c in enumerate(cathodes)
    ]


def _overhang_axis(stack_axis: str, overhang_axis: str) -> int:
    k = axis_index(stack_axis)
    if overhang_axis == "perpendicular":
        return 1 - k
    if overhang_axis == "stack":
        return k
    raise MetricError(f"unknown overhang axis {overhang_axis!r}")


def overhang_mae(
    results: Sequence[ImageResult], mode: str = "pixel", overhang_axis: str = "perpendicular"
) -> Tuple[Optional[float], List[str]]:
    """OH-MAE over images with both counts exact and one more anode than cathodes.

    Returns ``(value, flagged_image_ids)``; images with correct counts but a
    non-alternating stack are skipped and flagged.
    """
    per_image, flagged = [], []
    for r in results:
        if not (_counts_exact(r, Polarity.ANODE) and _counts_exact(r, Polarity.CATHODE)):
            continue
        gt = r.gt
        if gt.count(Polarity.ANODE) != gt.count(Polarity.CATHODE) + 1:
            flagged.append(gt.image_id)
            continue
        for pts, what in ((r.pred_anode, "predicted anode"), (r.pred_cathode, "predicted cathode"),
                          (gt.anode_points, "ground-truth anode"), (gt.cathode_points, "ground-truth cathode")):
            _check_sorted(pts, gt.stack_axis, f"{gt.image_id} {what}")
        ax = _overhang_axis(gt.stack_axis, overhang_axis)
        o_pred = overhang_values(r.pred_anode, r.pred_cathode, ax)
        o_gt = overhang_values(gt.anode_points, gt.cathode_points, ax)
        err = math.fsum(abs(a - b) for a, b in zip(o_pred, o_gt)) / len(o_gt)
        per_image.append(_scale(r, mode) * err)
    if not per_image:
        return None, flagged
    return math.fsum(per_image) / len(per_image), flagged


# ---------------------------------------------------------------------------
# segmentation


def seg_metrics(pred_map: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> SegScores:
    pred_map = np.asarray(pred_map, dtype=np.float64)
    gt = np.asarray(gt_mask) > 0
    if pred_map.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred_map.shape} vs {gt.shape}")
    pb = pred_map > threshold
    tp = float(np.sum(pb & gt))
    tn = float(np.sum(~pb & ~gt))
    fp = float(np.sum(pb & ~gt))
    fn = float(np.sum(~pb & gt))
    total = tp + tn + fp + fn
    skipped = []
    ious, dices = [], []
    for name, t, f1, f2 in (("fg", tp, fp, fn), ("bg", tn, fn, fp)):
        if t + f1 + f2 == 0:
            skipped.append(name)
            continue
        ious.append(t / (t + f1 + f2))
        dices.append(2 * t / (2 * t + f1 + f2))
    rates = []
    if tp + fn > 0:
        rates.append(tp / (tp + fn))
    else:
        skipped.append("ber_fg")
    if tn + fp > 0:
        rates.append(tn / (tn + fp))
    else:
        skipped.append("ber_bg")
    return SegScores(
        PA=(tp + tn) / total,
        mIoU=float(np.mean(ious)) if ious else float("nan"),
        mDice=float(np.mean(dices)) if dices else float("nan"),
        BER=1.0 - float(np.mean(rates)),
        MAE=float(np.mean(np.abs(pred_map - gt.astype(np.float64)))),
        skipped=tuple(skipped),
    )


# ---------------------------------------------------------------------------
# reports


def evaluate_results(
    results: Sequence[ImageResult],
    mode: str = "pixel",
    gt_point_masks: Optional[Sequence[np.ndarray]] = None,
    overhang_axis: str = "perpendicular",
) -> MetricReport:
    """Full report for one split. ``gt_point_masks`` enables segmentation scores."""
    if mode not in MODES:
        raise MetricError(f"unknown normalization mode {mode!r}")
    if not results:
        return MetricReport(*([None] * 8), N=0, N_p=0, flags=["empty split"])
    an = [(len(r.pred_anode), r.gt.count(Polarity.ANODE)) for r in results]
    ca = [(len(r.pred_cathode), r.gt.count(Polarity.CATHODE)) for r in results]
    oh, flagged = overhang_mae(results, mode, overhang_axis)
    n_p = sum(a == b and c == d for (a, b), (c, d) in zip(an, ca))
    report = MetricReport(
        AN_MAE=count_mae(an),
        CN_MAE=count_mae(ca),
        AN_ACC=count_acc(an),
        CN_ACC=count_acc(ca),
        PN_ACC=pair_acc(results),
        AL_MAE=localization_mae(results, Polarity.ANODE, mode),
        CL_MAE=localization_mae(results, Polarity.CATHODE, mode),
        OH_MAE=oh,
        N=len(results),
        N_p=n_p,
        flags=[f"overhang skipped: {i}" for i in flagged],
    )
    if gt_point_masks is not None:
        scores = []
        for r, m in zip(results, gt_point_masks):
            if r.pred_point_maps is None:
                continue
            m = np.asarray(m)
            for ch in range(m.shape[0]):
                scores.append(seg_metrics(r.pred_point_maps[ch], m[ch]))
        if scores:
            report.seg = {k: float(np.nanmean([getattr(s, k) for s in scores])) for k in SEG_METRICS}
    return report


def _mean_or_none(values: Sequence[Optional[float]], weights: Sequence[float]) -> Optional[float]:
    if any(v is None for v in values):
        return None
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def aggregate_splits(reports: Mapping[str, MetricReport], weighted: bool = False) -> MetricReport:
    """Average the regular/difficult/tough reports; ``weighted`` weights splits by image count."""
    missing = [s for s in SPLITS if s not in reports]
    if missing:
        raise MetricError(f"missing splits: {missing}")
    reps = [reports[s] for s in SPLITS]
    w = [float(r.N) for r in reps] if weighted else [1.0, 1.0, 1.0]
    if weighted and sum(w) == 0:
        raise MetricError("weighted aggregation over empty splits")
    out = MetricReport(
        *[_mean_or_none([getattr(r, k) for r in reps], w) for k in COORD_METRICS],
        N=sum(r.N for r in reps),
        N_p=sum(r.N_p for r in reps),
    )
    if all(r.seg is not None for r in reps):
        out.seg = {k: _mean_or_none([r.seg.get(k) for r in reps], w) for k in SEG_METRICS}
    for s, r in zip(SPLITS, reps):
        out.flags.extend(f"{s}: {f}" for f in r.flags)
    return out


def _fmt(v: Optional[float]) -> str:
    return "—" if v is None else f"{v:.4f}"


def format_table(reports: Mapping[str, MetricReport], title: str = "") -> str:
    """Plain-text table with one row per metric and one column per split."""
    cols = list(reports)
    width = max(10, *(len(c) + 2 for c in cols))
    lines = []
    if title:
        lines.append(title)
    lines.append("Metric".ljust(8) + "".join(c.rjust(width) for c in cols))
    arrows = {"ACC": "↑", "MAE": "↓"}
    for k in COORD_METRICS:
        name = k.replace("_", "-") + arrows[k.split("_")[1]]
        lines.append(name.ljust(8) + "".join(_fmt(getattr(reports[c], k)).rjust(width) for c in cols))
    if all(reports[c].seg is not None for c in cols):
        for k in SEG_METRICS:
            lines.append(k.ljust(8) + "".join(_fmt(reports[c].seg.get(k)).rjust(width) for c in cols))
    lines.append("N".ljust(8) + "".join(str(reports[c].N).rjust(width) for c in cols))
    return "\n".join(lines)
