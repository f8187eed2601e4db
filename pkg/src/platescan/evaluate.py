"""Prediction and split-wise evaluation.

Predictors see only images. Ground truth is joined afterwards, so a
predictor cannot read labels.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .annotations import EndpointAnnotation, Polarity, sort_points
from .data import Sample, resize_image, to_tensor
from .labels import RadiusPolicy, extract_points, generate_point_mask, rescale_points, scale_annotation
from .metrics import (
    SPLITS, ImageResult, MetricReport, aggregate_splits, evaluate_results, format_table,
)
from .model import MDCNeXt, load_checkpoint

# image (H, W) uint8 -> (2, H, W) anode/cathode probabilities at native resolution
# or at the predictor's own square frame
Predictor = Callable[[np.ndarray], np.ndarray]


class ModelPredictor:
    """Wraps a trained network; maps are produced at ``input_size`` and points rescaled to native."""

    def __init__(self, model: MDCNeXt, prompt: np.ndarray, input_size: int, output: str = "refined"):
        if output not in ("refined", "coarse"):
            raise ValueError("output must be 'refined' or 'coarse'")
        self.model, self.input_size, self.output = model.eval(), input_size, output
        with torch.no_grad():
            p = to_tensor(resize_image(prompt, (input_size, input_size)))[None]
            self.prompt_features = model.encode(p)

    @torch.no_grad()
    def maps(self, image: np.ndarray) -> np.ndarray:
        x = to_tensor(resize_image(image, (self.input_size, self.input_size)))[None]
        out = self.model(x, None, prompt_features=self.prompt_features)
        pm = out.refined_points if self.output == "refined" else out.coarse_points
        return pm[0].numpy()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.maps(image)


def points_from_maps(maps: np.ndarray, native_size, stack_axis: str, threshold: float = 0.5):
    """Extract anode/cathode endpoints from (2, h, w) maps and rescale to the native (w, h) frame."""
    h, w = maps.shape[-2:]
    out = []
    for ch in range(2):
        pts = extract_points(maps[ch], threshold, stack_axis)
        out.append(rescale_points(pts, (w, h), native_size))
    return out


def predict_results(predictor: Predictor, samples: Sequence[Sample], threshold: float = 0.5,
                    keep_maps: bool = False) -> List[ImageResult]:
    results = []
    for s in samples:
        maps = predictor(s.image)
        an, ca = points_from_maps(maps, (s.ann.width, s.ann.height), s.ann.stack_axis, threshold)
        results.append(ImageResult(an, ca, s.ann, maps if keep_maps else None))
    return results


def split_results(results: Sequence[ImageResult]) -> Dict[str, List[ImageResult]]:
    groups: Dict[str, List[ImageResult]] = {s: [] for s in SPLITS}
    for r in results:
        groups[r.gt.difficulty.value].append(r)
    return groups


def report_splits(results: Sequence[ImageResult], mode: str = "pixel", per_split: bool = True,
                  seg_policy: Optional[RadiusPolicy] = None, weighted: bool = False,
                  overhang_axis: str = "perpendicular") -> Dict[str, MetricReport]:
    """Reports keyed by split plus ``average`` (or ``all`` when ``per_split`` is false).

    Empty splits are reported with a flag; the average then covers the splits present.
    """
    def masks_for(rs):
        if seg_policy is None or any(r.pred_point_maps is None for r in rs):
            return None
        out = []
        for r in rs:
            h, w = r.pred_point_maps.shape[-2:]
            ann = scale_annotation(r.gt, w, h)
            out.append(np.stack([generate_point_mask(ann, seg_policy, p) for p in (Polarity.ANODE, Polarity.CATHODE)]))
        return out

    if not per_split:
        return {"all": evaluate_results(results, mode, masks_for(results), overhang_axis)}
    groups = split_results(results)
    reports = {s: evaluate_results(rs, mode, masks_for(rs), overhang_axis) for s, rs in groups.items()}
    present = {s: r for s, r in reports.items() if r.N > 0}
    if len(present) == len(SPLITS):
        reports["average"] = aggregate_splits(reports, weighted=weighted)
    else:
        reports["average"] = evaluate_results(results, mode, masks_for(results), overhang_axis)
        reports["average"].flags.append(
            "missing splits: " + ",".join(s for s in SPLITS if s not in present) + "; pooled over available images"
        )
    return reports


def write_reports(reports: Mapping[str, MetricReport], out_dir: str | Path, title: str = "") -> Dict[str, Path]:
    """Write ``report.txt`` (table) and ``report.jsonl`` (one record per split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, jsl = out / "report.txt", out / "report.jsonl"
    txt.write_text(format_table(reports, title) + "\n", encoding="utf-8")
    with jsl.open("w", encoding="utf-8") as fh:
        for split, rep in reports.items():
            rec = {"split": split}
            rec.update(rep.to_dict())
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {"table": txt, "records": jsl}


def read_reports(path: str | Path) -> Dict[str, MetricReport]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec.pop("split")] = MetricReport.from_dict(rec)
    return out


def results_from_prediction_manifest(pred: Sequence[EndpointAnnotation], gt: Sequence[EndpointAnnotation]) -> List[ImageResult]:
    """Pair predicted and ground-truth manifests by image_id; predicted points are re-sorted."""
    by_id = {p.image_id: p for p in pred}
    results = []
    for g in gt:
        p = by_id.get(g.image_id)
        an = sort_points(p.anode_points, g.stack_axis) if p else []
        ca = sort_points(p.cathode_points, g.stack_axis) if p else []
        results.append(ImageResult(an, ca, g))
    return results


def predictor_from_checkpoint(path: str | Path, prompt_index: int = 0, output: str = "refined") -> ModelPredictor:
    """Rebuild a predictor from a training checkpoint; the prompt is one of the stored pure-plate images."""
    model, extra = load_checkpoint(path)
    prompts = extra.get("prompts") or []
    if not prompts:
        raise ValueError(f"{path}: checkpoint stores no prompt image")
    if not 0 <= prompt_index < len(prompts):
        raise ValueError(f"prompt index {prompt_index} out of range (0..{len(prompts) - 1})")
    prompt = np.asarray(prompts[prompt_index], dtype=np.uint8)
    return ModelPredictor(model, prompt, int(extra["input_size"]), output)


def evaluate_checkpoint(path: str | Path, samples: Sequence[Sample], mode: str = "pixel", per_split: bool = True,
                        prompt_index: int = 0, weighted: bool = False) -> Dict[str, MetricReport]:
    pred = predictor_from_checkpoint(path, prompt_index)
    return report_splits(predict_results(pred, samples), mode, per_split, weighted=weighted)
