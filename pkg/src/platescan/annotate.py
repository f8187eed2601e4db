"""Annotation-pipeline utilities: near-duplicate screening, uncertainty routing,
multi-annotator fusion and a single-round vote.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .annotations import EndpointAnnotation, sort_points

DEFAULT_EPS_PX = 3.5
MAX_VOTE_ROUNDS = 1


# ---------------------------------------------------------------------------
# dedup


@dataclass
class DedupResult:
    clusters: List[List[str]]  # ids per cluster, sorted; clusters ordered by representative
    representatives: List[str]

    def cluster_of(self) -> Dict[str, str]:
        """Map every id to its cluster's representative."""
        return {i: rep for rep, members in zip(self.representatives, self.clusters) for i in members}


def dedup(features: Sequence[Sequence[float]], ids: Sequence[str], threshold: float) -> DedupResult:
    """Cluster images whose feature vectors are closer than ``threshold`` (transitively).

    The representative of each connected component is its smallest id.
    """
    if len(features) != len(ids):
        raise ValueError("features and ids differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if not ids:
        return DedupResult([], [])
    dims = {len(f) for f in features}
    if len(dims) != 1:
        raise ValueError(f"feature vectors have mismatched dimensions {sorted(dims)}")
    x = np.asarray(features, dtype=np.float64)
    n = len(ids)
    if n == 1:
        labels = np.zeros(1, dtype=int)
    else:
        d = squareform(pdist(x))
        r, c = np.nonzero(d < threshold)
        graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
    groups: Dict[int, List[str]] = {}
    for i, lab in zip(ids, labels):
        groups.setdefault(int(lab), []).append(i)
    clusters = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    return DedupResult(clusters, [g[0] for g in clusters])


FeatureExtractor = Callable[[np.ndarray], np.ndarray]


class EncoderFeatures:
    """Global-average-pooled deepest encoder features of a trained network."""

    def __init__(self, model, input_size: int):
        self.model, self.input_size = model.eval(), input_size

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> np.ndarray:
        from .data import resize_image, to_tensor

        x = to_tensor(resize_image(image, (self.input_size, self.input_size)))[None]
        f = self.model.encode(x)[-1]
        return f.mean(dim=(2, 3))[0].double().numpy()


# ---------------------------------------------------------------------------
# uncertainty


def uncertainty(pred_map: np.ndarray) -> float:
    """Spread of a sigmoid map: max - min."""
    a = np.asarray(pred_map, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty prediction map")
    return float(a.max() - a.min())


def route(maps: Dict[str, np.ndarray], tau: float) -> Tuple[List[str], List[str]]:
    """Split ids into (uncertain, confident); a spread >= ``tau`` is uncertain."""
    uncertain, confident = [], []
    for k in sorted(maps):
        (uncertain if uncertainty(maps[k]) >= tau else confident).append(k)
    return uncertain, confident


# ---------------------------------------------------------------------------
# fusion and voting


@dataclass
class VoteRequest:
    image_id: str
    candidates: List[EndpointAnnotation]
    reason: str
    round: int = 1


@dataclass
class AnnotationBundle:
    image_id: str
    annotations: List[EndpointAnnotation]
    flags: List[str] = field(default_factory=list)
    fused: Optional[EndpointAnnotation] = None

    def __post_init__(self):
        if not self.annotations:
            raise ValueError("bundle needs at least one annotation")
        for a in self.annotations:
            if a.image_id != self.image_id:
                raise ValueError(f"annotation for {a.image_id} in bundle {self.image_id}")


def _sorted(ann: EndpointAnnotation, pol: str) -> List[Tuple[float, float]]:
    return sort_points(ann.anode_points if pol == "anode" else ann.cathode_points, ann.stack_axis)


def _consistency(anns: Sequence[EndpointAnnotation], eps_px: float) -> Optional[str]:
    """None when all annotations agree, otherwise the reason they do not."""
    ref = anns[0]
    for a in anns[1:]:
        if (a.width, a.height, a.stack_axis) != (ref.width, ref.height, ref.stack_axis):
            return "frame mismatch"
    for pol in ("anode", "cathode"):
        counts = {len(_sorted(a, pol)) for a in anns}
        if len(counts) > 1:
            return f"{pol} count mismatch {sorted(counts)}"
    for pol in ("anode", "cathode"):
        pts = [_sorted(a, pol) for a in anns]
        for i in range(len(anns)):
            for j in range(i + 1, len(anns)):
                for p, q in zip(pts[i], pts[j]):
                    if math.dist(p, q) >= eps_px:
                        return f"{pol} deviation {math.dist(p, q):.2f} px >= {eps_px}"
    return None


def _mean_points(anns: Sequence[EndpointAnnotation], pol: str):
    pts = [_sorted(a, pol) for a in anns]
    return tuple(
        (math.fsum(p[k][0] for p in pts) / len(pts), math.fsum(p[k][1] for p in pts) / len(pts))
        for k in range(len(pts[0]))
    )


def fuse_annotations(bundle: AnnotationBundle, eps_px: float = DEFAULT_EPS_PX):
    """Fuse agreeing annotations by coordinate averaging.

    Returns the bundle with ``fused`` set, or a :class:`VoteRequest` when the
    annotators disagree. A single annotation is passed through with a flag.
    """
    anns = bundle.annotations
    if len(anns) == 1:
        flags = bundle.flags + ["single annotation: passed through unfused"]
        return replace(bundle, flags=flags, fused=anns[0])
    reason = _consistency(anns, eps_px)
    if reason is not None:
        return VoteRequest(bundle.image_id, list(anns), reason)
    ref = anns[0]
    fused = replace(ref, anode_points=_mean_points(anns, "anode"), cathode_points=_mean_points(anns, "cathode"))
    fused.validate()
    return replace(bundle, fused=fused)


def annotation_deviation(a: EndpointAnnotation, b: EndpointAnnotation, miss_penalty: Optional[float] = None) -> float:
    """Sum of distances between index-paired endpoints; unmatched points cost ``miss_penalty``.

    The default penalty is the image diagonal.
    """
    pen = math.hypot(a.width, a.height) if miss_penalty is None else miss_penalty
    total = []
    for pol in ("anode", "cathode"):
        p, q = _sorted(a, pol), _sorted(b, pol)
        total.extend(math.dist(u, v) for u, v in zip(p, q))
        total.append(pen * abs(len(p) - len(q)))
    return math.fsum(total)


def resolve_vote(request: VoteRequest, miss_penalty: Optional[float] = None) -> EndpointAnnotation:
    """Pick the candidate with the smallest total deviation to the others.

    Ties go to the earliest candidate in a canonical order, so the result does not
    depend on annotator order. Only one voting round is allowed.
    """
    if request.round > MAX_VOTE_ROUNDS:
        raise ValueError(f"vote depth {request.round} exceeds the cap of {MAX_VOTE_ROUNDS}")
    cands = sorted(request.candidates, key=lambda a: repr(a.to_record()))
    scores = [
        math.fsum(annotation_deviation(c, o, miss_penalty) for o in cands if o is not c) for c in cands
    ]
    return cands[int(np.argmin(scores))]


def fuse_or_vote(bundle: AnnotationBundle, eps_px: float = DEFAULT_EPS_PX, voters: Sequence[EndpointAnnotation] = ()):
    """Full quality-control step: fuse, else vote once among annotators plus extra voters."""
    out = fuse_annotations(bundle, eps_px)
    if isinstance(out, AnnotationBundle):
        return out
    req = VoteRequest(out.image_id, out.candidates + list(voters), out.reason)
    chosen = resolve_vote(req)
    return replace(bundle, flags=bundle.flags + [f"voted: {out.reason}"], fused=chosen)
