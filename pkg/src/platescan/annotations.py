"""Endpoint annotation data model and the line-delimited JSON manifest format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Tuple

Point = Tuple[float, float]

ATTRIBUTES = ("P", "T", "A", "II", "PI", "BI", "TRI", "TAI", "SI")
INTERFERENCE = ("II", "PI", "BI", "TRI", "TAI", "SI")


class AnnotationError(ValueError):
    """Raised when an annotation violates its invariants or is unusable."""


class Shot(str, Enum):
    CS = "CS"
    MS = "MS"
    LS = "LS"


class Clarity(str, Enum):
    CLEAR = "Clear"
    BLUR = "Blur"


class Difficulty(str, Enum):
    REGULAR = "regular"
    DIFFICULT = "difficult"
    TOUGH = "tough"


class Polarity(str, Enum):
    ANODE = "anode"
    CATHODE = "cathode"


def axis_index(stack_axis: str) -> int:
    if stack_axis == "x":
        return 0
    if stack_axis == "y":
        return 1
    raise AnnotationError(f"stack_axis must be 'x' or 'y', got {stack_axis!r}")


def sort_points(points: Iterable[Sequence[float]], stack_axis: str) -> List[Point]:
    """Sort by the stack-axis coordinate, ties broken by the other coordinate."""
    k = axis_index(stack_axis)
    pts = [(float(p[0]), float(p[1])) for p in points]
    return sorted(pts, key=lambda p: (p[k], p[1 - k]))


@dataclass(frozen=True)
class EndpointAnnotation:
    image_id: str
    width: int
    height: int
    anode_points: Tuple[Point, ...]
    cathode_points: Tuple[Point, ...]
    shot: Shot = Shot.MS
    clarity: Clarity = Clarity.CLEAR
    attributes: frozenset = field(default_factory=frozenset)
    difficulty: Difficulty = Difficulty.REGULAR
    stack_axis: str = "x"

    def __post_init__(self):
        object.__setattr__(self, "anode_points", tuple((float(x), float(y)) for x, y in self.anode_points))
        object.__setattr__(self, "cathode_points", tuple((float(x), float(y)) for x, y in self.cathode_points))
        object.__setattr__(self, "shot", Shot(self.shot))
        object.__setattr__(self, "clarity", Clarity(self.clarity))
        object.__setattr__(self, "difficulty", Difficulty(self.difficulty))
        object.__setattr__(self, "attributes", frozenset(self.attributes))

    def points(self, polarity: Polarity | str) -> Tuple[Point, ...]:
        if Polarity(polarity) is Polarity.ANODE:
            return self.anode_points
        return self.cathode_points

    def count(self, polarity: Polarity | str) -> int:
        return len(self.points(polarity))

    def validate(self) -> "EndpointAnnotation":
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: non-positive image size")
        k = axis_index(self.stack_axis)
        for name, pts in (("anode", self.anode_points), ("cathode", self.cathode_points)):
            if not pts:
                raise AnnotationError(f"{self.image_id}: no {name} endpoints")
            for x, y in pts:
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise AnnotationError(f"{self.image_id}: {name} point ({x}, {y}) outside image")
            coords = [p[k] for p in pts]
            if any(b <= a for a, b in zip(coords, coords[1:])):
                raise AnnotationError(f"{self.image_id}: {name} points not strictly sorted along {self.stack_axis}")
        unknown = self.attributes - set(ATTRIBUTES)
        if unknown:
            raise AnnotationError(f"{self.image_id}: unknown attributes {sorted(unknown)}")
        if "P" in self.attributes and self.attributes != {"P"}:
            raise AnnotationError(f"{self.image_id}: pure plate cannot carry other attributes")
        return self

    @property
    def is_pure(self) -> bool:
        return "P" in self.attributes

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "anode": [list(p) for p in self.anode_points],
            "cathode": [list(p) for p in self.cathode_points],
            "shot": self.shot.value,
            "clarity": self.clarity.value,
            "attributes": sorted(self.attributes),
            "difficulty": self.difficulty.value,
            "stack_axis": self.stack_axis,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EndpointAnnotation":
        return cls(
            image_id=str(rec["image_id"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
            anode_points=tuple(tuple(p) for p in rec["anode"]),
            cathode_points=tuple(tuple(p) for p in rec["cathode"]),
            shot=rec.get("shot", "MS"),
            clarity=rec.get("clarity", "Clear"),
            attributes=frozenset(rec.get("attributes", ())),
            difficulty=rec.get("difficulty", "regular"),
            stack_axis=rec.get("stack_axis", "x"),
        )


def write_manifest(path: str | Path, annotations: Iterable[EndpointAnnotation], extra: dict | None = None) -> None:
    """Write one JSON object per line. ``extra`` maps image_id to additional keys (e.g. file names)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ann in annotations:
            rec = ann.to_record()
            if extra and ann.image_id in extra:
                rec.update(extra[ann.image_id])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def iter_manifest(path: str | Path) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_manifest(path: str | Path) -> List[EndpointAnnotation]:
    return [EndpointAnnotation.from_record(rec) for rec in iter_manifest(path)]
