"""Box arithmetic, region covers and proposal clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels


class BBox(NamedTuple):
    """Axis-aligned box in pixels; (x1, y1) top-left, (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + 0.5 * (self.x2 - self.x1), self.y1 + 0.5 * (self.y2 - self.y1))

    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def clamp(self, width: float, height: float) -> "BBox":
        return BBox(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                    min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))

    def contains_box(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


@dataclass(frozen=True)
class Region:
    """A set of proposals together with the box covering all of them."""

    cover: BBox
    members: tuple[int, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError("a region needs at least one member proposal")

    @classmethod
    def of(cls, boxes: Sequence[BBox], members: Sequence[int]) -> "Region":
        members = tuple(sorted(int(m) for m in members))
        return cls(region_cover([boxes[m] for m in members]), members)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]
    n_clusters: int

    def groups(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for i, lab in enumerate(self.labels):
            out[lab].append(i)
        return out


def region_cover(boxes: Sequence[BBox]) -> BBox:
    if len(boxes) == 0:
        raise ValueError("region_cover of an empty box list")
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return BBox(float(arr[:, 0].min()), float(arr[:, 1].min()),
                float(arr[:, 2].max()), float(arr[:, 3].max()))


def center_distance(a: BBox, b: BBox) -> float:
    (a1, a2), (b1, b2) = a.center, b.center
    return math.sqrt((a1 - b1) ** 2 + (a2 - b2) ** 2)


def intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if (w > 0 and h > 0) else 0.0


def iou(a: BBox, b: BBox) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def centers_of(boxes: Sequence[BBox]) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([arr[:, 0] + 0.5 * (arr[:, 2] - arr[:, 0]),
                     arr[:, 1] + 0.5 * (arr[:, 3] - arr[:, 1])], axis=1)


def farthest_point_init(pts: np.ndarray, C: int, seed: int) -> np.ndarray:
    """Indices of C seed points: a seeded first pick, then repeated farthest-point picks.

    Ties go to the lowest index (``argmax`` returns the first maximum).
    """
    n = len(pts)
    first = int(np.random.default_rng(seed).integers(n))
    chosen = [first]
    dmin = np.sqrt(((pts - pts[first]) ** 2).sum(axis=1))
    for _ in range(1, C):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1)))
    return np.asarray(chosen, dtype=np.int64)


def cluster_proposals(boxes: Sequence[BBox], C: int, seed: int = 0,
                      max_iter: int = 100, tol: float = 1e-6) -> ClusterAssignment:
    """k-means of box centres under the Euclidean centre metric.

    With ``len(boxes) <= C`` every box is its own cluster. Otherwise no cluster
    is left empty: an empty one takes the point farthest from its own centre.
    """
    n = len(boxes)
    if n == 0:
        raise ValueError("cannot cluster an empty proposal list")
    if C < 1:
        raise ValueError(f"cluster count must be >= 1, got {C}")
    if n <= C:
        return ClusterAssignment(tuple(range(n)), n)
    pts = centers_of(boxes)
    init = pts[farthest_point_init(pts, C, seed)]
    labels = kernels.kmeans_lloyd(pts, np.ascontiguousarray(init), max_iter, tol)
    return ClusterAssignment(tuple(int(v) for v in labels), C)


def subregions(parent: Region, assignment: ClusterAssignment, boxes: Sequence[BBox]) -> list[Region]:
    """Split ``parent`` by ``assignment`` (one label per parent member, in member order)."""
    if len(assignment.labels) != len(parent.members):
        raise ValueError(f"assignment labels {len(assignment.labels)} vs parent members {len(parent.members)}")
    out = []
    for group in assignment.groups():
        if group:
            out.append(Region.of(boxes, [parent.members[i] for i in group]))
    return out


def split_region(parent: Region, boxes: Sequence[BBox], C: int, seed: int = 0) -> list[Region]:
    """Cluster the parent's members into at most C subregions."""
    assign = cluster_proposals([boxes[m] for m in parent.members], C, seed)
    return subregions(parent, assign, boxes)
