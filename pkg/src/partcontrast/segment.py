"""Random plane cuts, the part dataset, segment pairs, and partial views.

Nothing here reads class labels. Objects are consumed through their
``source_id`` and ``points`` only, so label-free records work everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

logger = logging.getLogger(__name__)

POSITIVE = "positive_halfspace"
NEGATIVE = "negative_halfspace"


@dataclass(frozen=True)
class CutPlane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0 or not np.isfinite(self.offset):
            raise ValueError("plane needs a nonzero normal and a finite offset")
        object.__setattr__(self, "normal", n / norm)


@dataclass
class Segment:
    points: np.ndarray
    source_id: str
    plane_index: int
    side: str

    @property
    def part_id(self) -> str:
        return f"{self.source_id}#{self.plane_index}#{self.side}"

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class SegmentPair:
    a: Segment
    b: Segment
    label: int


class PartDataset(list):
    """List of segments that also remembers which objects yielded none."""

    def __init__(self, segments=(), skipped=()):
        super().__init__(segments)
        self.skipped = list(skipped)


def _objects(clouds) -> list[tuple[str, np.ndarray]]:
    out = []
    for c in clouds:
        if isinstance(c, tuple):
            out.append((str(c[0]), np.asarray(c[1], dtype=np.float64)))
        else:
            out.append((c.source_id, np.asarray(c.points, dtype=np.float64)))
    return out


def random_unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        v[bad] = rng.standard_normal((bad.sum(), 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def generate_cut_planes(points: np.ndarray, n_planes: int, seed: int,
                        quantiles=(0.1, 0.9)) -> list[CutPlane]:
    """Uniform normals; offsets uniform between the 10th and 90th percentile of the projection."""
    if n_planes < 1:
        raise ValueError("n_planes must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    normals = random_unit_vectors(n_planes, rng)
    planes = []
    for n in normals:
        lo, hi = np.quantile(points @ n, quantiles)
        planes.append(CutPlane(n, float(rng.uniform(lo, hi))))
    return planes


def cut_object(points: np.ndarray, plane: CutPlane, source_id: str = "",
               plane_index: int = 0) -> tuple[Segment, Segment]:
    """Split by ``normal . p >= offset``; ties go to the positive side."""
    points = np.asarray(points, dtype=np.float64)
    mask = points @ plane.normal >= plane.offset
    return (Segment(points[mask], source_id, plane_index, POSITIVE),
            Segment(points[~mask], source_id, plane_index, NEGATIVE))


def build_part_dataset(clouds: Iterable, n_planes: int = 15, min_points: int = 512,
                       seed: int = 0) -> PartDataset:
    """Cut every object with ``n_planes`` independent planes; keep sides with enough points."""
    objects = _objects(clouds)
    seeds = np.random.SeedSequence(seed).spawn(len(objects))
    parts, skipped = [], []
    for (sid, pts), ss in zip(objects, seeds):
        planes = generate_cut_planes(pts, n_planes, int(ss.generate_state(1)[0]))
        kept = [seg for i, pl in enumerate(planes) for seg in cut_object(pts, pl, sid, i)
                if len(seg) >= min_points]
        if not kept:
            logger.warning("object %s yields no segment with >= %d points; skipped", sid, min_points)
            skipped.append(sid)
        parts.extend(kept)
    return PartDataset(parts, skipped)


def group_by_object(parts: Sequence[Segment]) -> dict[str, list[Segment]]:
    groups: dict[str, list[Segment]] = {}
    for seg in parts:
        groups.setdefault(seg.source_id, []).append(seg)
    return groups


def sample_pairs(parts: Sequence[Segment], n_pairs: int, positive_fraction: float = 0.5,
                 seed: int = 0) -> list[SegmentPair]:
    """Balanced same-object / different-object segment pairs.

    Positives draw an object uniformly among those with at least two segments,
    then two distinct segments of it. Negatives draw two distinct objects
    uniformly, then one segment of each.
    """
    if not 0 <= positive_fraction <= 1:
        raise ValueError("positive_fraction must be in [0, 1]")
    groups = group_by_object(parts)
    ids = list(groups)
    multi = [i for i in ids if len(groups[i]) >= 2]
    n_pos = int(round(n_pairs * positive_fraction))
    n_neg = n_pairs - n_pos
    if n_pos and not multi:
        raise ValueError("insufficient segments: no object has two segments for positive pairs")
    if n_neg and len(ids) < 2:
        raise ValueError("insufficient segments: negative pairs need at least two objects")
    rng = np.random.default_rng(seed)
    pairs = []
    for obj in rng.integers(len(multi), size=n_pos) if n_pos else ():
        segs = groups[multi[obj]]
        i, j = rng.choice(len(segs), size=2, replace=False)
        pairs.append(SegmentPair(segs[i], segs[j], 1))
    for _ in range(n_neg):
        oa, ob = rng.choice(len(ids), size=2, replace=False)
        ga, gb = groups[ids[oa]], groups[ids[ob]]
        pairs.append(SegmentPair(ga[rng.integers(len(ga))], gb[rng.integers(len(gb))], 0))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def resample_segment(seg: Segment, n: int, seed: int) -> Segment:
    """Fixed-size copy: a subset without replacement if large enough, else padded by redraws."""
    m = len(seg)
    if m == 0:
        raise ValueError(f"cannot resample empty segment {seg.part_id}")
    rng = np.random.default_rng(seed)
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = rng.permutation(np.concatenate([np.arange(m), rng.integers(m, size=n - m)]))
    return Segment(seg.points[idx], seg.source_id, seg.plane_index, seg.side)


def hidden_point_removal(points: np.ndarray, camera: np.ndarray, radius: float) -> np.ndarray:
    """Indices of points visible from ``camera`` via spherical flipping and a convex hull."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 4:
        return np.arange(len(points))
    rel = points - camera
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    flipped = rel + 2 * (radius - norms) * rel / norms
    hull_pts = np.vstack([flipped, np.zeros((1, 3))])
    try:
        hull = ConvexHull(hull_pts)
    except QhullError:
        hull = ConvexHull(hull_pts, qhull_options="QJ")
    vis = hull.vertices[hull.vertices < len(points)]
    return np.sort(vis)


def simulate_perspective_view(points: np.ndarray, view_direction, seed: int = 0,
                              source_id: str = "", camera_distance: float = 10.0,
                              flip_radius: float = 100.0) -> Segment:
    """Visible subset of a normalized cloud seen along ``view_direction``.

    The camera sits at ``camera_distance`` cloud radii behind the origin. The
    seed is unused by the operator itself and only kept for call symmetry.
    """
    del seed
    points = np.asarray(points, dtype=np.float64)
    d = np.asarray(view_direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    radius = max(np.linalg.norm(points, axis=1).max(), 1e-12)
    camera = -camera_distance * radius * d
    vis = hidden_point_removal(points, camera, flip_radius * radius)
    return Segment(points[vis], source_id, -1, "view")


def random_view(points: np.ndarray, seed: int, min_points: int, source_id: str = "",
                max_tries: int = 20, **kw) -> Segment | None:
    """First random perspective view with at least ``min_points`` points, or ``None``."""
    rng = np.random.default_rng(seed)
    for d in random_unit_vectors(max_tries, rng):
        view = simulate_perspective_view(points, d, source_id=source_id, **kw)
        if len(view) >= min_points:
            return view
    return None


def random_part(points: np.ndarray, seed: int, min_points: int, n_planes: int = 15,
                source_id: str = "", max_tries: int = 20) -> Segment | None:
    """One random half-space segment with at least ``min_points`` points, or ``None``."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        plane = generate_cut_planes(points, 1, int(rng.integers(2**63)))[0]
        pos, neg = cut_object(points, plane, source_id, 0)
        ok = [s for s in (pos, neg) if len(s) >= min_points]
        if ok:
            return ok[int(rng.integers(len(ok)))]
    return None
