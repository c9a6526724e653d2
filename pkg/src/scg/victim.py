"""Heuristic point-cloud segmenters standing in for learned victims, the
vehicle IoU metric and the point-perturbation baseline attack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .lidar import BACKGROUND, VEHICLE
from .seeding import stream


@dataclass(frozen=True)
class HeuristicSegmenter:
    name: str = "V1"
    ground_tol: float = 0.25
    radius: float = 2.0
    min_points: int = 8
    length: tuple = (1.0, 6.5)
    width: tuple = (0.0, 2.8)
    height: tuple = (0.8, 2.6)

    def __post_init__(self):
        if self.radius <= 0 or self.ground_tol <= 0 or self.min_points < 1:
            raise ValueError("segmenter radii and sizes must be positive")
        for lo, hi in (self.length, self.width, self.height):
            if not 0 <= lo < hi:
                raise ValueError("dimension bounds must satisfy 0 <= lo < hi")

    def __call__(self, points):
        return segment(points, self)

    def to_dict(self):
        d = asdict(self)
        d.update({k: list(d[k]) for k in ("length", "width", "height")})
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown victim parameters: {sorted(unknown)}")
        d = dict(d)
        for k in ("length", "width", "height"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


VICTIMS = {
    "V1": HeuristicSegmenter("V1", 0.25, 2.0, 8, (1.0, 6.5), (0.0, 2.8), (0.8, 2.6)),
    "V2": HeuristicSegmenter("V2", 0.30, 1.5, 10, (1.2, 6.0), (0.0, 2.6), (0.9, 2.4)),
    "V3": HeuristicSegmenter("V3", 0.20, 2.5, 6, (0.8, 7.0), (0.0, 3.0), (0.7, 2.8)),
    "V4": HeuristicSegmenter("V4", 0.35, 1.2, 12, (1.5, 6.0), (0.0, 2.5), (1.0, 2.3)),
}


def save_victims(path, victims):
    doc = {"format": "victims", "version": 1, "victims": [v.to_dict() for v in victims.values()]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_victims(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "victims":
        raise ValueError(f"{path}: not a victim parameter file")
    out = {}
    for d in doc["victims"]:
        v = HeuristicSegmenter.from_dict(d)
        out[v.name] = v
    return out


def get_victim(name, table=None):
    table = table or VICTIMS
    if name not in table:
        raise KeyError(f"unknown victim {name!r}; choose from {sorted(table)}")
    return table[name]


@dataclass
class SegmentationResult:
    labels: np.ndarray
    cluster: np.ndarray      # cluster id per point, -1 for ground
    iou: float | None = None


def clusters(points, radius):
    """Single-linkage components: points closer than ``radius`` are joined."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp


def box_fit(points):
    """Extents of the oriented box aligned with the principal ground-plane axis:
    ``(length, width, height)`` with height measured from the ground plane."""
    xy = points[:, :2] - points[:, :2].mean(axis=0)
    if len(points) > 1:
        cov = xy.T @ xy
        w, v = np.linalg.eigh(cov)
        axes = v[:, ::-1]
    else:
        axes = np.eye(2)
    proj = xy @ axes
    ext = proj.max(axis=0) - proj.min(axis=0)
    return float(ext[0]), float(ext[1]), float(points[:, 2].max())


def _is_vehicle(points, params):
    if len(points) < params.min_points:
        return False
    ln, wd, ht = box_fit(points)
    return (params.length[0] <= ln <= params.length[1] and params.width[0] <= wd <= params.width[1]
            and params.height[0] <= ht <= params.height[1])


def _groups(comp):
    order = np.argsort(comp, kind="stable")
    return np.split(order, np.flatnonzero(np.diff(comp[order])) + 1) if comp.size else []


def segment(points, params):
    """Ground removal, Euclidean clustering and a dimension check per cluster."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.full(len(points), BACKGROUND, dtype=np.int64)
    cid = np.full(len(points), -1, dtype=np.int64)
    above = np.flatnonzero(points[:, 2] > params.ground_tol)
    if above.size == 0:
        return SegmentationResult(labels, cid)
    comp = clusters(points[above], params.radius)
    cid[above] = comp
    for members in _groups(comp):
        idx = above[members]
        if _is_vehicle(points[idx], params):
            labels[idx] = VEHICLE
    return SegmentationResult(labels, cid)


class IncrementalSegmenter:
    """Exact re-segmentation after moving a single point.

    Only clusters that contained the point, or that lie within the linkage
    radius of its new position, can change; those are re-clustered and every
    other label is reused.
    """

    def __init__(self, points, params):
        self.params = params
        self.points = np.array(points, dtype=np.float64).reshape(-1, 3)
        res = segment(self.points, params)
        self.labels, self.cid = res.labels, res.cluster
        self._next = int(self.cid.max()) + 1 if self.cid.size else 0
        self._tree = cKDTree(self.points)

    def trial(self, i, xyz):
        """Labels after moving point ``i`` to ``xyz`` (state unchanged)."""
        return self._evaluate(i, np.asarray(xyz, dtype=np.float64))[0]

    def commit(self, i, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        labels, cid = self._evaluate(i, xyz)
        self.points[i] = xyz
        self.labels, self.cid = labels, cid
        self._next = max(self._next, int(cid.max()) + 1)
        self._tree = cKDTree(self.points)

    def _evaluate(self, i, xyz):
        prm = self.params
        pts = self.points.copy()
        pts[i] = xyz
        affected = set()
        if self.cid[i] >= 0:
            affected.add(int(self.cid[i]))
        new_above = xyz[2] > prm.ground_tol
        if new_above:
            near = self._tree.query_ball_point(xyz, prm.radius + 1e-9)
            for j in near:
                if j != i and self.cid[j] >= 0 and np.linalg.norm(pts[j] - xyz) <= prm.radius:
                    affected.add(int(self.cid[j]))
        labels = self.labels.copy()
        cid = self.cid.copy()
        sub = np.flatnonzero(np.isin(self.cid, list(affected))) if affected else np.zeros(0, dtype=np.int64)
        sub = sub[sub != i]
        if new_above:
            sub = np.append(sub, i)
        labels[i] = BACKGROUND
        cid[i] = -1
        if sub.size:
            comp = clusters(pts[sub], prm.radius)
            for members in _groups(comp):
                idx = sub[members]
                cid[idx] = self._next + int(comp[members[0]])
                labels[idx] = VEHICLE if _is_vehicle(pts[idx], prm) else BACKGROUND
        return labels, cid


def iou(pred, true, cls=VEHICLE):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label arrays differ in length")
    p, t = pred == cls, true == cls
    union = np.sum(p | t)
    return 1.0 if union == 0 else float(np.sum(p & t) / union)


def vehicle_iou(cloud, victim):
    if len(cloud) == 0:
        return 1.0
    return iou(segment(cloud.points, victim).labels, cloud.labels)


def point_attack(cloud, victim, budget, eps=0.05, seed=0):
    """SimBA on point coordinates: a random coordinate of a random point is
    moved by ``+eps`` then ``-eps``; the first move that lowers the vehicle
    IoU is kept. Returns ``(cloud, curve)`` with one IoU per evaluation,
    starting with the unperturbed cloud (not charged to the budget)."""
    rng = stream(seed, "point-attack")
    cur = cloud.copy()
    inc = IncrementalSegmenter(cur.points, victim) if len(cur) else None
    best = iou(inc.labels, cur.labels) if inc is not None else 1.0
    curve = [best]
    n = cur.points.size
    order = []
    spent = 0
    while spent < budget and n:
        if not order:
            order = list(rng.permutation(n))
        k = order.pop()
        i, j = divmod(int(k), 3)
        for sign in (1.0, -1.0):
            if spent >= budget:
                break
            xyz = inc.points[i].copy()
            xyz[j] += sign * eps
            val = iou(inc.trial(i, xyz), cur.labels)
            spent += 1
            curve.append(val)
            if val < best:
                inc.commit(i, xyz)
                best = val
                break
    cur.points = inc.points.copy() if inc is not None else cur.points
    return cur, np.asarray(curve)


__all__ = [
    "HeuristicSegmenter", "VICTIMS", "save_victims", "load_victims", "get_victim",
    "SegmentationResult", "IncrementalSegmenter", "clusters", "box_fit", "segment", "iou", "vehicle_iou",
    "point_attack",
]
