"""A small LiDAR model: a fixed beam pattern cast against vehicle box meshes
(Moller-Trumbore ray/triangle tests behind per-mesh bounding-box rejection),
composited with a background range image into a labeled point cloud."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream

EPS_T = 1e-6
EPS_DET = 1e-12
BACKGROUND, VEHICLE = 0, 1
LABELS = {BACKGROUND: "background", VEHICLE: "vehicle"}


@dataclass(frozen=True)
class BeamPattern:
    channels: int = 32
    elev_min: float = -15.0        # degrees
    elev_max: float = 5.0
    az_step: float = 0.5           # degrees, sweeping the full circle
    max_range: float = 80.0
    origin: tuple = (0.0, 0.0, 1.8)

    @property
    def n_azimuth(self):
        return int(round(360.0 / self.az_step))

    @property
    def n_rays(self):
        return self.channels * self.n_azimuth

    def angles(self):
        """Per-ray (elevation, azimuth) in radians, channel-major order."""
        el = np.radians(np.linspace(self.elev_min, self.elev_max, self.channels))
        az = np.radians(np.arange(self.n_azimuth) * self.az_step)
        return np.repeat(el, az.size), np.tile(az, el.size)

    def directions(self):
        el, az = self.angles()
        ce = np.cos(el)
        return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)

    @property
    def origin_array(self):
        return np.asarray(self.origin, dtype=np.float64)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    label: int = VEHICLE

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        tri = self.corners()
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if np.any(area <= 1e-12):
            raise ValueError("degenerate triangle")

    def corners(self):
        return self.vertices[self.triangles]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


_BOX_TRIS = np.array([
    [0, 2, 1], [0, 3, 2],        # bottom
    [4, 5, 6], [4, 6, 7],        # top
    [0, 1, 5], [0, 5, 4],
    [1, 2, 6], [1, 6, 5],
    [2, 3, 7], [2, 7, 6],
    [3, 0, 4], [3, 4, 7],
])


def box_mesh(x, y, theta, length, width, height, z0=0.0, label=VEHICLE):
    """Oriented box standing on ``z = z0``: 8 vertices, 12 triangles."""
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = length / 2, width / 2
    foot = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    xy = foot @ rot.T + np.array([x, y])
    v = np.vstack([np.column_stack([xy, np.full(4, z0)]), np.column_stack([xy, np.full(4, z0 + height)])])
    return TriangleMesh(v, _BOX_TRIS, label)


def vehicle_meshes(instances):
    return [box_mesh(i.x, i.y, i.theta, i.length, i.width, i.height) for i in instances]


# ---------------------------------------------------------------------------
# ray / triangle

def ray_triangle(origin, direction, triangle):
    """Moller-Trumbore. Returns the hit distance ``t`` or None."""
    v0, v1, v2 = (np.asarray(p, dtype=np.float64) for p in triangle)
    d = np.asarray(direction, dtype=np.float64)
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < EPS_DET:
        return None
    inv = 1.0 / det
    s = np.asarray(origin, dtype=np.float64) - v0
    u = (s @ p) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ q) * inv
    return float(t) if t > EPS_T else None


def ray_triangles(origins, dirs, tris):
    """Vectorized Moller-Trumbore for ``R`` rays against ``T`` triangles.

    ``origins`` ``(R, 3)`` or ``(3,)``, ``dirs`` ``(R, 3)``, ``tris``
    ``(T, 3, 3)``. Returns the nearest hit distance per ray (``inf`` for a
    miss).
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    tris = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    best = np.full(len(dirs), np.inf)
    for v0, v1, v2 in tris:
        e1, e2 = v1 - v0, v2 - v0
        p = np.cross(dirs, e2)
        det = p @ e1
        ok = np.abs(det) >= EPS_DET
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origins - v0
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        v = np.einsum("ij,ij->i", dirs, q) * inv
        t = (q @ e2) * inv
        hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > EPS_T)
        best = np.where(hit & (t < best), t, best)
    return best


def ray_triangle_oracle(origin, direction, triangle):
    """Independent check: intersect the supporting plane, then test the
    barycentric coordinates of the hit point from sub-triangle areas.

    Returns ``(t or None, borderline)``; ``borderline`` flags cases within
    numerical reach of an edge or of the parallel configuration.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    a, b, c = (np.asarray(p, dtype=np.float64) for p in triangle)
    n = np.cross(b - a, c - a)
    area2 = np.linalg.norm(n)
    denom = n @ d
    # |det| of the Moller-Trumbore system equals |n . d|
    if abs(denom) <= 1e-9:
        return None, True
    t = n @ (a - o) / denom
    x = o + t * d
    nh = n / area2
    wa = np.cross(c - b, x - b) @ nh / area2
    wb = np.cross(a - c, x - c) @ nh / area2
    wc = np.cross(b - a, x - a) @ nh / area2
    w = np.array([wa, wb, wc])
    tol = 1e-9
    borderline = bool(np.any(np.abs(w) < tol) or abs(t - EPS_T) < tol)
    if t > EPS_T and np.all(w >= 0.0):
        return float(t), borderline
    return None, borderline


def _slab(origin, dirs, lo, hi):
    """Rays whose line segment in ``[0, inf)`` meets the AABB ``[lo, hi]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)), axis=1)
    tmax = np.nanmin(np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)), axis=1)
    return (tmax >= np.maximum(tmin, 0.0))


@dataclass
class Hits:
    t: np.ndarray          # nearest hit distance per ray (inf = miss)
    label: np.ndarray      # label of the hit mesh (-1 = miss)
    mesh: np.ndarray       # index of the hit mesh (-1 = miss)


def raycast(meshes, pattern, dirs=None):
    """Nearest hit over every triangle of every mesh, for every ray."""
    dirs = pattern.directions() if dirs is None else dirs
    origin = pattern.origin_array
    n = len(dirs)
    t = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int64)
    mesh_idx = np.full(n, -1, dtype=np.int64)
    for k, m in enumerate(meshes):
        lo, hi = m.bounds()
        cand = np.flatnonzero(_slab(origin, dirs, lo - 1e-9, hi + 1e-9))
        if cand.size == 0:
            continue
        tk = ray_triangles(origin, dirs[cand], m.corners())
        better = tk < t[cand]
        idx = cand[better]
        t[idx] = tk[better]
        label[idx] = m.label
        mesh_idx[idx] = k
    return Hits(t, label, mesh_idx)


# ---------------------------------------------------------------------------
# background

@dataclass
class BackgroundRangeImage:
    channels: int
    n_azimuth: int
    ranges: np.ndarray     # per ray, inf = no return

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64).reshape(-1)
        if self.ranges.size != self.channels * self.n_azimuth:
            raise ValueError("range image size does not match its shape")
        if np.any(self.ranges <= 0):
            raise ValueError("ranges must be positive")

    def save(self, path):
        header = (f"SCG-RANGE-IMAGE 1\nchannels {self.channels}\nazimuth_steps {self.n_azimuth}\n"
                  f"dtype <f8\nend\n").encode()
        Path(path).write_bytes(header + self.ranges.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        end = raw.index(b"end\n") + 4
        lines = raw[:end].decode().split("\n")
        if lines[0] != "SCG-RANGE-IMAGE 1":
            raise ValueError(f"{path}: not a range image")
        fields = dict(line.split(" ", 1) for line in lines[1:] if " " in line)
        ch, naz = int(fields["channels"]), int(fields["azimuth_steps"])
        data = np.frombuffer(raw, dtype="<f8", count=ch * naz, offset=end)
        return cls(ch, naz, data.copy())


def ground_ranges(pattern, dirs=None):
    """Distance to the plane ``z = 0`` along every ray (inf if it points up)."""
    dirs = pattern.directions() if dirs is None else dirs
    h = pattern.origin[2]
    with np.errstate(divide="ignore"):
        t = np.where(dirs[:, 2] < 0, -h / np.where(dirs[:, 2] < 0, dirs[:, 2], -1.0), np.inf)
    return t


def building_meshes(layout, seed, count=8, setback=10.0, keep_clear=None, clear_radius=6.0):
    """Roadside boxes that stay ``setback`` meters clear of every road and
    ``clear_radius`` of the point ``keep_clear`` (typically the sensor)."""
    rng = stream(seed, "buildings")
    meshes, tries = [], 0
    while len(meshes) < count and tries < 2000:
        tries += 1
        cx, cy = rng.uniform(-45.0, 45.0, 2)
        lx, ly = rng.uniform(6.0, 16.0, 2)
        h = rng.uniform(4.0, 12.0)
        corners = np.array([[cx - lx / 2, cy - ly / 2], [cx + lx / 2, cy - ly / 2],
                            [cx + lx / 2, cy + ly / 2], [cx - lx / 2, cy + ly / 2]])
        ok = True
        for road in layout.roads:
            rel = corners - np.asarray(road.origin)
            u, v = rel @ road.axis, rel @ road.normal
            # the box's footprint, projected on the road frame, must clear the road band
            if u.max() > -setback and u.min() < road.length + setback and \
                    v.max() > -(road.width / 2 + setback) and v.min() < road.width / 2 + setback:
                ok = False
                break
        if ok and keep_clear is not None:
            px = np.clip(keep_clear[0], cx - lx / 2, cx + lx / 2)
            py = np.clip(keep_clear[1], cy - ly / 2, cy + ly / 2)
            ok = math.hypot(px - keep_clear[0], py - keep_clear[1]) > clear_radius
        if ok:
            meshes.append(box_mesh(cx, cy, 0.0, lx, ly, h, label=BACKGROUND))
    return meshes


def make_background(pattern, layout, seed, buildings=8, noise_sigma=0.0):
    """Ground plane plus procedural buildings as a range image; returns
    beyond ``max_range`` become no-return."""
    dirs = pattern.directions()
    r = ground_ranges(pattern, dirs)
    meshes = building_meshes(layout, seed, buildings, keep_clear=pattern.origin[:2])
    if meshes:
        r = np.minimum(r, raycast(meshes, pattern, dirs).t)
    if noise_sigma > 0:
        r = r + stream(seed, "range-noise").normal(0.0, noise_sigma, r.shape)
    r = np.where(r > pattern.max_range, np.inf, r)
    return BackgroundRangeImage(pattern.channels, pattern.n_azimuth, r)


# ---------------------------------------------------------------------------
# compositing

@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    ray_index: np.ndarray
    n_rays: int = 0

    def __len__(self):
        return len(self.points)

    @property
    def dropped(self):
        return self.n_rays - len(self.points)

    def counts(self):
        return {LABELS[k]: int(np.sum(self.labels == k)) for k in LABELS}

    def copy(self):
        return LabeledPointCloud(self.points.copy(), self.labels.copy(), self.ray_index.copy(), self.n_rays)


def composite(background, hits, pattern, dirs=None):
    """Per ray: nearest of vehicle hit and background return, or nothing."""
    dirs = pattern.directions() if dirs is None else dirs
    n = len(dirs)
    if len(background.ranges) != n or len(hits.t) != n:
        raise ValueError("background, hits and beam pattern are misaligned")
    tv = np.where(hits.t <= pattern.max_range, hits.t, np.inf)
    tb = background.ranges
    use_v = np.isfinite(tv) & (tv < tb)
    use_b = ~use_v & np.isfinite(tb)
    r = np.where(use_v, tv, tb)
    keep = use_v | use_b
    idx = np.flatnonzero(keep)
    pts = pattern.origin_array + r[idx, None] * dirs[idx]
    labels = np.where(use_v[idx], VEHICLE, BACKGROUND).astype(np.int64)
    return LabeledPointCloud(pts, labels, idx, n)


class LidarModel:
    """``R_p(x, B)``: instances -> labeled cloud, caching the ray directions."""

    def __init__(self, pattern, background):
        self.pattern = pattern
        self.background = background
        self.dirs = pattern.directions()

    def __call__(self, instances):
        hits = raycast(vehicle_meshes(instances), self.pattern, self.dirs)
        return composite(self.background, hits, self.pattern, self.dirs)


# ---------------------------------------------------------------------------
# analytic helpers (used as oracles)

def triangle_solid_angle(o, a, b, c):
    """Van Oosterom-Strackee solid angle of triangle ``abc`` seen from ``o``."""
    r1, r2, r3 = (np.asarray(p, dtype=np.float64) - o for p in (a, b, c))
    l1, l2, l3 = (np.linalg.norm(r) for r in (r1, r2, r3))
    num = abs(r1 @ np.cross(r2, r3))
    den = l1 * l2 * l3 + (r1 @ r2) * l3 + (r1 @ r3) * l2 + (r2 @ r3) * l1
    return 2.0 * math.atan2(num, den)


def visible_solid_angle(mesh, o):
    """Solid angle of a convex closed mesh: the faces turned towards ``o``."""
    o = np.asarray(o, dtype=np.float64)
    centroid = mesh.vertices.mean(axis=0)
    total = 0.0
    for a, b, c in mesh.corners():
        n = np.cross(b - a, c - a)
        if n @ ((a + b + c) / 3 - centroid) < 0:
            n = -n
        if n @ (o - a) > 0:
            total += triangle_solid_angle(o, a, b, c)
    return total


def point_box_distance(p, inst):
    """Distance from point(s) ``p`` to the surface of a vehicle box."""
    p = np.atleast_2d(p)
    c, s = math.cos(inst.theta), math.sin(inst.theta)
    rel = p[:, :2] - np.array([inst.x, inst.y])
    lx = rel @ np.array([c, s])
    ly = rel @ np.array([-s, c])
    lz = p[:, 2] - inst.height / 2
    half = np.array([inst.length / 2, inst.width / 2, inst.height / 2])
    q = np.abs(np.column_stack([lx, ly, lz])) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


# ---------------------------------------------------------------------------
# PLY (ASCII)

def write_ply(path, cloud):
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z",
             "property int label", "property int ray", "end_header"]
    # repr of a Python float is the shortest string that round-trips
    for (x, y, z), lab, ray in zip(cloud.points.tolist(), cloud.labels, cloud.ray_index):
        lines.append(f"{x!r} {y!r} {z!r} {int(lab)} {int(ray)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path, n_rays=0):
    text = Path(path).read_text().split("\n")
    if text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = next(int(line.split()[2]) for line in text if line.startswith("element vertex"))
    start = text.index("end_header") + 1
    rows = [line.split() for line in text[start:start + n]]
    pts = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows]).reshape(-1, 3)
    labels = np.array([int(r[3]) for r in rows], dtype=np.int64)
    rays = np.array([int(r[4]) for r in rows], dtype=np.int64)
    return LabeledPointCloud(pts, labels, rays, n_rays)


__all__ = [
    "BeamPattern", "TriangleMesh", "box_mesh", "vehicle_meshes", "ray_triangle",
    "ray_triangles", "ray_triangle_oracle", "raycast", "Hits", "BackgroundRangeImage",
    "ground_ranges", "building_meshes", "make_background", "LabeledPointCloud",
    "composite", "LidarModel", "triangle_solid_angle", "visible_solid_angle",
    "point_box_distance", "write_ply", "read_ply", "BACKGROUND", "VEHICLE", "LABELS",
]
