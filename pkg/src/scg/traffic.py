"""Traffic scenes: road layouts, the road/lane/vehicle schema, a procedural
scene generator, scene-to-pose instancing and the three traffic rules
(layout pinning, lane-aligned headings, gather-but-keep-distance)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .knowledge import EdgeRule, Predicate, rule_set_from_entries
from .seeding import stream
from .tree import NodeSchema, NodeType, SceneNode, Slot, chain_slots, make_chain, members

LAYOUT_FORMAT_VERSION = 1
GAP_MIN = 4.0
GATHER_RADIUS = 25.0
GATHER_ITERS = 100
HEADING_SIGMA = math.radians(5.0)
# The layout pin and the gather radius are audited to ~1e-3 of their slot
# spans, the heading only to ~3e-2, so the first and third rules weigh more.
RULE_WEIGHTS = {1: 100.0, 2: 1.0, 3: 100.0}
VEHICLE_DIMS = {"length": (3.8, 5.2), "width": (1.7, 2.1), "height": (1.4, 1.9)}


def traffic_schema():
    return NodeSchema(
        "traffic",
        [
            NodeType("Root", 1),
            NodeType("Split", 2, (Slot("alpha", "unit"), Slot("axis", "binary"))),
            NodeType("Road", 1, (Slot("ox", "linear", -50.0, 50.0), Slot("oy", "linear", -50.0, 50.0),
                                 Slot("heading", "linear", -math.pi, math.pi),
                                 Slot("width", "linear", 0.0, 20.0), Slot("length", "linear", 0.0, 100.0))),
            NodeType("Lane", 1, (Slot("offset", "linear", -5.0, 5.0),
                                 Slot("direction", "linear", -math.pi, math.pi))),
            NodeType("Vehicle", 0, (Slot("s", "linear", 0.0, 80.0), Slot("jitter", "linear", -1.0, 1.0),
                                    Slot("dtheta", "linear", -0.5, 0.5),
                                    Slot("length", "bounded", 3.0, 6.0), Slot("width", "bounded", 1.4, 2.4),
                                    Slot("height", "bounded", 1.2, 2.2))),
            NodeType("Stop", 0),
        ],
        root="Root", stop="Stop", max_depth=24, max_nodes=200,
    )


SCHEMA = traffic_schema()
ROOT, SPLIT, ROAD, LANE, VEHICLE, STOP = (SCHEMA.type_id(n) for n in
                                          ("Root", "Split", "Road", "Lane", "Vehicle", "Stop"))


# ---------------------------------------------------------------------------
# layouts

@dataclass
class Lane:
    offset: float          # lateral offset of the lane center from the road center line
    direction: float       # travel heading in world frame (rad)


@dataclass
class Road:
    origin: tuple
    heading: float
    length: float
    width: float
    lanes: list = field(default_factory=list)

    @property
    def axis(self):
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def normal(self):
        return np.array([-math.sin(self.heading), math.cos(self.heading)])

    def values(self):
        return np.array([self.origin[0], self.origin[1], self.heading, self.width, self.length])


@dataclass
class RoadLayout:
    roads: list
    name: str = "layout"

    def __post_init__(self):
        for r in self.roads:
            if r.width <= 0 or r.length <= 0:
                raise ValueError("road width and length must be positive")
            for ln in r.lanes:
                if abs(ln.offset) >= r.width / 2:
                    raise ValueError("lane center outside its road")

    def to_dict(self):
        return {"format": "road-layout", "version": LAYOUT_FORMAT_VERSION, "name": self.name,
                "roads": [{"origin": list(map(float, r.origin)), "heading": float(r.heading),
                           "length": float(r.length), "width": float(r.width),
                           "lanes": [{"offset": float(ln.offset), "direction": float(ln.direction)}
                                     for ln in r.lanes]} for r in self.roads]}

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "road-layout":
            raise ValueError("not a road-layout document")
        if doc.get("version") != LAYOUT_FORMAT_VERSION:
            raise ValueError(f"unsupported road-layout version {doc.get('version')!r}")
        roads = []
        for r in doc["roads"]:
            lanes = [Lane(float(ln["offset"]), float(ln["direction"])) for ln in r["lanes"]]
            roads.append(Road(tuple(map(float, r["origin"])), float(r["heading"]), float(r["length"]),
                              float(r["width"]), lanes))
        return cls(roads, doc.get("name", "layout"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def intersection_layout(length=80.0, width=7.0):
    """Two crossing two-lane roads centered on the origin (right-hand traffic)."""
    h = width / 4
    a = Road((-length / 2, 0.0), 0.0, length, width, [Lane(-h, 0.0), Lane(h, math.pi)])
    b = Road((0.0, -length / 2), math.pi / 2, length, width, [Lane(-h, math.pi / 2), Lane(h, -math.pi / 2)])
    return RoadLayout([a, b], "intersection")


def straight_layout(length=80.0, width=7.0):
    h = width / 4
    return RoadLayout([Road((-length / 2, 0.0), 0.0, length, width, [Lane(-h, 0.0), Lane(h, math.pi)])],
                      "straight")


LAYOUTS = {"intersection": intersection_layout, "straight": straight_layout}


# ---------------------------------------------------------------------------
# lane frames and poses

def _aligned(road_heading, direction):
    return math.cos(direction - road_heading) >= 0.0


def lane_frame(road_vals, lane_vals):
    """Origin and unit direction of a lane given road and lane property vectors.

    A lane running with the road starts at the road origin; one running
    against it starts at the far end, so ``s`` always spans ``[0, length]``.
    """
    ox, oy, heading, _, length = road_vals
    offset, direction = lane_vals
    axis = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-math.sin(heading), math.cos(heading)])
    origin = np.array([ox, oy]) + offset * normal
    if not _aligned(heading, direction):
        origin = origin + length * axis
    return origin, np.array([math.cos(direction), math.sin(direction)])


@dataclass
class VehicleInstance:
    x: float
    y: float
    theta: float
    length: float
    width: float
    height: float
    path: tuple = ()
    road: int = -1
    lane: int = -1
    clamped: bool = False
    label: str = "vehicle"

    def footprint(self):
        """Four ground-plane corners, counter-clockwise."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def _pose(origin, u, s, jitter, direction, dtheta):
    n = np.array([-u[1], u[0]])
    p = origin + s * u + jitter * n
    return float(p[0]), float(p[1]), float(direction + dtheta)


def scene_structure(tree, schema=SCHEMA):
    """``[(road path, road node, [(lane path, lane node, [(vehicle path, node)])])]``."""
    road_t, lane_t, veh_t = (schema.type_id(n) for n in ("Road", "Lane", "Vehicle"))
    out = []
    if not tree.children:
        return out
    for rp, road in members(tree.children[0], schema):
        if road.type != road_t:
            continue
        rpath = (0,) + rp
        lanes = []
        if road.children:
            for lp, lane in members(road.children[0], schema):
                if lane.type != lane_t:
                    continue
                lpath = rpath + (0,) + lp
                vehicles = []
                if lane.children:
                    vehicles = [(lpath + (0,) + vp, v) for vp, v in members(lane.children[0], schema)
                                if v.type == veh_t]
                lanes.append((lpath, lane, vehicles))
        out.append((rpath, road, lanes))
    return out


def instantiate(tree, layout, schema=SCHEMA):
    """World poses of every Vehicle node.

    Frames come from the tree's own road and lane properties. A vehicle whose
    ``s`` leaves ``[0, road length]`` or whose lateral position leaves the road
    (bounds from the layout road with the same index, if any) is clamped and
    flagged.
    """
    out = []
    for ri, (_, road, lanes) in enumerate(scene_structure(tree, schema)):
        rv = road.props
        bound = layout.roads[ri] if ri < len(layout.roads) else None
        length = bound.length if bound is not None else rv[4]
        half_w = (bound.width if bound is not None else rv[3]) / 2
        for li, (_, lane, vehicles) in enumerate(lanes):
            origin, u = lane_frame(rv, lane.props)
            for vpath, v in vehicles:
                s, jitter, dtheta, vl, vw, vh = v.props
                clamped = False
                if not 0.0 <= s <= length:
                    s = min(max(s, 0.0), length)
                    clamped = True
                lateral = lane.props[0] + (jitter if _aligned(rv[2], lane.props[1]) else -jitter)
                if abs(lateral) > half_w:
                    target = math.copysign(half_w, lateral)
                    jitter += (target - lateral) * (1 if _aligned(rv[2], lane.props[1]) else -1)
                    clamped = True
                x, y, th = _pose(origin, u, s, jitter, lane.props[1], dtheta)
                out.append(VehicleInstance(x, y, th, float(vl), float(vw), float(vh), vpath, ri, li, clamped))
    return out


# ---------------------------------------------------------------------------
# generator

def _overlap(a, b, margin=0.0):
    """Separating-axis test for two oriented footprints (with a clearance margin)."""
    pa, pb = a.footprint(), b.footprint()
    for poly in (pa, pb):
        for k in range(4):
            e = poly[(k + 1) % 4] - poly[k]
            n = np.array([-e[1], e[0]]) / np.hypot(*e)
            ra, rb = pa @ n, pb @ n
            if ra.max() + margin < rb.min() or rb.max() + margin < ra.min():
                return False
    return True


def _inside_road(inst, road):
    rel = inst.footprint() - np.asarray(road.origin)
    u, v = rel @ road.axis, rel @ road.normal
    return u.min() >= 0.0 and u.max() <= road.length and np.abs(v).max() <= road.width / 2


def _truncated_poisson(rng, lam, hi):
    while True:
        k = int(rng.poisson(lam))
        if k <= hi:
            return k


def random_traffic_scene(layout, rng, lam=2.0, max_per_lane=5, gap_min=GAP_MIN, tries=50):
    """One scene tree plus the ground-truth instances the generator sampled."""
    placed = []
    road_nodes = []
    for ri, road in enumerate(layout.roads):
        lane_nodes = []
        for li, lane in enumerate(road.lanes):
            origin, u = lane_frame(road.values(), (lane.offset, lane.direction))
            lane_vs = []
            for _ in range(_truncated_poisson(rng, lam, max_per_lane)):
                for _ in range(tries):
                    vl = rng.uniform(*VEHICLE_DIMS["length"])
                    vw = rng.uniform(*VEHICLE_DIMS["width"])
                    vh = rng.uniform(*VEHICLE_DIMS["height"])
                    s = rng.uniform(vl / 2, road.length - vl / 2)
                    jitter = float(np.clip(rng.normal(0.0, 0.15), -0.4, 0.4))
                    dtheta = float(np.clip(rng.normal(0.0, HEADING_SIGMA), -3 * HEADING_SIGMA, 3 * HEADING_SIGMA))
                    if any(abs(s - t[0]) - (vl + t[3]) / 2 < gap_min for t in lane_vs):
                        continue
                    x, y, th = _pose(origin, u, s, jitter, lane.direction, dtheta)
                    inst = VehicleInstance(x, y, th, vl, vw, vh, road=ri, lane=li)
                    if not _inside_road(inst, road):
                        continue
                    if any(_overlap(inst, o, margin=1.0) for o in placed):
                        continue
                    placed.append(inst)
                    lane_vs.append((s, jitter, dtheta, vl, vw, vh, inst))
                    break
            lane_vs.sort(key=lambda t: t[0])
            vnodes = [SceneNode(VEHICLE, list(t[:6])) for t in lane_vs]
            lane_nodes.append(SceneNode(LANE, [lane.offset, lane.direction], [make_chain(vnodes, SCHEMA, 1.0)]))
        road_nodes.append(SceneNode(ROAD, list(road.values()), [make_chain(lane_nodes, SCHEMA, 1.0)]))
    tree = SceneNode(ROOT, [], [make_chain(road_nodes, SCHEMA, 0.0)])
    # instances in tree order (roads, lanes, sorted vehicles)
    by_lane = {}
    for inst in placed:
        by_lane.setdefault((inst.road, inst.lane), []).append(inst)
    ordered = []
    for key in sorted(by_lane):
        ordered.extend(sorted(by_lane[key], key=lambda i: _s_of(i, layout)))
    return tree, ordered


def _s_of(inst, layout):
    road = layout.roads[inst.road]
    lane = road.lanes[inst.lane]
    origin, u = lane_frame(road.values(), (lane.offset, lane.direction))
    return float((np.array([inst.x, inst.y]) - origin) @ u)


def gen_traffic_dataset(layout, n, seed, return_truth=False):
    rng = stream(seed, "traffic")
    trees, truth = [], []
    for _ in range(n):
        t, inst = random_traffic_scene(layout, rng)
        trees.append(t)
        truth.append(inst)
    return (trees, truth) if return_truth else trees


# ---------------------------------------------------------------------------
# rules

def layout_rule(layout, name="road_layout"):
    """Roads (and their lanes) sit exactly on the layout; surplus roads and
    lanes are retargeted to Stop."""

    def rewrite(root, path, tree, schema):
        out = []
        if not root.children:
            return out
        road_t, lane_t = schema.type_id("Road"), schema.type_id("Lane")
        roads = [(p, n) for p, n in members(root.children[0], schema) if n.type == road_t]
        for k, (rp, road) in enumerate(roads):
            rel = (0,) + rp
            if k >= len(layout.roads):
                out.append((rel, schema.stop, None))
                continue
            ref = layout.roads[k]
            vals = ref.values()
            out.append((rel, None, {j: float(vals[j]) for j in range(5)}))
            if not road.children:
                continue
            lanes = [(p, n) for p, n in members(road.children[0], schema) if n.type == lane_t]
            for m, (lp, lane) in enumerate(lanes):
                lrel = rel + (0,) + lp
                if m >= len(ref.lanes):
                    out.append((lrel, schema.stop, None))
                else:
                    out.append((lrel, None, {0: ref.lanes[m].offset, 1: ref.lanes[m].direction}))
        return out

    return EdgeRule(name, Predicate(("Root",)), rewrite)


def heading_rule(tolerance_deg=0.0, name="lane_heading"):
    """Vehicle headings within ``tolerance_deg`` of their lane direction."""
    tol = math.radians(tolerance_deg)
    if tol < 0:
        raise ValueError("tolerance_deg must be non-negative")

    def rewrite(lane, path, tree, schema):
        if not lane.children:
            return []
        veh_t = schema.type_id("Vehicle")
        return [((0,) + p, None, {"dtheta": float(np.clip(n.props[2], -tol, tol))})
                for p, n in members(lane.children[0], schema) if n.type == veh_t]

    return EdgeRule(name, Predicate(("Lane",)), rewrite)


def _isotonic(w):
    """Pool-adjacent-violators: least-squares non-decreasing fit (block means)."""
    blocks = []
    for v in w:
        blocks.append([float(v), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, n2 = blocks.pop()
            v1, n1 = blocks.pop()
            blocks.append([(v1 * n1 + v2 * n2) / (n1 + n2), n1 + n2])
    out = []
    for v, n in blocks:
        out.extend([v] * n)
    return np.array(out)


def separate(s, lengths, gap_min):
    """Closest positions (least squares) to ``s`` with bumper gaps >= ``gap_min``
    between consecutive vehicles, order kept; the mean position is preserved."""
    s = np.asarray(s, dtype=np.float64)
    if s.size < 2:
        return s.copy()
    order = np.argsort(s, kind="stable")
    ls = np.asarray(lengths, dtype=np.float64)[order]
    need = np.concatenate([[0.0], np.cumsum(gap_min + 0.5 * (ls[:-1] + ls[1:]))])
    fitted = _isotonic(s[order] - need) + need
    out = np.empty_like(s)
    out[order] = fitted
    return out


def gather_rule(gap_min=GAP_MIN, radius=GATHER_RADIUS, name="gather_keep_distance"):
    """Per road: vehicles farther than ``radius`` from the centroid of the
    road's vehicles move along their lane to the radius boundary; then each
    lane's vehicles are spread to bumper gaps of at least ``gap_min`` while
    keeping their mean position. Separation wins where the two conflict."""
    if not gap_min < radius:
        raise ValueError("gap_min must be smaller than gather_radius")

    def rewrite(road, path, tree, schema):
        if not road.children:
            return []
        lane_t, veh_t = schema.type_id("Lane"), schema.type_id("Vehicle")
        rv = road.props
        entries = []    # (rel path, lane key, s, length, world xy, lane frame)
        for lp, lane in members(road.children[0], schema):
            if lane.type != lane_t or not lane.children:
                continue
            origin, u = lane_frame(rv, lane.props)
            for vp, v in members(lane.children[0], schema):
                if v.type != veh_t:
                    continue
                n = np.array([-u[1], u[0]])
                xy = origin + v.props[0] * u + v.props[1] * n
                entries.append(((0,) + lp + (0,) + vp, lp, float(v.props[0]), float(v.props[3]),
                                xy, origin, u, n, float(v.props[1])))
        if not entries:
            return []
        s0 = np.array([e[2] for e in entries])
        lanes = {}
        for k, e in enumerate(entries):
            lanes.setdefault(e[1], []).append(k)
        # moving a vehicle shifts the centroid, so iterate to a consistent set
        s_new = s0.copy()
        for _ in range(GATHER_ITERS):
            s_prev = s_new.copy()
            xy = np.array([e[5] + s_new[k] * e[6] + e[8] * e[7] for k, e in enumerate(entries)])
            centroid = xy.mean(axis=0)
            for k, e in enumerate(entries):
                origin, u, n, jit = e[5], e[6], e[7], e[8]
                if np.hypot(*(xy[k] - centroid)) <= radius:
                    continue
                # move along u so that |origin + s' u + jit n - centroid| = radius
                q = origin + jit * n - centroid
                b = q @ u
                disc = b * b - (q @ q - radius * radius)
                if disc < 0:
                    s_new[k] -= (xy[k] - centroid) @ u    # closest approach along the lane
                    continue
                r1, r2 = -b - math.sqrt(disc), -b + math.sqrt(disc)
                s_new[k] = r1 if abs(r1 - s_new[k]) < abs(r2 - s_new[k]) else r2
            for ks in lanes.values():
                s_new[ks] = separate(s_new[ks], [entries[k][3] for k in ks], gap_min)
            if np.max(np.abs(s_new - s_prev)) <= 1e-9:
                break
        out = []
        for k, e in enumerate(entries):
            if s_new[k] != e[2]:
                out.append((e[0], None, {"s": float(s_new[k])}))
        return out

    return EdgeRule(name, Predicate(("Road",)), rewrite)


def rule_registry(layout):
    """Rule-set file names of the traffic rules; the layout is the context."""
    return {
        "road_layout": lambda: layout_rule(layout),
        "lane_heading": lambda tolerance_deg=0.0: heading_rule(tolerance_deg),
        "gather_keep_distance": lambda gap_min=GAP_MIN, gather_radius=GATHER_RADIUS:
            gather_rule(gap_min, gather_radius),
    }


def rule_entries(gap_min=GAP_MIN, gather_radius=GATHER_RADIUS, which=(1, 2, 3), weights=None):
    """Rule-set file entries equivalent to ``rules_traffic``."""
    table = {1: {"rule": "road_layout"}, 2: {"rule": "lane_heading", "tolerance_deg": 0.0},
             3: {"rule": "gather_keep_distance", "gap_min": gap_min, "gather_radius": gather_radius}}
    w = [RULE_WEIGHTS[i] for i in which] if weights is None else list(weights)
    if len(w) != len(which):
        raise ValueError("one weight per rule")
    return [dict(table[i], weight=float(wi)) for i, wi in zip(which, w)]


def rules_traffic(layout, gap_min=GAP_MIN, gather_radius=GATHER_RADIUS, which=(1, 2, 3), weights=None):
    """Rules 1 (layout), 2 (heading) and 3 (gather); ``weights`` defaults to
    ``RULE_WEIGHTS``."""
    return rule_set_from_entries(rule_entries(gap_min, gather_radius, which, weights),
                                 rule_registry(layout), {"layout": layout})


# ---------------------------------------------------------------------------
# audit

def lane_gaps(tree, schema=SCHEMA):
    """Bumper-to-bumper gaps between consecutive vehicles of every lane."""
    gaps = []
    for _, _, lanes in scene_structure(tree, schema):
        for _, _, vehicles in lanes:
            v = sorted((n.props[0], n.props[3]) for _, n in vehicles)
            gaps.extend(b[0] - a[0] - 0.5 * (a[1] + b[1]) for a, b in zip(v, v[1:]))
    return np.array(gaps)


def audit(tree, layout, gap_min=GAP_MIN, gather_radius=GATHER_RADIUS, schema=SCHEMA, pin_tol=1e-3):
    """Rule-satisfaction report.

    The road pin error is measured in the schema's normalized units (each
    slot divided by its scale span), so one tolerance covers meters and
    radians alike; the absolute error is reported as well.
    """
    struct = scene_structure(tree, schema)
    pin_abs = pin_norm = 0.0
    extra_roads = max(0, len(struct) - len(layout.roads))
    lane_mismatch = 0
    for k, (_, road, lanes) in enumerate(struct[:len(layout.roads)]):
        want = layout.roads[k].values()
        err = np.abs(road.props - want)
        pin_abs = max(pin_abs, float(err.max()))
        pin_norm = max(pin_norm, float((err / schema.span[ROAD, :5]).max()))
        lane_mismatch += abs(len(lanes) - len(layout.roads[k].lanes))
    missing_roads = max(0, len(layout.roads) - len(struct))
    dtheta = 0.0
    dist = 0.0
    for _, road, lanes in struct:
        pts = []
        for _, lane, vehicles in lanes:
            origin, u = lane_frame(road.props, lane.props)
            n = np.array([-u[1], u[0]])
            for _, v in vehicles:
                dtheta = max(dtheta, abs(float(v.props[2])))
                pts.append(origin + v.props[0] * u + v.props[1] * n)
        if len(pts) > 1:
            pts = np.array(pts)
            dist = max(dist, float(np.max(np.hypot(*(pts - pts.mean(axis=0)).T))))
    gaps = lane_gaps(tree, schema)
    min_gap = float(gaps.min()) if gaps.size else math.inf
    checks = {
        "road_pin<=1e-3": pin_norm <= pin_tol and extra_roads == 0 and missing_roads == 0,
        "heading<=2deg": dtheta <= math.radians(2.0),
        "gaps>=gap_min-0.1": min_gap >= gap_min - 0.1,
        "gather<=radius+0.1": dist <= gather_radius + 0.1,
    }
    return {"road_pin_normalized": pin_norm, "road_pin_abs": pin_abs, "extra_roads": extra_roads,
            "missing_roads": missing_roads, "lane_count_mismatch": lane_mismatch,
            "max_abs_dtheta_deg": math.degrees(dtheta), "min_gap": min_gap, "max_distance": dist,
            "checks": checks, "passed": all(checks.values())}


__all__ = [
    "SCHEMA", "traffic_schema", "Lane", "Road", "RoadLayout", "intersection_layout",
    "straight_layout", "LAYOUTS", "VehicleInstance", "lane_frame", "scene_structure",
    "instantiate", "random_traffic_scene", "gen_traffic_dataset", "layout_rule",
    "heading_rule", "gather_rule", "separate", "rules_traffic", "rule_registry", "rule_entries", "RULE_WEIGHTS", "audit", "lane_gaps",
    "chain_slots",
]
