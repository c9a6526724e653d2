"""Box-and-plate scenes: schema, dataset synthesis, a differentiable soft
rasterizer, the reconstruction objective, Direct Search and the three
scene rules (plate quota, shared box color, box gathering)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .knowledge import EdgeRule, Predicate, rule_set_from_entries
from .seeding import stream
from .tree import NodeSchema, NodeType, SceneNode, Slot, chain_slots, make_chain, members

BOX_HALF = 0.04
PLATE_COLOR = np.array([0.6, 0.6, 0.6])
BACKGROUND = 1.0
DEFAULT_GAMMA = 0.15


def box_schema():
    return NodeSchema(
        "boxes",
        [
            NodeType("Root", 1),
            NodeType("Split", 2, (Slot("alpha", "unit"), Slot("axis", "binary"))),
            NodeType("Plate", 1, (Slot("cx", "bounded", 0.0, 1.0), Slot("cy", "bounded", 0.0, 1.0),
                                  Slot("half", "bounded", 0.05, 0.3))),
            NodeType("Box", 1, (Slot("ox", "linear", -0.3, 0.3), Slot("oy", "linear", -0.3, 0.3),
                                Slot("r", "bounded", 0.0, 1.0), Slot("g", "bounded", 0.0, 1.0),
                                Slot("b", "bounded", 0.0, 1.0))),
            NodeType("Stop", 0),
        ],
        root="Root", stop="Stop", max_depth=16, max_nodes=160,
    )


SCHEMA = box_schema()
ROOT, SPLIT, PLATE, BOX, STOP = (SCHEMA.type_id(n) for n in ("Root", "Split", "Plate", "Box", "Stop"))


# ---------------------------------------------------------------------------
# scene construction

def make_scene(plates, schema=SCHEMA):
    """``plates``: list of ``(cx, cy, half, [(ox, oy, r, g, b), ...])``."""
    pnodes = []
    for cx, cy, half, boxes in plates:
        bnodes = [SceneNode(schema.type_id("Box"), list(b), [SceneNode(schema.stop)]) for b in boxes]
        pnodes.append(SceneNode(schema.type_id("Plate"), [cx, cy, half], [make_chain(bnodes, schema, axis=1.0)]))
    return SceneNode(schema.root, [], [make_chain(pnodes, schema, axis=0.0)])


def target_scene():
    """Two plates, each holding a tight 2x2 block of four same-colored boxes."""
    d = BOX_HALF
    block = [(-d, -d), (d, -d), (-d, d), (d, d)]
    red = (0.9, 0.15, 0.1)
    blue = (0.1, 0.25, 0.85)
    return make_scene([
        (0.3, 0.45, 0.15, [(ox, oy) + red for ox, oy in block]),
        (0.7, 0.55, 0.15, [(ox, oy) + blue for ox, oy in block]),
    ])


def random_scene(rng):
    plates = []
    for _ in range(int(rng.integers(1, 4))):
        half = rng.uniform(0.1, 0.2)
        cx, cy = rng.uniform(0.2, 0.8, 2)
        room = half - BOX_HALF
        boxes = []
        for _ in range(int(rng.integers(1, 6))):
            ox, oy = rng.uniform(-room, room, 2)
            boxes.append((ox, oy, *rng.uniform(0.0, 1.0, 3)))
        plates.append((cx, cy, half, boxes))
    return make_scene(plates)


def gen_dataset(n, seed, target=None, target_copies=10):
    """``n - target_copies`` random scenes followed by copies of ``target``.

    Returns ``(trees, is_target)``.
    """
    target = target if target is not None else target_scene()
    if n < target_copies:
        raise ValueError("n must be at least target_copies")
    rng = stream(seed, "dataset")
    trees = [random_scene(rng) for _ in range(n - target_copies)]
    trees += [target.copy() for _ in range(target_copies)]
    flags = [False] * (n - target_copies) + [True] * target_copies
    return trees, flags


def scene_elements(tree, schema=SCHEMA):
    """Plates and boxes in render order.

    Returns ``(plates, boxes)`` as lists of ``(path, parent plate path)``; a
    box outside every plate is anchored at the frame center.
    """
    plate_t, box_t = schema.type_id("Plate"), schema.type_id("Box")
    plates, boxes = [], []
    stack = [((), tree, None)]
    while stack:
        path, node, anchor = stack.pop()
        if node.type == plate_t:
            plates.append((path, anchor))
            anchor = path
        elif node.type == box_t:
            boxes.append((path, anchor))
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i], anchor))
    return plates, boxes


def plate_groups(tree, schema=SCHEMA):
    """``{plate path: [box path, ...]}`` using the render anchoring."""
    plates, boxes = scene_elements(tree, schema)
    groups = {p: [] for p, _ in plates}
    for b, anchor in boxes:
        groups.setdefault(anchor, []).append(b)
    return groups


# ---------------------------------------------------------------------------
# soft rasterizer

@dataclass(frozen=True)
class RenderConfig:
    height: int = 64
    width: int = 64
    tau: float = 0.01

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image must be nonempty")


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rasterize(elems, cfg):
    """Composite soft rectangles over a white background.

    ``elems`` is ``(K, 7)``: center x, center y, half width, half height, rgb.
    Returns the image ``(H, W, 3)`` and a cache for :func:`rasterize_vjp`.
    """
    elems = np.asarray(elems, dtype=np.float64).reshape(-1, 7)
    px = (np.arange(cfg.width) + 0.5) / cfg.width
    py = (np.arange(cfg.height) + 0.5) / cfg.height
    img = np.full((cfg.height, cfg.width, 3), BACKGROUND)
    cache = []
    for cx, cy, hw, hh, r, g, b in elems:
        mx = _sig((hw - np.abs(px - cx)) / cfg.tau)
        my = _sig((hh - np.abs(py - cy)) / cfg.tau)
        m = my[:, None] * mx[None, :]
        cache.append((img, mx, my, m))
        img = img * (1.0 - m)[..., None] + m[..., None] * np.array([r, g, b])
    return img, (elems, px, py, cache)


def rasterize_vjp(grad_img, cache, cfg):
    """Adjoint of :func:`rasterize`: ``dL/d elems`` from ``dL/d image``."""
    elems, px, py, steps = cache
    d_elems = np.zeros_like(elems)
    g = grad_img
    for k in range(len(elems) - 1, -1, -1):
        prev, mx, my, m = steps[k]
        cx, cy, hw, hh = elems[k, :4]
        col = elems[k, 4:]
        d_elems[k, 4:] = np.einsum("ij,ijc->c", m, g)
        dm = np.einsum("ijc,ijc->ij", g, col - prev)
        g = g * (1.0 - m)[..., None]
        dmx = dm.T @ my
        dmy = dm @ mx
        sx = dmx * mx * (1.0 - mx) / cfg.tau
        sy = dmy * my * (1.0 - my) / cfg.tau
        d_elems[k, 0] = np.sum(sx * np.sign(px - cx))
        d_elems[k, 2] = np.sum(sx)
        d_elems[k, 1] = np.sum(sy * np.sign(py - cy))
        d_elems[k, 3] = np.sum(sy)
    return d_elems


def _tree_elements(tree, schema):
    """Element rows and the bookkeeping that maps them back to node properties."""
    plates, boxes = scene_elements(tree, schema)
    rows = []
    for path, _ in plates:
        cx, cy, half = tree.get(path).props
        rows.append([cx, cy, half, half, *PLATE_COLOR])
    for path, anchor in boxes:
        ox, oy, r, g, b = tree.get(path).props
        ax, ay = (tree.get(anchor).props[:2] if anchor is not None else (0.5, 0.5))
        rows.append([ax + ox, ay + oy, BOX_HALF, BOX_HALF, r, g, b])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 7), plates, boxes


def render(tree, cfg=None, schema=SCHEMA):
    """Image ``(H, W, 3)`` in [0, 1] of a box scene."""
    cfg = cfg or RenderConfig()
    elems, _, _ = _tree_elements(tree, schema)
    return rasterize(elems, cfg)[0]


def render_trace(trace, cfg=None, schema=SCHEMA):
    """Differentiable render of a decoded trace: a graph node of shape
    ``(H*W, 3)`` whose parents are the trace's normalized property nodes."""
    cfg = cfg or RenderConfig()
    tree = trace.tree
    elems, plates, boxes = _tree_elements(tree, schema)
    img, cache = rasterize(elems, cfg)
    plate_t, box_t = schema.type_id("Plate"), schema.type_id("Box")
    parents = []
    index = {}
    for path, _ in plates + boxes:
        if path in trace.props:
            index[path] = len(parents)
            parents.append(trace.props[path])
    span_p, span_b = schema.span[plate_t], schema.span[box_t]

    def vjp(g):
        d = rasterize_vjp(g.reshape(img.shape), cache, cfg)
        grads = [np.zeros_like(p.value) for p in parents]
        for k, (path, _) in enumerate(plates):
            if path in index:
                dp = grads[index[path]]
                dp[0] += d[k, 0] * span_p[0]
                dp[1] += d[k, 1] * span_p[1]
                dp[2] += (d[k, 2] + d[k, 3]) * span_p[2]
        off = len(plates)
        for k, (path, anchor) in enumerate(boxes):
            row = d[off + k]
            if path in index:
                db = grads[index[path]]
                db[0] += row[0] * span_b[0]
                db[1] += row[1] * span_b[1]
                db[2:5] += row[4:7] * span_b[2:5]
            if anchor is not None and anchor in index:
                dp = grads[index[anchor]]
                dp[0] += row[0] * span_p[0]
                dp[1] += row[1] * span_p[1]
        return tuple(grads)

    return ad.custom(img.reshape(-1, 3), parents, vjp, "render")


def recon_loss(tree, target, cfg=None, schema=SCHEMA):
    """``||S - R(x)||`` (Frobenius norm, not squared)."""
    img = render(tree, cfg, schema)
    if img.shape != np.shape(target):
        raise ValueError("target image shape does not match the render config")
    return float(np.sqrt(np.sum((img - target) ** 2)))


def recon_loss_node(trace, target, cfg=None, schema=SCHEMA):
    img = render_trace(trace, cfg, schema)
    return ad.sqrt(ad.sq_error(img, np.asarray(target).reshape(-1, 3)))


# ---------------------------------------------------------------------------
# Direct Search: gradient descent in data space with fixed element counts

def flatten_scene(tree, schema=SCHEMA):
    """``(vector, layout)``: plate (cx, cy, half) then box (ox, oy, rgb) values,
    and the number of boxes per plate."""
    groups = plate_groups(tree, schema)
    vec, layout = [], []
    for ppath, bpaths in groups.items():
        if ppath is None:
            continue
        vec.extend(tree.get(ppath).props)
        layout.append(len(bpaths))
    for ppath, bpaths in groups.items():
        if ppath is None:
            continue
        for b in bpaths:
            vec.extend(tree.get(b).props)
    return np.asarray(vec, dtype=np.float64), tuple(layout)


def unflatten_scene(vec, layout):
    n_p = len(layout)
    plates, off = [], 3 * n_p
    for i, nb in enumerate(layout):
        cx, cy, half = vec[3 * i:3 * i + 3]
        boxes = [tuple(vec[off + 5 * j: off + 5 * j + 5]) for j in range(nb)]
        off += 5 * nb
        plates.append((cx, cy, half, boxes))
    return make_scene(plates)


def _flat_elements(vec, layout):
    n_p = len(layout)
    rows, owner = [], []
    for i in range(n_p):
        cx, cy, half = vec[3 * i:3 * i + 3]
        rows.append([cx, cy, half, half, *PLATE_COLOR])
    off = 3 * n_p
    for i, nb in enumerate(layout):
        for _ in range(nb):
            ox, oy, r, g, b = vec[off:off + 5]
            rows.append([vec[3 * i] + ox, vec[3 * i + 1] + oy, BOX_HALF, BOX_HALF, r, g, b])
            owner.append((i, off))
            off += 5
    return np.asarray(rows).reshape(-1, 7), owner


def flat_loss_grad(vec, layout, target, cfg):
    elems, owner = _flat_elements(vec, layout)
    img, cache = rasterize(elems, cfg)
    diff = img - target
    loss = float(np.sqrt(np.sum(diff * diff)))
    if loss == 0.0:
        return loss, np.zeros_like(vec)
    d = rasterize_vjp(diff / loss, cache, cfg)
    grad = np.zeros_like(vec)
    n_p = len(layout)
    for i in range(n_p):
        grad[3 * i] += d[i, 0]
        grad[3 * i + 1] += d[i, 1]
        grad[3 * i + 2] += d[i, 2] + d[i, 3]
    for k, (i, off) in enumerate(owner):
        row = d[n_p + k]
        grad[off] += row[0]
        grad[off + 1] += row[1]
        grad[off + 2:off + 5] += row[4:7]
        grad[3 * i] += row[0]
        grad[3 * i + 1] += row[1]
    return loss, grad


def direct_search(init, layout, target, budget, lr=1e-4, cfg=None):
    """Plain gradient descent on the reconstruction error over the flat
    parameter vector. Returns ``(final vector, loss curve)``. Position
    gradients scale like ``1 / tau``, hence the small default step."""
    cfg = cfg or RenderConfig()
    vec = np.array(init, dtype=np.float64)
    curve = []
    for _ in range(budget):
        loss, grad = flat_loss_grad(vec, layout, target, cfg)
        curve.append(loss)
        vec = vec - lr * grad
        n_p = len(layout)
        vec[2:3 * n_p:3] = np.clip(vec[2:3 * n_p:3], 0.05, 0.3)
        boxes = vec[3 * n_p:].reshape(-1, 5)
        boxes[:, 2:] = np.clip(boxes[:, 2:], 0.0, 1.0)
    curve.append(flat_loss_grad(vec, layout, target, cfg)[0])
    return vec, np.asarray(curve)


# ---------------------------------------------------------------------------
# knowledge rules

def _plate_boxes(plate, schema):
    box_t = schema.type_id("Box")
    return [(p, n) for p, n in members(plate.children[0], schema) if n.type == box_t] if plate.children else []


def max_children_rule(parent_type="Root", child_type="Plate", quota=2, name="max_plates"):
    """At most ``quota`` ``child_type`` members under ``parent_type``; the
    largest subtrees holding only surplus members are retargeted to Stop."""

    def rewrite(parent, path, tree, schema):
        ctype = schema.type_id(child_type)
        region = chain_slots(parent, schema)
        seen = 0
        rank = {}
        for p, n in region:
            if n.type == ctype:
                seen += 1
                rank[p] = seen
        if seen <= quota:
            return []
        out = []
        covered = set()
        for p, n in region:
            if any(p[:k] in covered for k in range(1, len(p) + 1)):
                continue
            if n.type == schema.stop:
                continue
            inside = [rank[q] for q in rank if q[:len(p)] == p]
            if inside and min(inside) > quota:
                covered.add(p)
                out.append((p, schema.stop, None))
        return out

    return EdgeRule(name, Predicate((parent_type,)), rewrite)


def same_color_rule(name="same_color"):
    def rewrite(plate, path, tree, schema):
        boxes = _plate_boxes(plate, schema)
        if len(boxes) < 2:
            return []
        mean = np.mean([n.props[2:5] for _, n in boxes], axis=0)
        return [((0,) + p, None, {"r": mean[0], "g": mean[1], "b": mean[2]}) for p, _ in boxes]

    return EdgeRule(name, Predicate(("Plate",)), rewrite)


def gather_rule(gamma=DEFAULT_GAMMA, name="gather"):
    if gamma <= 0:
        raise ValueError("gamma must be positive")

    def rewrite(plate, path, tree, schema):
        boxes = _plate_boxes(plate, schema)
        if len(boxes) < 2:
            return []
        pos = np.array([n.props[:2] for _, n in boxes])
        centroid = pos.mean(axis=0)
        out = []
        for (p, _), q in zip(boxes, pos):
            d = q - centroid
            r = float(np.hypot(*d))
            if r > gamma:
                t = centroid + gamma * d / r
                out.append(((0,) + p, None, {"ox": t[0], "oy": t[1]}))
        return out

    return EdgeRule(name, Predicate(("Plate",)), rewrite)


def rule_registry(gamma=DEFAULT_GAMMA):
    """Rule-set file names of the synthetic rules."""
    return {
        "max_children": lambda parent="Root", type="Plate", max=2: max_children_rule(parent, type, max),
        "same_color": lambda: same_color_rule(),
        "gather": lambda gamma=gamma: gather_rule(gamma),
    }


def rule_entries(gamma=DEFAULT_GAMMA, which=(1, 2, 3)):
    """Rule-set file entries equivalent to ``rules_synthetic``."""
    table = {1: {"rule": "max_children", "parent": "Root", "type": "Plate", "max": 2},
             2: {"rule": "same_color"}, 3: {"rule": "gather", "gamma": gamma}}
    return [table[i] for i in which]


def rules_synthetic(gamma=DEFAULT_GAMMA, which=(1, 2, 3)):
    return rule_set_from_entries(rule_entries(gamma, which), rule_registry(gamma))


def audit(tree, gamma=DEFAULT_GAMMA, schema=SCHEMA):
    """Rule-satisfaction report of a final scene."""
    groups = plate_groups(tree, schema)
    n_plates = sum(1 for p in groups if p is not None)
    spread = 0.0
    dist = 0.0
    for ppath, bpaths in groups.items():
        if len(bpaths) < 2:
            continue
        props = np.array([tree.get(b).props for b in bpaths])
        colors = props[:, 2:5]
        spread = max(spread, float(np.max(np.abs(colors[:, None, :] - colors[None, :, :]))))
        pos = props[:, :2]
        dist = max(dist, float(np.max(np.hypot(*(pos - pos.mean(axis=0)).T))))
    checks = {
        "plates<=2": n_plates <= 2,
        "color_spread<0.05": spread < 0.05,
        "distance<=gamma+0.01": dist <= gamma + 0.01,
    }
    return {"plates": n_plates, "color_spread": spread, "max_distance": dist,
            "checks": checks, "passed": all(checks.values())}


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit) images

def write_ppm(path, img):
    img = np.asarray(img)
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
