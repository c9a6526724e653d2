"""Typed scene trees, node schemas and the scene-tree file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TREE_FORMAT_VERSION = 1


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Slot:
    """One entry of a property vector.

    ``kind`` is one of ``unit`` (sigmoid, value in (0, 1)), ``binary`` (sigmoid,
    thresholded at 0.5 when generating), ``bounded`` (sigmoid rescaled to
    ``[lo, hi]``) or ``linear`` (unbounded, ``lo``/``hi`` only set the scale).
    """

    name: str
    kind: str = "linear"
    lo: float = 0.0
    hi: float = 1.0

    @property
    def squashed(self):
        return self.kind != "linear"


@dataclass(frozen=True)
class NodeType:
    name: str
    arity: int
    slots: tuple = ()

    @property
    def n_props(self):
        return len(self.slots)


class NodeSchema:
    """Registry of node types.

    Type 0 is the root. ``stop`` names the arity-0 terminal type. Property
    vectors are padded to ``prop_dim`` for the network heads; ``mask`` selects
    the meaningful slots of each type.
    """

    def __init__(self, name, types, root, stop, split="Split", max_depth=16, max_nodes=256):
        self.name = name
        self.types = list(types)
        self.index = {t.name: i for i, t in enumerate(self.types)}
        if len(self.index) != len(self.types):
            raise SchemaError("duplicate node type names")
        if root not in self.index or stop not in self.index:
            raise SchemaError("root and stop types must be registered")
        self.root = self.index[root]
        self.stop = self.index[stop]
        self.split = self.index.get(split)
        if self.types[self.stop].arity != 0 or self.types[self.stop].slots:
            raise SchemaError("stop type must have arity 0 and no properties")
        if not any(t.arity == 0 for t in self.types):
            raise SchemaError("schema needs at least one arity-0 type")
        self.max_depth = max_depth
        self.max_nodes = max_nodes
        self.prop_dim = max(t.n_props for t in self.types)
        self.mask = np.zeros((len(self.types), self.prop_dim))
        self.lo = np.zeros((len(self.types), self.prop_dim))
        self.span = np.ones((len(self.types), self.prop_dim))
        self.squash = np.zeros((len(self.types), self.prop_dim), dtype=bool)
        for i, t in enumerate(self.types):
            for j, s in enumerate(t.slots):
                self.mask[i, j] = 1.0
                self.lo[i, j] = s.lo
                self.span[i, j] = s.hi - s.lo
                self.squash[i, j] = s.squashed
        self.prior = None

    @property
    def n_types(self):
        return len(self.types)

    def type_id(self, name):
        return self.index[name]

    def slot_index(self, type_name, slot_name):
        t = self.types[self.index[type_name]]
        for j, s in enumerate(t.slots):
            if s.name == slot_name:
                return j
        raise SchemaError(f"type {type_name!r} has no property slot {slot_name!r}")

    def normalize(self, type_id, props):
        """Physical property vector -> padded normalized vector."""
        out = np.zeros(self.prop_dim)
        n = len(props)
        out[:n] = (np.asarray(props, dtype=np.float64) - self.lo[type_id, :n]) / self.span[type_id, :n]
        return out

    def denormalize(self, type_id, u):
        n = self.types[type_id].n_props
        return self.lo[type_id, :n] + np.asarray(u[:n]) * self.span[type_id, :n]


@dataclass
class SceneNode:
    type: int
    props: np.ndarray = field(default_factory=lambda: np.zeros(0))
    children: list = field(default_factory=list)

    def __post_init__(self):
        self.props = np.asarray(self.props, dtype=np.float64)

    def walk(self, path=()):
        """Pre-order ``(path, node)`` pairs; a path is the tuple of child slots."""
        stack = [(path, self)]
        while stack:
            p, n = stack.pop()
            yield p, n
            for i in range(len(n.children) - 1, -1, -1):
                stack.append((p + (i,), n.children[i]))

    def get(self, path):
        node = self
        for i in path:
            node = node.children[i]
        return node

    def copy(self):
        return SceneNode(self.type, self.props.copy(), [c.copy() for c in self.children])

    def size(self):
        return sum(1 for _ in self.walk())

    def depth(self):
        return 1 + max((c.depth() for c in self.children), default=0)


def same_topology(a, b):
    if a.type != b.type or len(a.children) != len(b.children):
        return False
    return all(same_topology(x, y) for x, y in zip(a.children, b.children))


def trees_equal(a, b):
    if a.type != b.type or len(a.children) != len(b.children):
        return False
    if a.props.shape != b.props.shape or not np.array_equal(a.props, b.props):
        return False
    return all(trees_equal(x, y) for x, y in zip(a.children, b.children))


def validate(tree, schema, max_depth=None):
    """Raise ``SchemaError`` unless ``tree`` satisfies the schema invariants."""
    max_depth = max_depth or schema.max_depth
    if tree.type != schema.root:
        raise SchemaError("tree root must have the root type")
    for path, node in tree.walk():
        if not 0 <= node.type < schema.n_types:
            raise SchemaError(f"unknown node type {node.type} at {path}")
        t = schema.types[node.type]
        if node.type == schema.root and path:
            raise SchemaError(f"root type below the root at {path}")
        if len(node.children) != t.arity:
            raise SchemaError(f"{t.name} at {path} has {len(node.children)} children, arity {t.arity}")
        if node.props.shape != (t.n_props,):
            raise SchemaError(f"{t.name} at {path} has {node.props.size} properties, expected {t.n_props}")
        if not np.all(np.isfinite(node.props)):
            raise SchemaError(f"non-finite property at {path}")
        for j, s in enumerate(t.slots):
            if s.kind == "unit" and not 0.0 < node.props[j] < 1.0:
                raise SchemaError(f"{t.name}.{s.name} at {path} outside (0, 1)")
        if len(path) + 1 > max_depth:
            raise SchemaError(f"tree deeper than {max_depth}")


# ---------------------------------------------------------------------------
# chains: variable-length lists built from binary Split nodes ending in Stop

def make_chain(items, schema, axis=0.0):
    """``[a, b, c]`` -> ``Split(a, Split(b, Split(c, Stop)))``.

    The split ratio gives every item and the trailing Stop an equal share of
    the parent extent.
    """
    node = SceneNode(schema.stop)
    k = len(items)
    for i in range(k - 1, -1, -1):
        remaining = k - i
        alpha = 1.0 / (remaining + 1)
        node = SceneNode(schema.split, [alpha, axis], [items[i], node])
    return node


def members(node, schema):
    """Object nodes reachable from ``node`` through Split nodes, with their paths
    relative to ``node``."""
    out = []
    stack = [((), node)]
    while stack:
        p, n = stack.pop()
        if n.type == schema.split:
            for i in range(len(n.children) - 1, -1, -1):
                stack.append((p + (i,), n.children[i]))
        elif n.type != schema.stop:
            out.append((p, n))
    return out


def chain_slots(node, schema):
    """Every ``(path, node)`` below ``node`` inside its Split region, including
    Split and Stop nodes, in slot order."""
    out = []
    stack = [((), node)]
    while stack:
        p, n = stack.pop()
        if p:
            out.append((p, n))
        if n.type == schema.split or not p:
            for i in range(len(n.children) - 1, -1, -1):
                stack.append((p + (i,), n.children[i]))
    return out


# ---------------------------------------------------------------------------
# stick-breaking extents

def leaf_extents(tree, schema, size=(1.0, 1.0)):
    """Rectangles ``(x0, x1, y0, y1)`` of the arity-0 nodes.

    Split nodes divide their rectangle along their axis slot by the ratio
    ``alpha``; every other node hands its rectangle to its children.
    """
    rects = []
    stack = [(tree, (0.0, float(size[0]), 0.0, float(size[1])))]
    while stack:
        node, (x0, x1, y0, y1) = stack.pop()
        if not node.children:
            rects.append((x0, x1, y0, y1))
            continue
        if node.type == schema.split:
            alpha, axis = node.props[0], node.props[1]
            if axis < 0.5:
                xm = x0 + (x1 - x0) * alpha
                parts = [(x0, xm, y0, y1), (xm, x1, y0, y1)]
            else:
                ym = y0 + (y1 - y0) * alpha
                parts = [(x0, x1, y0, ym), (x0, x1, ym, y1)]
            stack.extend([(node.children[1], parts[1]), (node.children[0], parts[0])])
        else:
            for c in reversed(node.children):
                stack.append((c, (x0, x1, y0, y1)))
    return rects


def line_sums(rects, axis):
    """For a probe line through the middle of every leaf, the summed extent of
    the leaves it crosses along ``axis`` (0 = x, 1 = y)."""
    r = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    if axis == 0:
        lo, hi, plo, phi = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    else:
        lo, hi, plo, phi = r[:, 2], r[:, 3], r[:, 0], r[:, 1]
    probes = 0.5 * (plo + phi)
    sums = []
    for q in probes:
        hit = (plo <= q) & (q < phi)
        sums.append(float((hi[hit] - lo[hit]).sum()))
    return np.asarray(sums)


# ---------------------------------------------------------------------------
# file format
#
# {"format": "scene-tree", "version": 1, "schema": <name>,
#  "root": {"type": <type name>, "properties": [...], "children": [...]}}
# Floats are written with Python's shortest round-trip repr (<= 17 significant
# digits), so values reload bit-exactly.

def tree_to_dict(tree, schema):
    def enc(n):
        return {
            "type": schema.types[n.type].name,
            "properties": [float(v) for v in n.props],
            "children": [enc(c) for c in n.children],
        }
    return {"format": "scene-tree", "version": TREE_FORMAT_VERSION,
            "schema": schema.name, "root": enc(tree)}


def tree_from_dict(doc, schema):
    if doc.get("format") != "scene-tree":
        raise SchemaError("not a scene-tree document")
    if doc.get("schema") != schema.name:
        raise SchemaError(f"tree schema {doc.get('schema')!r} does not match {schema.name!r}")

    def dec(d):
        if d["type"] not in schema.index:
            raise SchemaError(f"unknown node type {d['type']!r}")
        return SceneNode(schema.index[d["type"]], np.array(d["properties"], dtype=np.float64),
                         [dec(c) for c in d["children"]])
    return dec(doc["root"])


def dumps_tree(tree, schema):
    return json.dumps(tree_to_dict(tree, schema), indent=1)


def save_tree(path, tree, schema):
    Path(path).write_text(dumps_tree(tree, schema) + "\n")


def load_tree(path, schema):
    return tree_from_dict(json.loads(Path(path).read_text()), schema)
