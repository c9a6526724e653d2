"""Node- and edge-level knowledge over scene trees.

A rule inspects a tree and proposes *targets*: a type ``c'`` for a child slot
and/or property values ``g'`` for some slots of a node. The knowledge loss
measures how far a decoded trace is from those targets (squared error on the
normalized properties, cross-entropy on the classifier logits), and
``prox`` pulls a latent code towards lower knowledge loss while staying close
to where it started.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tree import SchemaError, chain_slots, members
from .tvae import decode

# logit gap by which a type target must win to count as met
TYPE_MARGIN = 0.5


@dataclass
class Target:
    path: tuple
    node_type: int                 # type of the node the target was computed on
    rule: int = -1
    type: int | None = None        # c' for the slot at ``path``
    values: np.ndarray | None = None   # g' in physical units (node's n_props)
    mask: np.ndarray | None = None     # bool, slots of ``values`` that are targets


@dataclass
class KnowledgeTargets:
    targets: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)

    def for_rule(self, rule):
        return [t for t in self.targets if t.rule == rule]


@dataclass(frozen=True)
class Predicate:
    """Type membership plus optional interval tests ``{slot: (lo, hi)}``."""

    types: tuple = ()
    intervals: tuple = ()   # ((slot name, lo, hi), ...)

    def __call__(self, node, schema):
        names = {schema.types[node.type].name}
        if self.types and not names & set(self.types):
            return False
        for slot, lo, hi in self.intervals:
            j = schema.slot_index(schema.types[node.type].name, slot)
            if not lo <= node.props[j] <= hi:
                return False
        return True

    def check(self, schema):
        for t in self.types:
            if t not in schema.index:
                raise SchemaError(f"unknown node type {t!r}")
        for slot, _, _ in self.intervals:
            for t in self.types:
                schema.slot_index(t, slot)


class Rule:
    name = "rule"

    def check(self, schema):
        pass

    def targets(self, tree, schema):
        raise NotImplementedError


class NodeRule(Rule):
    """``f(A)``: every node matching ``selector`` gets ``rewrite(node) -> {slot: value}``."""

    def __init__(self, name, selector, rewrite):
        self.name = name
        self.selector = selector
        self.rewrite = rewrite

    def check(self, schema):
        if isinstance(self.selector, Predicate):
            self.selector.check(schema)

    def targets(self, tree, schema):
        out = []
        for path, node in tree.walk():
            if not self.selector(node, schema):
                continue
            slots = self.rewrite(node, path, tree, schema)
            if slots:
                out.append(_prop_target(path, node, slots, schema))
        return out


class EdgeRule(Rule):
    """``f1(A) -> for all i f2(B_i)``.

    ``rewrite(parent, parent_path, tree, schema)`` returns a list of
    ``(relative path, type or None, {slot: value})`` for the parent's children
    (objects reached through Split chains count as children).
    """

    def __init__(self, name, parent, rewrite):
        self.name = name
        self.parent = parent
        self.rewrite = rewrite

    def check(self, schema):
        if isinstance(self.parent, Predicate):
            self.parent.check(schema)

    def targets(self, tree, schema):
        out = []
        for path, node in tree.walk():
            if not self.parent(node, schema):
                continue
            for rel, ctype, slots in self.rewrite(node, path, tree, schema):
                cpath = path + tuple(rel)
                child = tree.get(cpath)
                if ctype is not None:
                    if not 0 <= ctype < schema.n_types or ctype == schema.root:
                        raise SchemaError(f"rule {self.name!r} targets invalid type {ctype}")
                    out.append(Target(cpath, child.type, type=int(ctype)))
                if slots:
                    out.append(_prop_target(cpath, child, slots, schema))
        return out


def _prop_target(path, node, slots, schema):
    t = schema.types[node.type]
    values = node.props.copy()
    mask = np.zeros(t.n_props, dtype=bool)
    for slot, v in slots.items():
        j = schema.slot_index(t.name, slot) if isinstance(slot, str) else int(slot)
        if not 0 <= j < t.n_props:
            raise SchemaError(f"{t.name} has no property slot {slot!r}")
        values[j] = v
        mask[j] = True
    return Target(path, node.type, values=values, mask=mask)


class KnowledgeSet:
    def __init__(self, rules, weights=None, context=None):
        self.rules = list(rules)
        self.weights = list(weights) if weights is not None else [1.0] * len(self.rules)
        if len(self.weights) != len(self.rules):
            raise ValueError("one weight per rule")
        self.context = context or {}

    def __len__(self):
        return len(self.rules)

    def __bool__(self):
        return bool(self.rules)

    @property
    def names(self):
        return [r.name for r in self.rules]


def apply_knowledge(tree, kset, schema):
    """Targets ``Y_t(x)`` for ``tree``.

    Every rule reads the original tree. Where two rules target the same slot
    (or the same child type), the later rule in the list wins.
    """
    if kset is None or not kset.rules:
        return KnowledgeTargets()
    prop_owner = {}   # (path, slot) -> (rule, value)
    type_owner = {}   # path -> (rule, type)
    node_types = {}
    for ri, rule in enumerate(kset.rules):
        rule.check(schema)
        for t in rule.targets(tree, schema):
            node_types[t.path] = t.node_type
            if t.type is not None:
                type_owner[t.path] = (ri, t.type)
            if t.values is not None:
                for j in np.flatnonzero(t.mask):
                    prop_owner[(t.path, int(j))] = (ri, float(t.values[j]))
    grouped = {}
    for (path, j), (ri, v) in prop_owner.items():
        grouped.setdefault((path, ri), {})[j] = v
    out = []
    for (path, ri), slots in sorted(grouped.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        node = tree.get(path)
        values = node.props.copy()
        mask = np.zeros(values.size, dtype=bool)
        for j, v in slots.items():
            values[j] = v
            mask[j] = True
        out.append(Target(path, node_types[path], rule=ri, values=values, mask=mask))
    for path, (ri, c) in sorted(type_owner.items(), key=lambda kv: (kv[1][0], kv[0])):
        out.append(Target(path, node_types[path], rule=ri, type=c))
    return KnowledgeTargets(out)


@dataclass
class KnowledgeLoss:
    total: object                  # graph node
    per_rule: dict                 # rule index -> float
    skipped: int = 0
    unmet_types: int = 0
    prop_error: float = 0.0        # max |g - g'| over masked slots (physical units)

    @property
    def value(self):
        return float(self.total.value)


def knowledge_loss(trace, targets, kset, schema, margin=TYPE_MARGIN):
    """``L_Y``: weighted squared error on targeted property slots plus
    cross-entropy on targeted child types.

    A type target whose logit already wins by ``margin`` is met and
    contributes nothing. Targets whose path no longer exists in ``trace`` (or
    points at a node of another type) are skipped and tallied.
    """
    weights = kset.weights if kset is not None else []
    terms = {}
    skipped = unmet = 0
    max_err = 0.0
    for t in targets:
        w = weights[t.rule] if 0 <= t.rule < len(weights) else 1.0
        if t.type is not None:
            logits = trace.logits.get(t.path)
            if logits is None:
                skipped += 1
                continue
            lv = logits.value
            others = np.delete(lv, [t.type, schema.root])
            if lv[t.type] - others.max() >= margin:
                continue
            unmet += 1
            terms.setdefault(t.rule, []).append(ad.softmax_ce(logits, t.type, w))
        else:
            props = trace.props.get(t.path)
            try:
                node = trace.tree.get(t.path)
            except IndexError:
                node = None
            if props is None or node is None or node.type != t.node_type:
                skipped += 1
                continue
            n = props.value.size
            target = (t.values - schema.lo[node.type, :n]) / schema.span[node.type, :n]
            mask = t.mask.astype(np.float64)
            err = ad.sq_error(props, target, mask)
            if float(err.value) == 0.0:
                continue
            max_err = max(max_err, float(np.max(np.abs((node.props - t.values) * mask))))
            terms.setdefault(t.rule, []).append(ad.scale(err, w) if w != 1.0 else err)
    per_rule = {}
    nodes = []
    for ri, ts in terms.items():
        s = ad.add_n(ts)
        per_rule[ri] = float(s.value)
        nodes.append(s)
    n_rules = len(kset.rules) if kset is not None else 0
    for ri in range(n_rules):
        per_rule.setdefault(ri, 0.0)
    return KnowledgeLoss(ad.add_n(nodes), per_rule, skipped, unmet, max_err)


def knowledge_report(tree_or_trace, kset, schema):
    """``L_Y`` of a decoded trace against targets computed from its own tree."""
    trace = tree_or_trace
    targets = apply_knowledge(trace.tree, kset, schema)
    return knowledge_loss(trace, targets, kset, schema)


# ---------------------------------------------------------------------------
# rule-set files
#
# {"format": "rules", "version": 1,
#  "rules": [{"rule": "max_children", "type": "Plate", "max": 2}, ...]}
# every entry names a constructor in a registry; an optional "weight" sets the
# rule weight and the remaining keys are the constructor's parameters.

RULE_SET_VERSION = 1


def save_rule_set(path, entries):
    doc = {"format": "rules", "version": RULE_SET_VERSION, "rules": [dict(e) for e in entries]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def rule_set_from_entries(entries, registry, context=None):
    rules, weights = [], []
    for e in entries:
        e = dict(e)
        name = e.pop("rule", None)
        if name not in registry:
            raise ValueError(f"unknown rule {name!r}; known: {sorted(registry)}")
        weight = float(e.pop("weight", 1.0))
        try:
            rules.append(registry[name](**e))
        except TypeError as exc:
            raise ValueError(f"rule {name!r}: {exc}") from None
        weights.append(weight)
    return KnowledgeSet(rules, weights, context)


def load_rule_set(path, registry, context=None):
    """Resolve a rule-set file against ``registry`` (name -> constructor)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "rules" or not isinstance(doc.get("rules"), list):
        raise ValueError(f"{path}: not a rule-set file")
    if doc.get("version") != RULE_SET_VERSION:
        raise ValueError(f"{path}: unsupported rule-set version {doc.get('version')!r}")
    return rule_set_from_entries(doc["rules"], registry, context)


# ---------------------------------------------------------------------------
# proximal projection

@dataclass
class ProxConfig:
    steps: int = 25
    step_size: float = 0.5
    rho: float = 1.0
    max_halvings: int = 5
    tol: float = 1e-12
    max_jumps: int = 3     # longer steps tried when backtracking fails


@dataclass
class ProxResult:
    z: np.ndarray
    initial: float
    final: float
    per_rule_initial: dict
    per_rule_final: dict
    steps: int
    objective: list
    skipped: int = 0
    aborted: bool = False


def _prox_eval(zv, z0, kset, model, rho):
    z = ad.Param("z", zv)
    trace = decode(z, model)
    targets = apply_knowledge(trace.tree, kset, model.schema)
    kl = knowledge_loss(trace, targets, kset, model.schema)
    prox_term = ad.scale(ad.sq_error(z, z0), 0.5 * rho)
    obj = ad.add(kl.total, prox_term)
    return z, obj, kl


def prox(z, kset, model, cfg=None):
    """Approximate ``argmin_z' L_Y(decode(z')) + rho/2 |z - z'|^2`` by gradient
    descent from ``z``.

    Targets are recomputed from the current decode at every step, so the
    objective jumps where the decoded structure changes. Each step backtracks
    (halving at most ``max_halvings`` times); if no shorter step helps, steps
    4x, 16x, ... longer are tried to cross a structural boundary. An accepted
    step is followed by one trial of twice its length, and the step length
    carries over to the next iteration. The projection stops when no step
    lowers the objective.
    """
    cfg = cfg or ProxConfig()
    z0 = np.array(z, dtype=np.float64)
    if kset is None or not kset.rules:
        return ProxResult(z0.copy(), 0.0, 0.0, {}, {}, 0, [])
    lam = cfg.step_size
    with model.store.frozen():
        zn, obj, kl = _prox_eval(z0.copy(), z0, kset, model, cfg.rho)
        first = kl
        history = [float(obj.value)]
        steps = 0
        aborted = False

        def attempt(length):
            cz, cobj, ckl = _prox_eval(zn.value - length * g, z0, kset, model, cfg.rho)
            ok = np.isfinite(cobj.value) and cobj.value < obj.value
            return (length, cz, cobj, ckl) if ok else None

        for _ in range(cfg.steps):
            if kl.value <= cfg.tol:
                break
            try:
                ad.backward(obj)
            except ad.GradientError:
                aborted = True
                break
            g = zn.grad
            if not np.all(np.isfinite(g)) or float(g @ g) == 0.0:
                aborted = not np.all(np.isfinite(g))
                break
            best = None
            length = lam
            for _ in range(cfg.max_halvings + 1):
                best = attempt(length)
                if best is not None:
                    break
                length *= 0.5
            length = lam
            for _ in range(cfg.max_jumps if best is None else 0):
                length *= 4.0
                best = attempt(length)
                if best is not None:
                    break
            if best is None:
                break
            longer = attempt(2.0 * best[0])
            if longer is not None and longer[2].value < best[2].value:
                best = longer
            lam, zn, obj, kl = best
            history.append(float(obj.value))
            steps += 1
    return ProxResult(zn.value.copy(), first.value, kl.value, first.per_rule, kl.per_rule,
                      steps, history, kl.skipped, aborted)


# ---------------------------------------------------------------------------
# structure-preserving polish

@dataclass
class PolishConfig:
    rho: float = 1e-3
    hold_margin: float = 1.0
    hold_weight: float = 1.0
    rounds: int = 8
    maxiter: int = 300
    gtol: float = 1e-10
    ftol: float = 1e-14
    tol: float = 1e-12


def _hold(logits, ctype, skip, margin, weight):
    """``weight * max(0, margin - gap)^2`` where ``gap`` is the lead of
    ``ctype``'s logit over the best other non-root type."""
    v = logits.value.copy()
    v[skip] = -np.inf
    others = v.copy()
    others[ctype] = -np.inf
    j = int(np.argmax(others))
    h = max(0.0, margin - (v[ctype] - v[j]))
    d = np.zeros_like(v)
    d[ctype], d[j] = -2.0 * weight * h, 2.0 * weight * h
    return ad.custom(np.array(weight * h * h), (logits,), lambda g: (g * d,), "hold")


def polish(z, kset, model, cfg=None):
    """Drive ``L_Y`` towards zero without letting the decoded topology drift.

    Each round decodes ``z`` freely, computes the targets of that decode and
    holds them fixed while L-BFGS minimizes their loss + rho/2 |z - z_r|^2
    under teacher forcing along the decoded topology (with fixed targets the
    objective and its gradient agree). Every child slot the rules do not
    retype carries a hinge that keeps its current type ahead by
    ``hold_margin``. Rounds repeat until the free decode meets its own
    targets or ``rounds`` is reached; the round with the lowest free-decode
    L_Y wins.
    """
    from scipy.optimize import minimize

    cfg = cfg or PolishConfig()
    z = np.array(z, dtype=np.float64)
    if kset is None or not kset.rules:
        return ProxResult(z.copy(), 0.0, 0.0, {}, {}, 0, [])
    schema = model.schema

    def objective(zv, struct, targets, typed, anchor):
        zn = ad.Param("z", zv)
        trace = decode(zn, model, mode="teacher", tree=struct)
        kl = knowledge_loss(trace, targets, kset, schema)
        hold = [_hold(lg, trace.tree.get(p).type, schema.root, cfg.hold_margin, cfg.hold_weight)
                for p, lg in trace.logits.items() if p not in typed]
        obj = ad.add_n([kl.total, ad.scale(ad.sq_error(zn, anchor), 0.5 * cfg.rho)] + hold)
        ad.backward(obj)
        g = zn.grad if zn.grad is not None else np.zeros_like(zv)
        return float(obj.value), g.copy()

    with model.store.frozen():
        first = knowledge_report(decode(z, model), kset, schema)
        best = (first.value, z.copy(), first)
        history = [first.value]
        steps = 0
        for _ in range(cfg.rounds):
            if best[0] <= cfg.tol:
                break
            struct = decode(z, model).tree
            targets = apply_knowledge(struct, kset, schema)
            typed = {t.path for t in targets if t.type is not None}
            res = minimize(objective, z, args=(struct, targets, typed, z.copy()), jac=True,
                           method="L-BFGS-B",
                           options={"maxiter": cfg.maxiter, "gtol": cfg.gtol, "ftol": cfg.ftol})
            steps += int(res.nit)
            if not np.all(np.isfinite(res.x)):
                break
            z = res.x
            kl = knowledge_report(decode(z, model), kset, schema)
            history.append(kl.value)
            if kl.value < best[0]:
                best = (kl.value, z.copy(), kl)
    _, zb, klb = best
    return ProxResult(zb, first.value, klb.value, first.per_rule, klb.per_rule, steps, history, klb.skipped)


__all__ = [
    "Target", "KnowledgeTargets", "Predicate", "Rule", "NodeRule", "EdgeRule",
    "KnowledgeSet", "KnowledgeLoss", "apply_knowledge", "knowledge_loss",
    "knowledge_report", "ProxConfig", "ProxResult", "prox", "PolishConfig", "polish", "members",
    "chain_slots", "TYPE_MARGIN", "save_rule_set", "load_rule_set", "rule_set_from_entries",
]
