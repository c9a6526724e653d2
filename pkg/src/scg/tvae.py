"""Tree-structured VAE over schema-typed scene trees.

Every node type ``m`` owns an encoder ``E_m`` (children features and children
property vectors -> node feature) and a decoder ``D_m`` (node feature ->
children features and the node's own property vector). A shared classifier
maps a feature to child-type logits and a sampler maps the root feature to
the posterior ``(z_mu, z_sigma)``. All networks are two-layer tanh
perceptrons built on :mod:`scg.autodiff`.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .seeding import stream
from .tree import SceneNode, SchemaError, validate

log = logging.getLogger(__name__)


LOGSIGMA_INIT = -3.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    latent_dim: int = 32
    feature_dim: int = 64
    hidden_dim: int = 64
    residual_enc: bool = False
    residual_dec: bool = True


class TreeVAE:
    """Parameters and network wiring; the functions below do the work."""

    def __init__(self, schema, config=None, seed=0):
        # private copy: the fitted class prior lives on the schema and must
        # not leak between models
        self.schema = copy.copy(schema)
        self.schema.prior = None
        self.config = config or ModelConfig()
        self.store = ad.ParamStore()
        self.class_weights = np.ones(schema.n_types)
        self._init_params(stream(seed, "init"))

    # -- parameters -------------------------------------------------------
    def _dense(self, name, n_out, n_in, rng):
        self.store.add(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(max(n_in, 1)), (n_out, n_in)))
        self.store.add(f"{name}.b", np.zeros(n_out))

    def _init_params(self, rng):
        s, c = self.schema, self.config
        F, H, P, Z = c.feature_dim, c.hidden_dim, s.prop_dim, c.latent_dim
        for t in s.types:
            if t.arity == 0:
                self.store.add(f"enc.{t.name}.leaf", rng.normal(0.0, 0.5, F))
            else:
                self._dense(f"enc.{t.name}.1", H, t.arity * (F + P), rng)
                self._dense(f"enc.{t.name}.2", F, H, rng)
            if t.arity or t.n_props:
                self._dense(f"dec.{t.name}.1", H, F, rng)
                if t.arity:
                    self._dense(f"dec.{t.name}.children", t.arity * F, H, rng)
                if t.n_props:
                    self._dense(f"dec.{t.name}.props", t.n_props, H, rng)
        self._dense("cls.1", H, F, rng)
        self._dense("cls.2", s.n_types, H, rng)
        self._dense("sampler.1", H, F, rng)
        self._dense("sampler.mu", Z, H, rng)
        self._dense("sampler.logsigma", Z, H, rng)
        # start near-deterministic; unit posterior noise at init drowns the
        # structural signal before the encoder has learned anything
        self.store["sampler.logsigma.b"].value[:] = LOGSIGMA_INIT
        self._dense("root", F, Z, rng)

    def p(self, name):
        return self.store[name]

    def arrays(self):
        return self.store.snapshot()

    def set_class_prior(self, prior):
        self.schema.prior = np.asarray(prior, dtype=np.float64)
        self.class_weights = class_weights(prior)

    @property
    def latent_dim(self):
        return self.config.latent_dim


def class_prior(dataset, schema):
    """Add-one smoothed empirical node-type frequencies."""
    if not dataset:
        raise ValueError("class_prior needs a nonempty dataset")
    counts = np.ones(schema.n_types)
    for tree in dataset:
        for _, n in tree.walk():
            counts[n.type] += 1
    return counts / counts.sum()


def class_weights(prior):
    """CE weights ``1/p(c)`` rescaled to mean one."""
    w = 1.0 / np.asarray(prior, dtype=np.float64)
    return w / w.mean()


# ---------------------------------------------------------------------------
# encoder

def _child_props(model, node):
    s = model.schema
    return [s.normalize(c.type, c.props) for c in node.children]


def encode(tree, model, check=True):
    """Posterior parameters ``(z_mu, z_sigma)`` as graph nodes."""
    s = model.schema
    if check:
        validate(tree, s)
    f_root = _encode_node(tree, model)
    p = model.p
    h = ad.dense_tanh(p("sampler.1.w"), f_root, p("sampler.1.b"))
    mu = ad.linear(p("sampler.mu.w"), h, p("sampler.mu.b"))
    logsigma = ad.linear(p("sampler.logsigma.w"), h, p("sampler.logsigma.b"))
    return mu, logsigma


def _encode_node(node, model):
    s, p = model.schema, model.p
    t = s.types[node.type]
    if t.arity == 0:
        return ad.tanh(p(f"enc.{t.name}.leaf"))
    feats = [_encode_node(c, model) for c in node.children]
    props = ad.const(np.concatenate(_child_props(model, node)))
    x = ad.concat(feats + [props])
    h = ad.dense_tanh(p(f"enc.{t.name}.1.w"), x, p(f"enc.{t.name}.1.b"))
    f = ad.dense_tanh(p(f"enc.{t.name}.2.w"), h, p(f"enc.{t.name}.2.b"))
    if model.config.residual_enc:
        f = ad.add(f, ad.scale(ad.add_n(feats), 1.0 / len(feats)))
    return f


def encode_mean(tree, model):
    mu, logsigma = encode(tree, model)
    return mu.value.copy(), np.exp(logsigma.value)


# ---------------------------------------------------------------------------
# decoder

@dataclass
class DecodeTrace:
    tree: SceneNode
    logits: dict = field(default_factory=dict)      # path -> Node (n_types)
    props: dict = field(default_factory=dict)       # path -> Node (normalized, n_props)
    order: list = field(default_factory=list)
    truncated: bool = False
    root_feature: object = None

    def physical(self, path, schema):
        """Differentiable physical-unit property vector of the node at ``path``."""
        node = self.tree.get(path)
        n = schema.types[node.type].n_props
        return ad.affine_const(self.props[path], schema.span[node.type, :n], schema.lo[node.type, :n])


def _squash(u, squash_mask):
    """Sigmoid on the masked entries, identity elsewhere."""
    y = u.value.copy()
    sig = 0.5 * (1.0 + np.tanh(0.5 * y[squash_mask]))
    y[squash_mask] = sig
    d = np.ones_like(y)
    d[squash_mask] = sig * (1.0 - sig)
    return ad.custom(y, (u,), lambda g: (g * d,), "squash")


def _classify(model, f):
    p = model.p
    h = ad.dense_tanh(p("cls.1.w"), f, p("cls.1.b"))
    return ad.linear(p("cls.2.w"), h, p("cls.2.b"))


def _expand(model, type_id, f):
    """Run ``D_m``: returns (children features, normalized props or None)."""
    s, p = model.schema, model.p
    t = s.types[type_id]
    if t.arity == 0 and t.n_props == 0:
        return [], None
    h = ad.dense_tanh(p(f"dec.{t.name}.1.w"), f, p(f"dec.{t.name}.1.b"))
    children = []
    if t.arity:
        block = ad.dense_tanh(p(f"dec.{t.name}.children.w"), h, p(f"dec.{t.name}.children.b"))
        F = model.config.feature_dim
        children = [block] if t.arity == 1 else [ad.slice_(block, i * F, (i + 1) * F) for i in range(t.arity)]
        if model.config.residual_dec:
            children = [ad.add(c, f) for c in children]
    props = None
    if t.n_props:
        raw = ad.linear(p(f"dec.{t.name}.props.w"), h, p(f"dec.{t.name}.props.b"))
        sq = s.squash[type_id, :t.n_props]
        props = _squash(raw, sq) if sq.any() else raw
    return children, props


def decode(z, model, mode="free", tree=None, max_depth=None):
    """Decode latent ``z`` (array or graph node).

    ``mode="teacher"`` expands along ``tree``'s ground-truth types;
    ``mode="free"`` picks ``argmax`` child types and stops at arity-0 types or
    ``max_depth`` (truncation forces Stop children and sets ``trace.truncated``).
    """
    s = model.schema
    if not isinstance(z, ad.Node):
        z = ad.const(z)
    if z.value.shape != (model.latent_dim,):
        raise ValueError(f"latent code must have shape ({model.latent_dim},)")
    max_depth = max_depth or s.max_depth
    p = model.p
    f_root = ad.dense_tanh(p("root.w"), z, p("root.b"))
    if not np.all(np.isfinite(f_root.value)):
        raise FloatingPointError("non-finite activation in decoder")
    teacher = mode == "teacher"
    if teacher and tree is None:
        raise ValueError("teacher forcing needs the ground-truth tree")
    root = SceneNode(s.root)
    trace = DecodeTrace(root, root_feature=f_root)
    allowed = np.ones(s.n_types, dtype=bool)
    allowed[s.root] = False
    budget = [s.max_nodes - 1]

    def visit(node, f, path, gt):
        trace.order.append(path)
        children, props = _expand(model, node.type, f)
        t = s.types[node.type]
        if props is not None:
            trace.props[path] = props
            u = props.value
            phys = s.lo[node.type, :t.n_props] + u * s.span[node.type, :t.n_props]
            for j, slot in enumerate(t.slots):
                if slot.kind == "binary" and not teacher:
                    phys[j] = 1.0 if u[j] >= 0.5 else 0.0
            node.props = phys
        for i, cf in enumerate(children):
            cpath = path + (i,)
            logits = _classify(model, cf)
            trace.logits[cpath] = logits
            if teacher:
                ctype = gt.children[i].type
            elif len(path) + 3 > max_depth or budget[0] <= 0:
                ctype = s.stop
                if s.types[int(np.argmax(np.where(allowed, logits.value, -np.inf)))].arity:
                    trace.truncated = True
            else:
                ctype = int(np.argmax(np.where(allowed, logits.value, -np.inf)))
            budget[0] -= 1
            child = SceneNode(ctype, np.zeros(s.types[ctype].n_props))
            node.children.append(child)
            visit(child, cf, cpath, gt.children[i] if teacher else None)

    visit(root, f_root, (), tree)
    return trace


# ---------------------------------------------------------------------------
# losses

def kl_divergence(mu, logsigma):
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` as a graph node."""
    sigma2 = ad.exp(ad.scale(logsigma, 2.0))
    terms = ad.add_n([ad.sum_(ad.square(mu)), ad.sum_(sigma2), ad.scale(ad.sum_(logsigma), -2.0)])
    return ad.scale(ad.add(terms, ad.const(-float(mu.value.size))), 0.5)


def structure_losses(trace, tree, model):
    """``(L_C, L_R)`` of a teacher-forced trace against its ground truth."""
    s = model.schema
    w = model.class_weights
    ce = []
    for path, logits in trace.logits.items():
        c = tree.get(path).type
        ce.append(ad.softmax_ce(logits, c, w[c]))
    l_c = ad.scale(ad.add_n(ce), 1.0 / max(len(ce), 1))
    by_type = {}
    for path, props in trace.props.items():
        node = tree.get(path)
        target = s.normalize(node.type, node.props)[:node.props.size]
        by_type.setdefault(node.type, []).append(ad.sq_error(props, target))
    l_r = ad.add_n([ad.scale(ad.add_n(errs), 1.0 / len(errs)) for errs in by_type.values()])
    return l_c, l_r


@dataclass
class ElboTerms:
    total: object
    l_c: object
    l_r: object
    kl: object
    trace: DecodeTrace
    z: object

    def values(self):
        return tuple(float(x.value) for x in (self.total, self.l_c, self.l_r, self.kl))


def elbo_loss(tree, model, beta=1.0, rng=None, eps=None):
    """Negative ELBO ``L_C + L_R + beta * KL`` with one reparameterized draw.

    ``eps`` fixes the noise; otherwise it is drawn from ``rng`` (or zero when
    both are None, i.e. the posterior mean is decoded).
    """
    if tree is None or tree.size() == 0:
        raise ValueError("empty tree")
    if model.schema.prior is None:
        raise ValueError("class prior p(c) has not been set")
    mu, logsigma = encode(tree, model)
    if eps is None:
        eps = rng.standard_normal(mu.value.shape) if rng is not None else np.zeros(mu.value.shape)
    z = ad.add(mu, ad.mul(ad.exp(logsigma), ad.const(eps)))
    trace = decode(z, model, mode="teacher", tree=tree)
    l_c, l_r = structure_losses(trace, tree, model)
    kl = kl_divergence(mu, logsigma)
    total = ad.add_n([l_c, l_r, ad.scale(kl, beta)])
    return ElboTerms(total, l_c, l_r, kl, trace, z)


def _squash_rows(u, squash_mask):
    y = u.value.copy()
    sig = 0.5 * (1.0 + np.tanh(0.5 * y[:, squash_mask]))
    y[:, squash_mask] = sig
    d = np.ones_like(y)
    d[:, squash_mask] = sig * (1.0 - sig)
    return ad.custom(y, (u,), lambda g: (g * d,), "squash_rows")


@dataclass
class BatchTerms:
    total: object
    l_c: float
    l_r: float
    kl: float
    hits: np.ndarray      # per tree: matched child slots
    slots: np.ndarray     # per tree: child slots


def batch_elbo(trees, model, beta=1.0, eps=None):
    """Mean negative ELBO over ``trees``, evaluated level by level.

    Nodes of the same type at the same height (encoder) or depth (decoder)
    are pushed through their networks as one matrix. The value and gradient
    equal the average of :func:`elbo_loss` over the trees with the same noise.
    """
    s, p = model.schema, model.p
    F = model.config.feature_dim
    B = len(trees)
    if eps is None:
        eps = np.zeros((B, model.latent_dim))
    nodes = []          # (tree idx, path, node, depth, height)
    info = {}
    for b, tree in enumerate(trees):
        heights = {}
        walked = list(tree.walk())
        for path, node in reversed(walked):
            heights[path] = 1 + max((heights[path + (i,)] for i in range(len(node.children))), default=-1)
        for path, node in walked:
            info[(b, path)] = len(nodes)
            nodes.append((b, path, node, len(path), heights[path]))

    # encoder, bottom-up
    feat = {}           # node idx -> (graph node, row)
    leaf_cache = {}
    by_height = {}
    for k, (b, path, node, d, h) in enumerate(nodes):
        by_height.setdefault(h, {}).setdefault(node.type, []).append(k)
    for h in sorted(by_height):
        for tid, ks in sorted(by_height[h].items()):
            t = s.types[tid]
            if t.arity == 0:
                if tid not in leaf_cache:
                    leaf_cache[tid] = ad.tanh(p(f"enc.{t.name}.leaf"))
                for k in ks:
                    feat[k] = (leaf_cache[tid], 0)
                continue
            blocks, props = [], []
            for i in range(t.arity):
                blocks.append(_gather([feat[info[(nodes[k][0], nodes[k][1] + (i,))]] for k in ks]))
                props.append(np.array([s.normalize(c.type, c.props) for c in
                                       (nodes[k][2].children[i] for k in ks)]))
            x = ad.hcat(blocks + [ad.const(np.concatenate(props, axis=1))])
            hid = ad.dense_rows(x, p(f"enc.{t.name}.1.w"), p(f"enc.{t.name}.1.b"), "tanh")
            out = ad.dense_rows(hid, p(f"enc.{t.name}.2.w"), p(f"enc.{t.name}.2.b"), "tanh")
            if model.config.residual_enc:
                out = ad.add(out, ad.scale(ad.add_n(blocks), 1.0 / len(blocks)))
            for r, k in enumerate(ks):
                feat[k] = (out, r)

    roots = _gather([feat[info[(b, ())]] for b in range(B)])
    hid = ad.dense_rows(roots, p("sampler.1.w"), p("sampler.1.b"), "tanh")
    mu = ad.dense_rows(hid, p("sampler.mu.w"), p("sampler.mu.b"))
    logsigma = ad.dense_rows(hid, p("sampler.logsigma.w"), p("sampler.logsigma.b"))
    z = ad.add(mu, ad.mul(ad.exp(logsigma), ad.const(eps)))
    kl = kl_divergence(mu, logsigma)
    kl_total = ad.scale(kl, 1.0 / B)

    # decoder, top-down
    dfeat = {}
    froot = ad.dense_rows(z, p("root.w"), p("root.b"), "tanh")
    for b in range(B):
        dfeat[info[(b, ())]] = (froot, b)
    by_depth = {}
    for k, (b, path, node, d, h) in enumerate(nodes):
        by_depth.setdefault(d, {}).setdefault(node.type, []).append(k)
    type_counts = [dict() for _ in range(B)]
    for b, path, node, d, h in nodes:
        type_counts[b][node.type] = type_counts[b].get(node.type, 0) + 1
    lr_terms = []
    for d in sorted(by_depth):
        for tid, ks in sorted(by_depth[d].items()):
            t = s.types[tid]
            if t.arity == 0 and t.n_props == 0:
                continue
            fin = _gather([dfeat[k] for k in ks])
            hid = ad.dense_rows(fin, p(f"dec.{t.name}.1.w"), p(f"dec.{t.name}.1.b"), "tanh")
            if t.arity:
                block = ad.dense_rows(hid, p(f"dec.{t.name}.children.w"), p(f"dec.{t.name}.children.b"), "tanh")
                for i in range(t.arity):
                    part = block if t.arity == 1 else ad.col_slice(block, i * F, (i + 1) * F)
                    if model.config.residual_dec:
                        part = ad.add(part, fin)
                    for r, k in enumerate(ks):
                        b, path = nodes[k][0], nodes[k][1]
                        dfeat[info[(b, path + (i,))]] = (part, r)
            if t.n_props:
                raw = ad.dense_rows(hid, p(f"dec.{t.name}.props.w"), p(f"dec.{t.name}.props.b"))
                sq = s.squash[tid, :t.n_props]
                pred = _squash_rows(raw, sq) if sq.any() else raw
                target = np.array([s.normalize(tid, nodes[k][2].props)[:t.n_props] for k in ks])
                w = np.array([1.0 / (type_counts[nodes[k][0]][tid] * B) for k in ks])
                lr_terms.append(ad.sq_error_rows(pred, target, w))

    child_ks = [k for k, (b, path, node, d, h) in enumerate(nodes) if path]
    slots = np.zeros(B)
    for k in child_ks:
        slots[nodes[k][0]] += 1
    cf = _gather([dfeat[k] for k in child_ks])
    hid = ad.dense_rows(cf, p("cls.1.w"), p("cls.1.b"), "tanh")
    logits = ad.dense_rows(hid, p("cls.2.w"), p("cls.2.b"))
    truth = np.array([nodes[k][2].type for k in child_ks])
    owner = np.array([nodes[k][0] for k in child_ks])
    w = model.class_weights[truth] / (slots[owner] * B)
    l_c = ad.softmax_ce_rows(logits, truth, w)
    l_r = ad.add_n(lr_terms)
    total = ad.add_n([l_c, l_r, ad.scale(kl_total, beta)])
    masked = logits.value.copy()
    masked[:, s.root] = -np.inf
    hit = masked.argmax(axis=1) == truth
    hits = np.bincount(owner, weights=hit, minlength=B)
    return BatchTerms(total, float(l_c.value), float(l_r.value), float(kl_total.value), hits, slots)


def _gather(refs):
    """Stack ``(graph node, row)`` references into one matrix node."""
    groups = {}
    for pos, (src, row) in enumerate(refs):
        groups.setdefault(id(src), (src, [], []))
        groups[id(src)][1].append(row)
        groups[id(src)][2].append(pos)
    if len(groups) == 1:
        src, rows, _ = next(iter(groups.values()))
        if src.value.ndim == 2 and rows == list(range(src.value.shape[0])):
            return src
        return ad.take_rows([(src, rows)])
    stacked = ad.take_rows([(g[0], g[1]) for g in groups.values()])
    order = np.concatenate([np.asarray(g[2]) for g in groups.values()])
    if np.array_equal(order, np.arange(order.size)):
        return stacked
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return ad.take_rows([(stacked, inv)])


def teacher_accuracy(trace, tree, model):
    """Fraction of child slots whose argmax type matches the ground truth."""
    s = model.schema
    allowed = np.ones(s.n_types, dtype=bool)
    allowed[s.root] = False
    hits = [int(np.argmax(np.where(allowed, lg.value, -np.inf))) == tree.get(p).type
            for p, lg in trace.logits.items()]
    return float(np.mean(hits)) if hits else 1.0


def type_accuracy(decoded, truth):
    """Per-node type accuracy of ``decoded`` against ``truth``.

    Nodes are matched by path; a truth node with no counterpart counts as a
    miss, and so does a surplus decoded node.
    """
    tn = dict(truth.walk())
    dn = dict(decoded.walk())
    paths = set(tn) | set(dn)
    hits = sum(1 for p in paths if p in tn and p in dn and tn[p].type == dn[p].type)
    return hits / len(paths)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 2e-3
    lr_final: float | None = 1e-4   # cosine annealing target; None keeps lr fixed
    batch_size: int = 32
    beta_max: float = 1e-3
    warmup_frac: float = 0.2
    clip: float = 5.0
    seed: int = 0


def beta_schedule(epoch, cfg):
    """Linear KL warm-up from 0 to ``beta_max`` over the first ``warmup_frac``
    of the epochs."""
    ramp = cfg.warmup_frac * cfg.epochs
    if ramp <= 0:
        return cfg.beta_max
    return cfg.beta_max * min(1.0, epoch / ramp)


def lr_schedule(epoch, cfg):
    """Cosine decay from ``lr`` to ``lr_final`` over ``epochs``."""
    if cfg.lr_final is None or cfg.epochs <= 1:
        return cfg.lr
    frac = min(1.0, epoch / (cfg.epochs - 1))
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


class Trainer:
    """Adam over the ELBO with resumable state."""

    def __init__(self, model, cfg, optimizer=None, epoch=0):
        self.model = model
        self.cfg = cfg
        self.opt = optimizer or ad.Adam(model.store, lr=cfg.lr)
        self.epoch = epoch
        self.log = []

    def run(self, dataset, epochs=None, callback=None):
        cfg, model = self.cfg, self.model
        if model.schema.prior is None:
            model.set_class_prior(class_prior(dataset, model.schema))
        for tree in dataset:
            validate(tree, model.schema)
        target = self.epoch + (cfg.epochs if epochs is None else epochs)
        order_rng = stream(cfg.seed, "shuffle")
        # fast-forward the streams so a resumed run continues them
        for _ in range(self.epoch):
            order_rng.permutation(len(dataset))
        while self.epoch < target:
            t0 = time.perf_counter()
            beta = beta_schedule(self.epoch, cfg)
            self.opt.lr = lr_schedule(self.epoch, cfg)
            perm = order_rng.permutation(len(dataset))
            noise = stream(cfg.seed, "reparam", self.epoch)
            sums = np.zeros(5)
            for start in range(0, len(perm), cfg.batch_size):
                batch = [dataset[i] for i in perm[start:start + cfg.batch_size]]
                eps = noise.standard_normal((len(batch), model.latent_dim))
                model.store.zero_grad()
                terms = batch_elbo(batch, model, beta, eps)
                vals = (float(terms.total.value), terms.l_c, terms.l_r, terms.kl)
                if not all(np.isfinite(vals)):
                    raise TrainingDiverged(f"non-finite loss at epoch {self.epoch}")
                try:
                    ad.backward(terms.total)
                    self.opt.step(clip=cfg.clip)
                except ad.GradientError as exc:
                    raise TrainingDiverged(f"epoch {self.epoch}: {exc}") from exc
                sums[:4] += np.asarray(vals) * len(batch)
                sums[4] += float(np.sum(terms.hits / terms.slots))
            means = sums / len(dataset)
            row = {"epoch": self.epoch, "total": means[0], "l_c": means[1], "l_r": means[2],
                   "kl": means[3], "beta": beta, "lr": self.opt.lr, "tf_accuracy": means[4],
                   "seconds": time.perf_counter() - t0}
            self.log.append(row)
            log.info("epoch %d total=%.4f L_C=%.4f L_R=%.4f KL=%.3f acc=%.3f",
                     self.epoch, *means)
            self.epoch += 1
            if callback is not None:
                callback(row)
        return self.log


def train(dataset, model, cfg=None, callback=None):
    """Fit ``model`` in place; returns the per-epoch loss log."""
    cfg = cfg or TrainConfig()
    return Trainer(model, cfg).run(dataset, callback=callback)


# ---------------------------------------------------------------------------
# generation

def sample_prior(model, n, seed):
    """``n`` free-running decodes of ``z ~ N(0, I)``."""
    rng = stream(seed, "prior")
    out = []
    for _ in range(n):
        z = rng.standard_normal(model.latent_dim)
        out.append(decode(z, model).tree)
    return out


def reconstruct(tree, model):
    """Free-running decode of the posterior mean of ``tree``."""
    mu, _ = encode_mean(tree, model)
    return decode(mu, model).tree


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, model, trainer=None, meta=None):
    """Parameters, class prior, config and (optionally) optimizer state."""
    arrays = dict(model.arrays())
    if model.schema.prior is not None:
        arrays["class_prior"] = np.asarray(model.schema.prior)
    info = dict(meta or {})
    info["config"] = {
        "latent_dim": model.config.latent_dim, "feature_dim": model.config.feature_dim,
        "hidden_dim": model.config.hidden_dim, "residual_enc": model.config.residual_enc,
        "residual_dec": model.config.residual_dec,
    }
    if trainer is not None:
        info["epoch"] = trainer.epoch
        info["adam_t"] = trainer.opt.t
        info["train"] = {k: getattr(trainer.cfg, k) for k in trainer.cfg.__dataclass_fields__}
        for n in trainer.opt.m:
            arrays[f"adam.m.{n}"] = trainer.opt.m[n]
            arrays[f"adam.v.{n}"] = trainer.opt.v[n]
    ad.save_checkpoint(path, arrays, model.schema.name, model.config.latent_dim,
                       model.config.feature_dim, info)


def load_model(path, schema):
    """``(model, header)``; raises ``SchemaError`` on a schema mismatch."""
    header, arrays = ad.load_checkpoint(path)
    if header["schema"] != schema.name:
        raise SchemaError(f"checkpoint schema {header['schema']!r} does not match {schema.name!r}")
    cfg = ModelConfig(**header["meta"]["config"])
    model = TreeVAE(schema, cfg)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.") and k != "class_prior"}
    model.store.load(params)
    if "class_prior" in arrays:
        model.set_class_prior(arrays["class_prior"])
    return model, header


def restore_trainer(path, model, cfg):
    """A :class:`Trainer` that continues the run saved in ``path``."""
    header, arrays = ad.load_checkpoint(path)
    meta = header["meta"]
    tr = Trainer(model, cfg, epoch=int(meta.get("epoch", 0)))
    tr.opt.t = int(meta.get("adam_t", 0))
    for n in tr.opt.m:
        if f"adam.m.{n}" in arrays:
            tr.opt.m[n] = arrays[f"adam.m.{n}"]
            tr.opt.v[n] = arrays[f"adam.v.{n}"]
    return tr


__all__ = [
    "save_model", "load_model", "restore_trainer", "LOGSIGMA_INIT",
    "ModelConfig", "TreeVAE", "TrainConfig", "Trainer", "TrainingDiverged",
    "DecodeTrace", "ElboTerms", "class_prior", "class_weights", "encode",
    "encode_mean", "decode", "elbo_loss", "kl_divergence", "structure_losses",
    "teacher_accuracy", "type_accuracy", "train", "beta_schedule", "lr_schedule",
    "sample_prior", "reconstruct", "SchemaError",
]
