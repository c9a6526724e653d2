"""Latent-space search with knowledge projection.

Stage two of the method: starting from a latent code, alternate task-loss
updates (gradient steps, SimBA coordinate trials or Bayesian optimization
proposals) with ``prox`` so that decoded scenes stay knowledge-compliant.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .knowledge import ProxConfig, knowledge_report, prox
from .seeding import stream
from .tvae import decode

TRAJECTORY_HEADER = ("iter", "task_loss", "knowledge_loss", "budget", "wall_ms")


class BudgetExhausted(RuntimeError):
    pass


class Differentiable:
    """``fn(z) -> (loss, grad)``."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, z):
        self.calls += 1
        loss, grad = self.fn(np.asarray(z, dtype=np.float64))
        return float(loss), np.asarray(grad, dtype=np.float64)

    @classmethod
    def from_graph(cls, build, freeze=None):
        """Wrap ``build(z_param) -> scalar graph node``; gradients via backward.

        ``freeze`` is a ParamStore whose parameters are held fixed.
        """
        def fn(z):
            zp = ad.Param("z", z.copy())
            if freeze is not None:
                with freeze.frozen():
                    out = build(zp)
                    ad.backward(out)
            else:
                out = build(zp)
                ad.backward(out)
            # a loss that does not reach z (e.g. an empty decoded scene) has zero gradient
            grad = np.zeros_like(z) if zp.grad is None else zp.grad.copy()
            return float(out.value), grad
        return cls(fn)


class BlackBox:
    """``fn(z) -> loss`` with an exact evaluation count and optional cap."""

    def __init__(self, fn, budget=None):
        self.fn = fn
        self.budget = budget
        self.calls = 0

    @property
    def remaining(self):
        return math.inf if self.budget is None else self.budget - self.calls

    def __call__(self, z):
        if self.budget is not None and self.calls >= self.budget:
            raise BudgetExhausted("evaluation budget exhausted")
        self.calls += 1
        return float(self.fn(np.asarray(z, dtype=np.float64)))


@dataclass
class Record:
    iter: int
    task_loss: float
    knowledge_loss: float
    budget: int
    wall_ms: float
    z: np.ndarray
    per_rule: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    best_z: np.ndarray | None = None
    best_loss: float = math.inf        # augmented L_a = L_t + L_Y
    best_task: float = math.inf
    best_iter: int = -1
    aborted: str | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def add(self, rec):
        if self.records and rec.budget < self.records[-1].budget:
            raise ValueError("budget spent must not decrease")
        self.records.append(rec)
        la = rec.task_loss + rec.knowledge_loss
        if la < self.best_loss:
            self.best_loss = la
            self.best_task = rec.task_loss
            self.best_z = rec.z.copy()
            self.best_iter = rec.iter

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def best_so_far(self, name="task_loss"):
        v = self.column(name)
        return np.minimum.accumulate(v) if v.size else v

    def augmented_best_so_far(self):
        v = self.column("task_loss") + self.column("knowledge_loss")
        return np.minimum.accumulate(v) if v.size else v

    def rule_curve(self, rule):
        return np.array([r.per_rule.get(rule, 0.0) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for r in self.records:
                w.writerow([r.iter, repr(r.task_loss), repr(r.knowledge_loss), r.budget,
                            f"{r.wall_ms:.3f}"])

    def write_manifest(self, path, **extra):
        doc = dict(self.meta)
        doc.update(extra)
        doc.update({"records": len(self.records), "best_iter": self.best_iter,
                    "best_augmented_loss": self.best_loss, "best_task_loss": self.best_task,
                    "aborted": self.aborted})
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TRAJECTORY_HEADER:
        raise ValueError("not a trajectory table")
    return [(int(r[0]), float(r[1]), float(r[2]), int(r[3]), float(r[4])) for r in rows[1:]]


def _knowledge(z, kset, model):
    if kset is None or not kset.rules or model is None:
        return 0.0, {}
    rep = knowledge_report(decode(z, model), kset, model.schema)
    return rep.value, rep.per_rule


def _project(z, kset, model, cfg):
    """``prox`` when rules are active, identity otherwise."""
    if kset is None or not kset.rules:
        return z, 0.0, {}
    res = prox(z, kset, model, cfg)
    return res.z, res.final, res.per_rule_final


# ---------------------------------------------------------------------------
# gradient branch

def optimize_gd(z0, obj, kset, model, budget, eta, prox_cfg=None, callback=None):
    """``budget`` iterations of ``z <- prox(z - eta * grad L_t(z))``.

    Record ``i`` holds the task and knowledge loss of the iterate before the
    ``i``-th update; the best iterate is chosen by ``L_t + L_Y``.
    """
    z = np.array(z0, dtype=np.float64)
    traj = Trajectory(meta={"optimizer": "gd", "budget": budget, "eta": eta})
    ly, per_rule = _knowledge(z, kset, model)
    t0 = time.perf_counter()
    for it in range(budget):
        lt, g = obj(z)
        if not math.isfinite(lt):
            traj.aborted = f"non-finite task loss at iteration {it}"
            break
        traj.add(Record(it, lt, ly, it + 1, 1e3 * (time.perf_counter() - t0), z.copy(), per_rule))
        if callback is not None:
            callback(traj.records[-1])
        if not np.all(np.isfinite(g)):
            traj.aborted = f"non-finite gradient at iteration {it}"
            break
        z = z - eta * g
        z, ly, per_rule = _project(z, kset, model, prox_cfg)
    return traj


# ---------------------------------------------------------------------------
# black-box branch

def optimize_simba(z0, obj, kset, model, budget, eps, seed=0, k_prox=5, prox_cfg=None,
                   callback=None):
    """SimBA in latent space.

    Coordinates are visited in a random permutation (a fresh one once all are
    used); for each, ``z + eps e_i`` and then ``z - eps e_i`` are evaluated and
    the first that lowers ``L_t`` is kept. Every ``k_prox`` accepted steps the
    code is projected. One record per objective evaluation.
    """
    rng = stream(seed, "simba")
    z = np.array(z0, dtype=np.float64)
    d = z.size
    traj = Trajectory(meta={"optimizer": "simba", "budget": budget, "eps": eps, "k_prox": k_prox})
    box = obj if isinstance(obj, BlackBox) else BlackBox(obj)
    start_calls = box.calls
    t0 = time.perf_counter()

    def spent():
        return box.calls - start_calls

    def evaluate(zc):
        lt = box(zc)
        ly, per_rule = _knowledge(zc, kset, model)
        rec = Record(spent() - 1, lt, ly, spent(), 1e3 * (time.perf_counter() - t0), zc.copy(), per_rule)
        traj.add(rec)
        if callback is not None:
            callback(rec)
        return lt

    if budget <= 0:
        return traj
    current = evaluate(z)
    accepted = 0
    order = []
    while spent() < budget:
        if not order:
            order = list(rng.permutation(d))
        i = order.pop()
        for sign in (1.0, -1.0):
            if spent() >= budget:
                return traj
            cand = z.copy()
            cand[i] += sign * eps
            lt = evaluate(cand)
            if lt < current:
                z, current = cand, lt
                accepted += 1
                if kset is not None and kset.rules and accepted % k_prox == 0:
                    z, _, _ = _project(z, kset, model, prox_cfg)
                    if spent() >= budget:
                        return traj
                    current = evaluate(z)
                break
    return traj


@dataclass
class BOConfig:
    init_samples: int = 5
    length_scale: float = 1.0
    kappa: float = 2.0
    bound: float = 3.0           # search box [-bound, bound]^d around the origin
    restarts: int = 8
    candidates: int = 256


class GaussianProcess:
    """Zero-mean GP with an RBF kernel on standardized targets."""

    def __init__(self, length_scale, noise=1e-8):
        self.ls = float(length_scale)
        self.noise = noise

    def kernel(self, a, b):
        d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
        return np.exp(-0.5 * np.maximum(d2, 0.0) / self.ls ** 2)

    def fit(self, x, y):
        from scipy.linalg import cho_factor, cho_solve
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mean = y.mean()
        self.scale = y.std() or 1.0
        self.y = (y - self.mean) / self.scale
        k = self.kernel(self.x, self.x)
        jitter = 1e-8
        while True:
            try:
                self.chol = cho_factor(k + jitter * np.eye(len(k)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
                if jitter > 1e-4:
                    raise
        self.jitter = jitter
        self.alpha = cho_solve(self.chol, self.y)
        self._solve = lambda b: cho_solve(self.chol, b)
        return self

    def predict(self, xq):
        xq = np.atleast_2d(xq)
        ks = self.kernel(xq, self.x)
        mu = ks @ self.alpha
        v = self._solve(ks.T)
        var = np.maximum(1.0 - np.sum(ks * v.T, 1), 1e-12)
        return self.mean + self.scale * mu, self.scale * np.sqrt(var)


def optimize_bo(z0, obj, kset, model, budget, bo=None, seed=0, prox_cfg=None, callback=None):
    """GP-LCB Bayesian optimization over latent codes.

    The first ``init_samples`` points are ``z0`` and uniform draws from the
    search box. Every proposal is prox-projected before it is evaluated, so
    each evaluated scene has been pulled towards the rules. The acquisition
    ``mu - kappa * sigma`` is minimized from the best of ``candidates``
    random points and the incumbents, refined with L-BFGS-B.
    """
    bo = bo or BOConfig()
    rng = stream(seed, "bo")
    z0 = np.array(z0, dtype=np.float64)
    d = z0.size
    lo, hi = -bo.bound * np.ones(d), bo.bound * np.ones(d)
    traj = Trajectory(meta={"optimizer": "bo", "budget": budget, "init_samples": bo.init_samples,
                            "length_scale": bo.length_scale, "kappa": bo.kappa})
    box = obj if isinstance(obj, BlackBox) else BlackBox(obj)
    start_calls = box.calls
    t0 = time.perf_counter()
    xs, ys = [], []

    def evaluate(zc):
        zc, _, _ = _project(zc, kset, model, prox_cfg)
        lt = box(zc)
        ly, per_rule = _knowledge(zc, kset, model)
        n = box.calls - start_calls
        rec = Record(n - 1, lt, ly, n, 1e3 * (time.perf_counter() - t0), zc.copy(), per_rule)
        traj.add(rec)
        if callback is not None:
            callback(rec)
        xs.append(zc)
        ys.append(lt)

    n_init = min(bo.init_samples, budget)
    for k in range(n_init):
        evaluate(z0.copy() if k == 0 else rng.uniform(lo, hi))
    gp = GaussianProcess(bo.length_scale)
    while box.calls - start_calls < budget:
        try:
            gp.fit(np.array(xs), np.array(ys))
        except np.linalg.LinAlgError:
            traj.aborted = "GP covariance not positive definite after jitter escalation"
            break

        def acq(x):
            m, s = gp.predict(x)
            return m - bo.kappa * s

        cands = rng.uniform(lo, hi, (bo.candidates, d))
        cands = np.vstack([cands, np.array(xs)[np.argsort(ys)[:2]]])
        vals = acq(cands)
        best_x, best_v = None, math.inf
        for j in np.argsort(vals)[:bo.restarts]:
            res = minimize(lambda x: float(acq(x)[0]), cands[j], method="L-BFGS-B",
                           bounds=list(zip(lo, hi)))
            v = float(res.fun) if np.isfinite(res.fun) else vals[j]
            x = res.x if np.isfinite(res.fun) else cands[j]
            if v < best_v:
                best_x, best_v = x, v
        evaluate(np.clip(best_x, lo, hi))
    return traj


__all__ = [
    "Differentiable", "BlackBox", "BudgetExhausted", "Record", "Trajectory",
    "optimize_gd", "optimize_simba", "optimize_bo", "BOConfig", "GaussianProcess",
    "read_trajectory_csv", "TRAJECTORY_HEADER",
]
