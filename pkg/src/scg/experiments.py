"""End-to-end runs shared by the CLI and the acceptance suite: scene
reconstruction by latent gradient descent, and latent scene attacks on the
LiDAR segmenters with their point-perturbation and transfer comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import synthetic as syn
from . import traffic as tr
from . import victim as vic
from .knowledge import PolishConfig, ProxConfig, polish
from .lidar import BeamPattern, LidarModel, make_background
from .optim import BlackBox, BOConfig, Differentiable, optimize_bo, optimize_gd, optimize_simba
from .seeding import stream
from .tvae import decode, encode_mean

# inner projection run after every outer step
LOOP_PROX = ProxConfig(steps=5, step_size=0.5, rho=1.0)
# optional post-search polish; off by default because on the synthetic task it
# raises the reconstruction loss more than it lowers L_Y
FINAL_POLISH = PolishConfig(rho=1e-2)


def final_scene(z, kset, model, cfg=None):
    """Decode ``z``, optionally after a structure-preserving polish (skipped
    without rules or with ``cfg=None``)."""
    if kset is not None and kset.rules and cfg is not None:
        z = polish(z, kset, model, cfg).z
    return z, decode(z, model).tree


# ---------------------------------------------------------------------------
# reconstruction (gradient branch)

def recon_objective(model, target, cfg=None):
    cfg = cfg or syn.RenderConfig()

    def build(z):
        trace = decode(z, model)
        return syn.recon_loss_node(trace, target, cfg, model.schema)

    return Differentiable.from_graph(build, freeze=model.store)


@dataclass
class ReconRun:
    seed: int
    rules: bool
    trajectory: object
    z: np.ndarray
    tree: object
    final_loss: float
    audit: dict = field(default_factory=dict)


def random_latent(model, seed, name="z0"):
    return stream(seed, name).standard_normal(model.latent_dim)


def run_reconstruction(model, target, kset=None, seed=0, budget=500, eta=0.01, prox_cfg=None,
                       render_cfg=None, gamma=syn.DEFAULT_GAMMA, z0=None, polish_cfg=None):
    """Latent gradient descent on ``||S - R(decode(z))||`` from ``z0 ~ N(0, I)``."""
    render_cfg = render_cfg or syn.RenderConfig()
    z0 = random_latent(model, seed) if z0 is None else np.asarray(z0, dtype=np.float64)
    obj = recon_objective(model, target, render_cfg)
    traj = optimize_gd(z0, obj, kset, model, budget, eta, prox_cfg or LOOP_PROX)
    traj.meta.update({"seed": seed, "rules": kset.names if kset else []})
    z, tree = final_scene(traj.best_z, kset, model, polish_cfg)
    loss = syn.recon_loss(tree, target, render_cfg, model.schema)
    return ReconRun(seed, bool(kset), traj, z, tree, loss, syn.audit(tree, gamma, model.schema))


# ---------------------------------------------------------------------------
# LiDAR attack

DEFAULT_SENSOR = (-8.0, -8.0, 1.8)


@dataclass
class AttackWorld:
    layout: object
    pattern: BeamPattern
    background: object
    lidar: LidarModel

    @classmethod
    def build(cls, layout=None, seed=0, pattern=None, buildings=8):
        layout = layout or tr.intersection_layout()
        pattern = pattern or BeamPattern(origin=DEFAULT_SENSOR)
        bg = make_background(pattern, layout, seed, buildings)
        return cls(layout, pattern, bg, LidarModel(pattern, bg))

    def cloud(self, tree):
        return self.lidar(tr.instantiate(tree, self.layout))


def iou_objective(model, world, victim):
    """Black-box ``z -> vehicle IoU`` of the decoded scene's cloud."""

    def fn(z):
        return vic.vehicle_iou(world.cloud(decode(z, model).tree), victim)

    return fn


@dataclass
class AttackRun:
    victim: str
    seed: int
    method: str
    trajectory: object
    z: np.ndarray
    tree: object
    cloud: object
    baseline_iou: float
    final_iou: float
    audit: dict = field(default_factory=dict)
    start_cloud: object = None

    def best_curve(self):
        return self.trajectory.best_so_far("task_loss")


def attack_start(model, world, seed, dataset=None):
    """Starting code: the posterior mean of a generated scene."""
    rng = stream(seed, "attack-start")
    tree = tr.random_traffic_scene(world.layout, rng)[0] if dataset is None else \
        dataset[int(rng.integers(len(dataset)))]
    return encode_mean(tree, model)[0]


def scene_attack(model, world, victim, kset, seed=0, budget=100, method="simba", eps=0.5,
                 z0=None, bo=None, prox_cfg=None, polish_cfg=None):
    """Black-box search for a latent code whose decoded scene lowers the
    victim's vehicle IoU. The baseline is the IoU of the starting scene and
    is not charged to the budget. The final scene decodes the iterate with
    the lowest augmented loss; no polish by default, since a polish moves
    the scene away from what the search found."""
    z0 = attack_start(model, world, seed) if z0 is None else np.asarray(z0, dtype=np.float64)
    start_cloud = world.cloud(decode(z0, model).tree)
    baseline = vic.vehicle_iou(start_cloud, victim)
    box = BlackBox(iou_objective(model, world, victim), budget)
    if method == "simba":
        traj = optimize_simba(z0, box, kset, model, budget, eps, seed=seed, prox_cfg=prox_cfg)
    elif method == "bo":
        traj = optimize_bo(z0, box, kset, model, budget, bo or BOConfig(), seed=seed, prox_cfg=prox_cfg)
    else:
        raise ValueError(f"unknown black-box method {method!r}")
    traj.meta.update({"seed": seed, "victim": victim.name, "evaluations": box.calls})
    z, tree = final_scene(traj.best_z if traj.best_z is not None else z0, kset, model, polish_cfg)
    cloud = world.cloud(tree)
    final = vic.vehicle_iou(cloud, victim)
    return AttackRun(victim.name, seed, method, traj, z, tree, cloud, baseline, final,
                     tr.audit(tree, world.layout, schema=model.schema), start_cloud)


def transfer_table(clouds, victims):
    """``table[source][target]``: mean target-victim IoU over the clouds
    produced by attacking ``source``."""
    names = list(victims)
    table = {}
    for s in names:
        table[s] = {}
        for t in names:
            vals = [vic.vehicle_iou(c, victims[t]) for c in clouds[s]]
            table[s][t] = float(np.mean(vals)) if vals else float("nan")
    return table


__all__ = [
    "LOOP_PROX", "FINAL_POLISH", "final_scene", "recon_objective", "ReconRun", "random_latent",
    "run_reconstruction", "AttackWorld", "iou_objective", "AttackRun", "attack_start",
    "scene_attack", "transfer_table", "DEFAULT_SENSOR",
]
