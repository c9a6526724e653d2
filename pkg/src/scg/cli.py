"""Command line entry point: ``scg <command> [--config FILE] [--key value ...]``.

Commands: synth-data, train, reconstruct, attack, report. Every run writes
into its own directory::

    <out>/manifest.json     resolved config, outputs and result summary
    <out>/logs/run.log
    <out>/artifacts/...

Exit codes: 0 success, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import experiments as ex
from . import knowledge as kn
from . import lidar
from . import plotting
from . import synthetic as syn
from . import traffic as tr
from . import tvae
from . import victim as vic
from .tree import SchemaError, load_tree, save_tree

log = logging.getLogger("scg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SCHEMAS = {syn.SCHEMA.name: syn.SCHEMA, tr.SCHEMA.name: tr.SCHEMA}
TASK_SCHEMA = {"synthetic": syn.SCHEMA.name, "traffic": tr.SCHEMA.name}

REQUIRED = object()

DEFAULTS = {
    "synth-data": {
        "task": "synthetic", "n": 1000, "seed": 0, "target": True, "layout": "intersection",
        "out": "runs/synth-data",
    },
    "train": {
        "data": REQUIRED, "schema": None, "epochs": 300, "lr": 2e-3, "lr_final": 1e-4, "batch_size": 32,
        "beta_max": 1e-3, "warmup_frac": 0.2, "clip": 5.0, "seed": 0, "latent_dim": 32,
        "feature_dim": 64, "resume": None, "out": "runs/train",
    },
    "reconstruct": {
        "checkpoint": REQUIRED, "target": None, "rules": "synthetic", "seed": 0, "budget": 500,
        "eta": 0.01, "gamma": syn.DEFAULT_GAMMA, "prox_steps": 5, "prox_step": 0.5,
        "prox_rho": 1.0, "out": "runs/reconstruct",
    },
    "attack": {
        "checkpoint": REQUIRED, "layout": "intersection", "victim": "V1", "victims_file": None,
        "method": "simba", "budget": 100, "eps": 0.5, "seed": 0, "world_seed": 0,
        "buildings": 8, "rules": "traffic", "point_budget": 100, "point_eps": 0.05,
        "transfer": False, "prox_steps": 5, "prox_step": 0.5, "prox_rho": 1.0,
        "out": "runs/attack",
    },
    "report": {"runs": REQUIRED, "out": "runs/report"},
}

CHOICES = {
    ("synth-data", "task"): ("synthetic", "traffic"),
    ("attack", "method"): ("simba", "bo"),
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config resolution

def _coerce(key, value, default):
    if default is REQUIRED or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return list(value) if not isinstance(value, str) else value.split(",")
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    return value


def resolve_config(command, file_cfg=None, flags=None):
    """Defaults, then the config file, then flags; unknown keys are errors."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    for source in (file_cfg or {}), (flags or {}):
        unknown = sorted(set(source) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in source.items():
            cfg[k] = _coerce(k, v, defaults[k])
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"missing required key(s) for {command}: {', '.join(missing)}")
    for (cmd, key), allowed in CHOICES.items():
        if cmd == command and cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    for key in ("n", "budget", "epochs", "batch_size", "point_budget"):
        if key in cfg and isinstance(cfg[key], int) and cfg[key] < 0:
            raise ConfigError(f"{key} must be non-negative")
    return cfg


def load_config_file(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


# ---------------------------------------------------------------------------
# run directory

class RunDir:
    def __init__(self, out, force=False):
        self.root = Path(out)
        if self.root.exists() and any(self.root.iterdir()):
            if not force:
                raise ConfigError(f"output directory {out} exists (use --force to overwrite)")
            shutil.rmtree(self.root)
        self.logs = self.root / "logs"
        self.artifacts = self.root / "artifacts"
        self.logs.mkdir(parents=True, exist_ok=True)
        self.artifacts.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self._handler = logging.FileHandler(self.logs / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("scg").addHandler(self._handler)
        logging.getLogger("scg").setLevel(logging.INFO)

    def path(self, name):
        p = self.artifacts / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p.relative_to(self.root)))
        return p

    def manifest(self, command, cfg, results, timing=None):
        doc = {"command": command, "version": __version__, "config": cfg,
               "outputs": sorted(set(self.outputs)), "results": results,
               "timing": timing or {}}
        (self.root / "manifest.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")

    def close(self):
        logging.getLogger("scg").removeHandler(self._handler)
        self._handler.close()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return str(x)


def _clean(obj):
    """JSON-safe copy (non-finite floats become strings)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_json(path, doc):
    Path(path).write_text(json.dumps(_clean(doc), indent=1, sort_keys=True) + "\n")


def _load_layout(name):
    if name in tr.LAYOUTS:
        return tr.LAYOUTS[name]()
    p = Path(name)
    if not p.is_file():
        raise ConfigError(f"unknown layout {name!r} (choose {sorted(tr.LAYOUTS)} or a layout file)")
    try:
        return tr.RoadLayout.load(p)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _load_checkpoint(path, schema=None):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    try:
        header, _ = ad.load_checkpoint(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    name = header["schema"]
    if schema is not None and name != schema.name:
        raise ConfigError(f"checkpoint schema {name!r} does not match {schema.name!r}")
    if name not in SCHEMAS:
        raise ConfigError(f"checkpoint has unknown schema {name!r}")
    model, header = tvae.load_model(p, SCHEMAS[name])
    return model, header


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(cfg, run):
    task = cfg["task"]
    scenes = run.artifacts / "scenes"
    scenes.mkdir(exist_ok=True)
    if task == "synthetic":
        copies = 10 if cfg["target"] else 0
        if cfg["n"] < copies:
            raise ConfigError(f"n must be at least {copies} when target copies are included")
        trees, flags = syn.gen_dataset(cfg["n"], cfg["seed"], target_copies=copies)
        schema = syn.SCHEMA
        if cfg["target"]:
            syn.write_ppm(run.path("target.ppm"), syn.render(syn.target_scene()))
    else:
        layout = _load_layout(cfg["layout"])
        trees = tr.gen_traffic_dataset(layout, cfg["n"], cfg["seed"])
        flags = [False] * len(trees)
        schema = tr.SCHEMA
        layout.save(run.path("layout.json"))
    entries = []
    for i, (t, flag) in enumerate(zip(trees, flags)):
        name = f"scenes/scene_{i:05d}.json"
        save_tree(run.artifacts / name, t, schema)
        entries.append({"file": name, "target": bool(flag)})
    run.outputs.append("artifacts/scenes/")
    _write_json(run.path("index.json"), {"format": "scene-index", "version": 1, "task": task,
                                         "schema": schema.name, "entries": entries})
    log.info("wrote %d scenes (%d target copies)", len(entries), sum(flags))
    return {"scenes": len(entries), "target_copies": int(sum(flags)), "schema": schema.name}


def read_dataset(path):
    """``(trees, schema, index)`` from a synth-data run or its artifacts dir."""
    root = Path(path)
    for cand in (root / "artifacts" / "index.json", root / "index.json"):
        if cand.is_file():
            index = json.loads(cand.read_text())
            break
    else:
        raise ConfigError(f"no dataset index under {path}")
    schema = SCHEMAS.get(index.get("schema"))
    if schema is None:
        raise ConfigError(f"dataset has unknown schema {index.get('schema')!r}")
    trees = [load_tree(cand.parent / e["file"], schema) for e in index["entries"]]
    return trees, schema, index


def cmd_train(cfg, run):
    trees, schema, _ = read_dataset(cfg["data"])
    if cfg["schema"] is not None and cfg["schema"] not in (schema.name, *[k for k, v in TASK_SCHEMA.items()
                                                                           if v == schema.name]):
        raise ConfigError(f"dataset schema {schema.name!r} does not match configured {cfg['schema']!r}")
    tcfg = tvae.TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], lr_final=cfg["lr_final"],
                            batch_size=cfg["batch_size"],
                            beta_max=cfg["beta_max"], warmup_frac=cfg["warmup_frac"],
                            clip=cfg["clip"], seed=cfg["seed"])
    if cfg["resume"]:
        model, _ = _load_checkpoint(cfg["resume"], schema)
        trainer = tvae.restore_trainer(cfg["resume"], model, tcfg)
    else:
        model = tvae.TreeVAE(schema, tvae.ModelConfig(latent_dim=cfg["latent_dim"],
                                                      feature_dim=cfg["feature_dim"],
                                                      hidden_dim=cfg["feature_dim"]),
                             seed=cfg["seed"])
        model.set_class_prior(tvae.class_prior(trees, schema))
        trainer = tvae.Trainer(model, tcfg)
    start = trainer.epoch
    rows = trainer.run(trees, epochs=cfg["epochs"])
    tvae.save_model(run.path("model.ckpt"), model, trainer, {"dataset": str(cfg["data"])})
    with open(run.path("train_log.csv"), "w", newline="") as fh:
        keys = ["epoch", "total", "l_c", "l_r", "kl", "beta", "tf_accuracy", "seconds"]
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in keys[1:]])
    if rows:
        plotting.plot_training(rows, run.path("training.png"))
    last = rows[-1] if rows else {}
    return {"epochs_run": len(rows), "start_epoch": start, "end_epoch": trainer.epoch,
            "final_total": last.get("total"), "final_tf_accuracy": last.get("tf_accuracy")}, \
        {"train_seconds": float(sum(r["seconds"] for r in rows))}


def _rule_set(value, builtin, default, registry, context=None):
    """``none``, the task's built-in rule set, or a rule-set file."""
    if value == "none":
        return None
    if value == builtin:
        return default()
    if not Path(value).is_file():
        raise ConfigError(f"rules must be 'none', {builtin!r} or a rule-set file, got {value!r}")
    try:
        return kn.load_rule_set(value, registry, context)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_reconstruct(cfg, run):
    model, _ = _load_checkpoint(cfg["checkpoint"], syn.SCHEMA)
    if cfg["target"]:
        if not Path(cfg["target"]).is_file():
            raise ConfigError(f"target image {cfg['target']} not found")
        target = syn.read_ppm(cfg["target"])
    else:
        target = syn.render(syn.target_scene())
    syn.write_ppm(run.path("target.ppm"), target)
    kset = _rule_set(cfg["rules"], "synthetic", lambda: syn.rules_synthetic(cfg["gamma"]),
                     syn.rule_registry(cfg["gamma"]))
    pcfg = ex.ProxConfig(steps=cfg["prox_steps"], step_size=cfg["prox_step"], rho=cfg["prox_rho"])
    res = ex.run_reconstruction(model, target, kset, cfg["seed"], cfg["budget"], cfg["eta"],
                                pcfg, gamma=cfg["gamma"])
    res.trajectory.write_csv(run.path("trajectory.csv"))
    save_tree(run.path("final_scene.json"), res.tree, model.schema)
    img = syn.render(res.tree)
    syn.write_ppm(run.path("final.ppm"), img)
    plotting.save_image(img, run.path("final.png"))
    if len(res.trajectory):
        plotting.plot_trajectories({cfg["rules"]: res.trajectory}, run.path("trajectory.png"),
                                   title="reconstruction loss (best so far)")
    audit = dict(res.audit, rules=cfg["rules"])
    _write_json(run.path("audit.json"), audit)
    log.info("final recon loss %.4f, audit passed=%s", res.final_loss, audit["passed"])
    return {"final_recon_loss": res.final_loss, "best_task_loss": res.trajectory.best_task,
            "iterations": len(res.trajectory), "aborted": res.trajectory.aborted,
            "audit": _clean(audit)}


def _victims(cfg):
    if cfg["victims_file"]:
        if not Path(cfg["victims_file"]).is_file():
            raise ConfigError(f"victim file {cfg['victims_file']} not found")
        try:
            return vic.load_victims(cfg["victims_file"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    return dict(vic.VICTIMS)


def cmd_attack(cfg, run):
    victims = _victims(cfg)
    if cfg["victim"] not in victims:
        raise ConfigError(f"unknown victim {cfg['victim']!r}; choose from {sorted(victims)}")
    model, _ = _load_checkpoint(cfg["checkpoint"], tr.SCHEMA)
    layout = _load_layout(cfg["layout"])
    world = ex.AttackWorld.build(layout, cfg["world_seed"], buildings=cfg["buildings"])
    kset = _rule_set(cfg["rules"], "traffic", lambda: tr.rules_traffic(layout), tr.rule_registry(layout),
                     {"layout": layout})
    pcfg = ex.ProxConfig(steps=cfg["prox_steps"], step_size=cfg["prox_step"], rho=cfg["prox_rho"])
    sources = list(victims) if cfg["transfer"] else [cfg["victim"]]
    scene_clouds, point_clouds, summary = {}, {}, {}
    for name in sources:
        v = victims[name]
        res = ex.scene_attack(model, world, v, kset, cfg["seed"], cfg["budget"], cfg["method"],
                              cfg["eps"], prox_cfg=pcfg)
        pcloud, pcurve = vic.point_attack(res.start_cloud, v, cfg["point_budget"], cfg["point_eps"],
                                          cfg["seed"])
        scene_clouds[name], point_clouds[name] = [res.cloud], [pcloud]
        best = float(res.trajectory.best_task) if len(res.trajectory) else res.baseline_iou
        summary[name] = {"baseline_iou": res.baseline_iou, "scene_best_iou": best,
                         "scene_final_iou": res.final_iou, "point_best_iou": float(pcurve.min()),
                         "evaluations": len(res.trajectory), "audit": res.audit}
        if name == cfg["victim"]:
            res.trajectory.write_csv(run.path("trajectory.csv"))
            save_tree(run.path("best_scene.json"), res.tree, model.schema)
            lidar.write_ply(run.path("cloud.ply"), res.cloud)
            lidar.write_ply(run.path("start_cloud.ply"), res.start_cloud)
            _write_json(run.path("audit.json"), dict(res.audit, rules=cfg["rules"]))
            np.savetxt(run.path("point_attack_curve.txt"), pcurve)
            curves = {"scene attack": res.best_curve() if len(res.trajectory) else np.array([res.baseline_iou]),
                      "point attack": np.minimum.accumulate(pcurve)}
            plotting.plot_curves(curves, run.path("attack.png"), "evaluations", "vehicle IoU",
                                 f"victim {name}")
            plotting.plot_cloud(res.cloud, run.path("cloud_top.png"))
            log.info("%s: baseline %.3f, best %.3f, point attack best %.3f", name,
                     res.baseline_iou, best, pcurve.min())
    transfer = {
        "sources": sources, "targets": list(victims),
        "scene_attack": ex.transfer_table(scene_clouds, victims) if cfg["transfer"] else
        {s: {t: vic.vehicle_iou(scene_clouds[s][0], victims[t]) for t in victims} for s in sources},
        "point_attack": ex.transfer_table(point_clouds, victims) if cfg["transfer"] else
        {s: {t: vic.vehicle_iou(point_clouds[s][0], victims[t]) for t in victims} for s in sources},
        "diagonal": "source",
    }
    _write_json(run.path("transfer.json"), transfer)
    if cfg["transfer"]:
        plotting.plot_transfer(transfer["scene_attack"], run.path("transfer_scene.png"), "scene attack IoU")
        plotting.plot_transfer(transfer["point_attack"], run.path("transfer_point.png"), "point attack IoU")
    return {"victim": cfg["victim"], "per_source": _clean(summary)}


def cmd_report(cfg, run):
    runs = cfg["runs"] if isinstance(cfg["runs"], list) else str(cfg["runs"]).split(",")
    lines = ["# Run report", ""]
    recon_trajs, attack_curves = {}, {}
    for r in runs:
        mpath = Path(r) / "manifest.json"
        if not mpath.is_file():
            raise ConfigError(f"{r}: no manifest.json")
        man = json.loads(mpath.read_text())
        lines += [f"## {r} ({man['command']})", ""]
        res = man.get("results", {})
        for k in sorted(res):
            if not isinstance(res[k], dict):
                lines.append(f"- {k}: {res[k]}")
        if man["command"] == "reconstruct":
            rows = ex_read_traj(Path(r) / "artifacts" / "trajectory.csv")
            recon_trajs[f"{Path(r).name} ({man['config']['rules']})"] = rows
            lines.append(f"- audit passed: {res.get('audit', {}).get('passed')}")
        if man["command"] == "attack":
            for src, s in res.get("per_source", {}).items():
                lines.append(f"- {src}: baseline {s['baseline_iou']:.3f}, scene attack best "
                             f"{s['scene_best_iou']:.3f}, point attack best {s['point_best_iou']:.3f}")
            rows = ex_read_traj(Path(r) / "artifacts" / "trajectory.csv")
            if rows.size:
                attack_curves[Path(r).name] = np.minimum.accumulate(rows)
            tpath = Path(r) / "artifacts" / "transfer.json"
            if tpath.is_file():
                t = json.loads(tpath.read_text())
                lines += ["", "| source | " + " | ".join(t["targets"]) + " |",
                          "|---" * (len(t["targets"]) + 1) + "|"]
                for s in t["sources"]:
                    cells = [f"**{t['scene_attack'][s][k]:.3f}**" if k == s else f"{t['scene_attack'][s][k]:.3f}"
                             for k in t["targets"]]
                    lines.append(f"| {s} | " + " | ".join(cells) + " |")
        lines.append("")
    if recon_trajs:
        plotting.plot_curves({k: np.minimum.accumulate(v) for k, v in recon_trajs.items() if v.size},
                             run.path("reconstruction.png"), "iteration", "reconstruction loss")
        lines.append("![reconstruction](reconstruction.png)")
    if attack_curves:
        plotting.plot_curves(attack_curves, run.path("attacks.png"), "evaluations", "vehicle IoU")
        lines.append("![attacks](attacks.png)")
    run.path("report.md").write_text("\n".join(lines) + "\n")
    return {"runs": len(runs)}


def ex_read_traj(path):
    from .optim import read_trajectory_csv
    if not Path(path).is_file():
        return np.zeros(0)
    return np.array([row[1] for row in read_trajectory_csv(path)])


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "attack": cmd_attack, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="scg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if key == "runs":
                p.add_argument(flag, dest=key, nargs="+", default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=key, default=argparse.SUPPRESS,
                               help=f"default: {'required' if default is REQUIRED else default}")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "force")}
    run = None
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_cfg, flags)
        run = RunDir(cfg["out"], args.force)
        log.info("%s %s", args.command, json.dumps(cfg, sort_keys=True, default=str))
        t0 = time.perf_counter()
        out = COMMANDS[args.command](cfg, run)
        results, timing = out if isinstance(out, tuple) else (out, {})
        timing = dict(timing, wall_seconds=time.perf_counter() - t0)
        run.manifest(args.command, cfg, _clean(results), _clean(timing))
        print(json.dumps(_clean(results), indent=1, sort_keys=True))
        return EXIT_OK
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tvae.TrainingDiverged, ad.GradientError, FloatingPointError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
