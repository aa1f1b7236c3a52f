"""``hgul <command> --config <path> [--set key=value ...] --out <dir>``.

Configuration is a flat YAML mapping.  Values resolve as
``--set`` flag > config file > built-in default.  Every result file carries the
resolved configuration: JSON files under ``"config"``, CSV files in a leading
``# config: {...}`` comment line.  Wall-clock timings go to ``timing.json`` only,
so all other outputs are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import presets
from .affinity import PprConfig
from .graph import HeteroGraph, generate_synthetic, load_graph, save_graph
from .hgsl import GumbelConfig
from .knn import KnnConfig
from .perturb import PerturbConfig, PerturbReport, perturb_graph, robustness_sweep
from .spectral import (
    build_block_laplacian,
    correction_term,
    cross_dirichlet,
    label_signal,
    schur_complement,
    spectral_energy,
    verify_decomposition,
    weyl_bound_check,
)
from .trainer import TrainConfig, train

log = logging.getLogger("hgul")

COMMANDS = ("generate", "train", "ablate", "sweep", "robustness", "spectral", "perturb")

DEFAULTS: dict[str, object] = {
    # data
    "graph": None,
    "preset": "hetero3",
    "syn_seed": 0,
    # training
    "model": "hgul",
    "seed": 0,
    "epochs": 100,
    "lr": 5e-3,
    "weight_decay": 0.0,
    "gamma": 0.1,
    "hidden_dim": 64,
    "num_layers": 1,
    "metric": "accuracy",
    "pretrain_epochs": 200,
    "k": 8,
    "knn_direction": "both",
    "keep_negative": True,
    "tau0": 1.0,
    "tau_min": 0.1,
    "tau_decay": 0.98,
    "delta": 0.5,
    "alpha": 0.85,
    "ppr_max_iter": 200,
    "ppr_tol": 1e-10,
    "disable_knn": False,
    "disable_gsl": False,
    "disable_affinity": False,
    "freeze_type_importance": False,
    # perturbation
    "rate": 0.0,
    "removal_fraction": 0.5,
    "perturb_seed": 0,
    # grids
    "repeats": 1,
    "rates": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "models": ["hgul", "rgcn"],
    "sweep_k": [2, 4, 8, 16],
    "sweep_delta": [0.3, 0.5, 0.7],
    "sweep_gamma": [0.0, 0.1, 1.0],
    # spectral
    "spectral_types": None,
    "spectral_class": 0,
    "noise_rate": 0.0,
}

# preset knobs are exposed as syn_<name>
for _name in sorted({k for d in presets.DEFAULTS.values() for k in d}):
    DEFAULTS[f"syn_{_name}"] = None

_LIST_KEYS = {"rates", "models", "sweep_k", "sweep_delta", "sweep_gamma", "spectral_types"}


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        return None
    if key in _LIST_KEYS:
        if not isinstance(value, (list, tuple)):
            value = [value]
        return list(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {key!r} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"field {key!r} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or key.startswith("syn_"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or default is None:
        if not isinstance(value, str):
            raise ConfigError(f"field {key!r} expects a string, got {value!r}")
    return value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def resolve_config(path=None, overrides=()) -> dict:
    """Merge defaults, the YAML file and ``--set`` overrides; validate every field."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        layers.append(data)
    layers.append(dict(parse_override(o) for o in overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config field {key!r}")
            cfg[key] = _coerce(key, value)
    if cfg["preset"] not in presets.preset_names():
        raise ConfigError(f"field 'preset' must be one of {presets.preset_names()}")
    # surface dataclass validation errors under the offending field names
    try:
        train_config(cfg)
        PerturbConfig(cfg["rate"], cfg["perturb_seed"], cfg["removal_fraction"])
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def train_config(cfg: dict, **changes) -> TrainConfig:
    c = {**cfg, **changes}
    return TrainConfig(
        gamma=float(c["gamma"]),
        lr=float(c["lr"]),
        weight_decay=float(c["weight_decay"]),
        epochs=int(c["epochs"]),
        seed=int(c["seed"]),
        hidden_dim=int(c["hidden_dim"]),
        num_layers=int(c["num_layers"]),
        knn=KnnConfig(int(c["k"]), c["knn_direction"], bool(c["keep_negative"])),
        gumbel=GumbelConfig(float(c["tau0"]), float(c["tau_min"]), float(c["tau_decay"]), float(c["delta"])),
        ppr=PprConfig(float(c["alpha"]), int(c["ppr_max_iter"]), float(c["ppr_tol"])),
        disable_knn=bool(c["disable_knn"]),
        disable_gsl=bool(c["disable_gsl"]),
        disable_affinity=bool(c["disable_affinity"]),
        freeze_type_importance=bool(c["freeze_type_importance"]),
        pretrain_epochs=int(c["pretrain_epochs"]),
        metric=c["metric"],
        model=c["model"],
    )


def load_input_graph(cfg: dict) -> HeteroGraph:
    if cfg["graph"]:
        return load_graph(cfg["graph"])
    knobs = {k[4:]: v for k, v in cfg.items() if k.startswith("syn_") and k != "syn_seed" and v is not None}
    known = presets.DEFAULTS[cfg["preset"]]
    extra = set(knobs) - set(known)
    if extra:
        raise ConfigError(f"preset {cfg['preset']!r} has no field(s) {sorted('syn_' + e for e in extra)}")
    return generate_synthetic(presets.synthetic_config(cfg["preset"], int(cfg["syn_seed"]), **knobs))


# -- output helpers ------------------------------------------------------------


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path: Path, header, rows, cfg: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(cfg, sort_keys=True, default=_json_default) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def workers() -> int:
    raw = os.environ.get("HGUL_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"HGUL_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, n)


@contextmanager
def mapper():
    """Ordered map over a worker pool sized by ``HGUL_WORKERS`` (serial when 1)."""
    n = workers()
    if n == 1:
        yield map
        return
    with ProcessPoolExecutor(n) as pool:
        yield pool.map


def _train_once(args) -> dict:
    graph, tc = args
    m = train(graph, tc)
    return {"metrics": m.summary(), "test": m.test_at_best, "epochs": m.epochs}


def _mean_std(vals):
    return float(np.mean(vals)), float(np.std(vals))


# -- commands --------------------------------------------------------------------


def cmd_generate(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    save_graph(graph, out / "graph.json")
    return {
        "nodes": {t: graph.num_nodes(t) for t in graph.node_types},
        "edges": {rel.name: rel.num_edges for rel in graph.relations},
    }


def cmd_train(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    if cfg["rate"] > 0:
        graph = perturb_graph(graph, PerturbConfig(cfg["rate"], cfg["perturb_seed"], cfg["removal_fraction"]))
    m = train(graph, train_config(cfg))
    header = ["epoch", "loss_task", "loss_reg", "loss", "tau", "train", "val", "test"]
    write_csv(out / "epochs.csv", header, [[getattr(r, h) for h in header] for r in m.epochs], cfg)
    s = m.summary()
    for key in ("mean_epoch_seconds", "pretrain_seconds"):
        timing[key] = s.pop(key)
    return s


ABLATIONS = {
    "full": {},
    "w/o kNN": {"disable_knn": True},
    "w/o GSL": {"disable_gsl": True},
    "w/o aff": {"disable_affinity": True},
}


def _seed_grid(cfg, graph, variants: dict[str, dict]):
    cells, keys = [], []
    for name, changes in variants.items():
        for r in range(cfg["repeats"]):
            cells.append((graph, train_config(cfg, **changes, seed=cfg["seed"] + r)))
            keys.append(name)
    return cells, keys


def _grid_rows(cells, keys, variants):
    with mapper() as m:
        results = list(m(_train_once, cells))
    rows = []
    for name in variants:
        vals = [res["test"] for k, res in zip(keys, results) if k == name]
        rows.append((name, *_mean_std(vals), len(vals)))
    return rows


def cmd_ablate(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    if cfg["rate"] > 0:
        graph = perturb_graph(graph, PerturbConfig(cfg["rate"], cfg["perturb_seed"], cfg["removal_fraction"]))
    cells, keys = _seed_grid(cfg, graph, ABLATIONS)
    rows = _grid_rows(cells, keys, ABLATIONS)
    write_csv(out / "ablation.csv", ["variant", "mean", "std", "repeats"], rows, cfg)
    return {"rows": len(rows)}


def cmd_sweep(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    grid = list(itertools.product(cfg["sweep_k"], cfg["sweep_delta"], cfg["sweep_gamma"]))
    variants = {(k, d, g): {"k": int(k), "delta": float(d), "gamma": float(g)} for k, d, g in grid}
    cells, keys = _seed_grid(cfg, graph, variants)
    rows = [(k, d, g, mean, std, n) for (k, d, g), mean, std, n in _grid_rows(cells, keys, variants)]
    write_csv(out / "sensitivity.csv", ["k", "delta", "gamma", "mean", "std", "repeats"], rows, cfg)
    return {"rows": len(rows)}


def cmd_robustness(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    models = {}
    for name in cfg["models"]:
        if name in ABLATIONS:
            models[name] = train_config(cfg, model="hgul", **ABLATIONS[name])
        else:
            models[name] = train_config(cfg, model=name)
    with mapper() as m:
        rows = robustness_sweep(
            graph, sorted(float(r) for r in cfg["rates"]), models, repeats=cfg["repeats"],
            base_seed=cfg["perturb_seed"], removal_fraction=cfg["removal_fraction"], map_fn=m,
        )
    write_csv(
        out / "robustness.csv", ["rate", "model", "mean", "std", "repeats"],
        [(r.rate, r.model, r.mean, r.std, r.repeats) for r in rows], cfg,
    )
    return {"rows": len(rows)}


def cmd_perturb(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    report = PerturbReport()
    noisy = perturb_graph(graph, PerturbConfig(cfg["rate"], cfg["perturb_seed"], cfg["removal_fraction"]), report)
    save_graph(noisy, out / "graph.json")
    fmt = lambda d: {"/".join(k): v for k, v in d.items()}  # noqa: E731
    return {"removed": fmt(report.removed), "added": fmt(report.added), "shortfall": fmt(report.shortfall)}


def cmd_spectral(cfg, out: Path, timing: dict) -> dict:
    graph = load_input_graph(cfg)
    types = tuple(cfg["spectral_types"]) if cfg["spectral_types"] else None
    if types is not None and (len(types) != 2 or any(t not in graph.node_types for t in types)):
        raise ConfigError(f"spectral_types must name two node types of the graph, got {list(types)}")
    bl = build_block_laplacian(graph, types)
    f = label_signal(graph, bl, int(cfg["spectral_class"]))
    energy = spectral_energy(bl.laplacian, f)
    energy_rows = zip(energy.eigenvalues, energy.energy, energy.cumulative)
    write_csv(out / "spectrum.csv", ["eigenvalue", "energy", "cumulative_fraction"], energy_rows, cfg)
    schur = schur_complement(bl)
    result = {
        "types": list(bl.types),
        "centroid": energy.centroid,
        "entropy": energy.entropy,
        "low_fraction": energy.low_fraction(),
        "schur_regularized": schur.regularized,
        "decomposition_residual": verify_decomposition(bl),
        "correction_norm": float(np.linalg.norm(correction_term(bl))),
        "cross_dirichlet": cross_dirichlet(bl.b, f[: bl.n1], f[bl.n1 :]),
    }
    if cfg["noise_rate"] > 0:
        noisy = perturb_graph(graph, PerturbConfig(cfg["noise_rate"], cfg["perturb_seed"], cfg["removal_fraction"]))
        bl_n = build_block_laplacian(noisy, bl.types)
        e_n = spectral_energy(bl_n.laplacian, label_signal(noisy, bl_n, int(cfg["spectral_class"])))
        weyl = weyl_bound_check(bl.laplacian, bl_n.laplacian)
        write_csv(
            out / "spectrum_noisy.csv", ["eigenvalue", "energy", "cumulative_fraction"],
            zip(e_n.eigenvalues, e_n.energy, e_n.cumulative), cfg,
        )
        result["noisy"] = {"centroid": e_n.centroid, "entropy": e_n.entropy, "weyl": asdict(weyl)}
    return result


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "spectral": cmd_spectral,
    "perturb": cmd_perturb,
}


def run(command: str, config_path=None, overrides=(), out=".") -> dict:
    """Execute one command; returns the summary written to ``summary.json``."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    cfg = resolve_config(config_path, overrides)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timing: dict = {}
    start = time.perf_counter()
    result = HANDLERS[command](cfg, out, timing)
    timing["total_seconds"] = time.perf_counter() - start
    summary = {"command": command, "config": cfg, "seed": cfg["seed"], "result": result}
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", timing)
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgul", description="Heterogeneous graph structure and affinity learning runner.")
    p.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args.command, args.config, args.overrides, args.out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"hgul: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary["result"], sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
