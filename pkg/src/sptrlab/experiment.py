"""Run one configured experiment or a grid of them and write metrics files."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .data import Split, SyntheticDatasetSpec, generate_dataset, sample_few_shot
from .estimator import SPTRClassifier
from .exceptions import ConfigError
from .metrics import harmonic_mean, monotone_fraction

log = logging.getLogger(__name__)

EPOCH_FIELDS = ("epoch", "ce", "sp", "dis", "total", "train_acc")
MONOTONE_THRESHOLD = 0.9


def run(cfg: dict) -> dict:
    """Train and evaluate one resolved config; returns the metrics payload.

    The payload holds no timestamps or paths, so equal configs give equal
    payloads.
    """
    d, r = cfg["data"], cfg["run"]
    seed = r["seed"]
    est = SPTRClassifier(**cfgmod.estimator_params(cfg))
    backbone = est.make_backbone(d["d_in"])
    spec = SyntheticDatasetSpec(n_classes=d["n_classes"], samples_per_class=d["samples_per_class"],
                                noise=d["noise"], seed=seed)
    X, y = generate_dataset(spec, backbone)

    if r["task"] == "base2novel":
        split = Split.halves(d["n_classes"])
    else:
        split = Split(tuple(range(d["n_classes"])), ())
    train_idx = sample_few_shot(y, split.base, d["shots"], seed)
    held_out = np.setdiff1d(np.arange(y.size), train_idx)
    if np.intersect1d(train_idx, held_out).size:
        raise AssertionError("training and evaluation indices overlap")

    est.fit(X[train_idx], y[train_idx])
    if est.touched_classes_ & set(split.novel):
        raise AssertionError(f"novel classes {sorted(est.touched_classes_ & set(split.novel))} reached the loss")

    base_mask = np.isin(y[held_out], split.base)
    base_acc = est.score(X[held_out][base_mask], y[held_out][base_mask], classes=split.base)
    novel_acc = hm = None
    if split.novel:
        novel_acc = est.score(X[held_out][~base_mask], y[held_out][~base_mask], classes=split.novel)
        hm = harmonic_mean(base_acc, novel_acc) if base_acc > 0 and novel_acc > 0 else 0.0

    totals = [h["total"] for h in est.history_]
    mono = monotone_fraction(totals)
    flags = []
    if mono < MONOTONE_THRESHOLD:
        flags.append(f"training loss non-increasing in only {mono:.2f} of epoch pairs")
    return {
        "task": r["task"],
        "seed": seed,
        "config_digest": cfgmod.digest(cfg),
        "final": {"base_acc": base_acc, "novel_acc": novel_acc, "hm": hm},
        "base_classes": list(split.base),
        "novel_classes": list(split.novel),
        "touched_classes": sorted(est.touched_classes_),
        "n_train": int(train_idx.size),
        "n_eval": int(held_out.size),
        "loss_monotone_fraction": mono,
        "flags": flags,
        "epochs": est.history_,
    }


def epochs_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in EPOCH_FIELDS[1:]])
    return buf.getvalue()


def write_outputs(out_dir, cfg: dict, payload: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {k: v for k, v in payload.items() if k != "epochs"}
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "epochs.csv").write_text(epochs_csv(payload["epochs"]))
    (out / "config.resolved").write_text(cfgmod.dump(cfg))
    return out


def run_experiment(config_path, out_dir, seed=None, task=None) -> dict:
    """Load, override, run, and write ``metrics.json``, ``epochs.csv`` and ``config.resolved``."""
    cfg = cfgmod.load(config_path)
    if seed is not None:
        cfg = cfgmod.set_path(cfg, "run.seed", int(seed))
    if task is not None:
        cfg = cfgmod.set_path(cfg, "run.task", task)
    log.info("running %s (seed %d, task %s)", config_path, cfg["run"]["seed"], cfg["run"]["task"])
    payload = run(cfg)
    write_outputs(out_dir, cfg, payload)
    return payload


# -- sweeps -----------------------------------------------------------------------

def load_grid(path) -> tuple[dict, list[tuple[str, dict]]]:
    """Parse a grid document into a base config and named run configs.

    Keys: ``base`` (config path relative to the grid file) or ``config``
    (inline sections), ``axes`` mapping ``section.key`` to value lists,
    ``mode`` (``one_at_a_time`` or ``product``) and ``seeds``.
    """
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    unknown = set(doc) - {"base", "config", "axes", "mode", "seeds"}
    if unknown:
        raise ConfigError(f"unknown grid key {sorted(unknown)[0]!r}", sorted(unknown)[0])
    if "base" in doc and "config" in doc:
        raise ConfigError("grid may give either 'base' or 'config', not both", "base")
    if "base" in doc:
        base = cfgmod.load(path.parent / doc["base"])
    else:
        base = cfgmod.resolve(doc.get("config"))
    axes = doc.get("axes") or {}
    if not isinstance(axes, dict):
        raise ConfigError("grid axes must be a mapping", "axes")
    mode = doc.get("mode", "one_at_a_time")
    seeds = doc.get("seeds", [base["run"]["seed"]])

    if mode == "product":
        names = list(axes)
        points = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    elif mode == "one_at_a_time":
        points = [{name: v} for name, values in axes.items() for v in values]
    else:
        raise ConfigError(f"unknown grid mode {mode!r}", "mode")
    if not points:
        points = [{}]

    runs = []
    for point in points:
        for s in seeds:
            cfg = base
            for dotted, value in point.items():
                cfg = cfgmod.set_path(cfg, dotted, value)
            cfg = cfgmod.set_path(cfg, "run.seed", int(s))
            label = "_".join(f"{k.split('.')[-1]}={v}" for k, v in point.items()) or "base"
            runs.append((f"{label.replace('/', '-')}/seed_{s}", cfg))
    return base, runs


def _run_one(item):
    name, cfg, out = item
    payload = run(cfg)
    write_outputs(Path(out) / name, cfg, payload)
    return name, cfg, payload


def sweep(grid_path, out_dir, jobs: int = 1) -> list[dict]:
    """Run every grid point; writes per-run outputs and ``summary.csv``."""
    _, runs = load_grid(grid_path)
    items = [(name, cfg, str(out_dir)) for name, cfg in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, items))
    else:
        results = [_run_one(it) for it in items]

    rows = []
    for name, cfg, payload in results:
        f = payload["final"]
        rows.append({"run": name, "seed": payload["seed"], "base_acc": f["base_acc"],
                     "novel_acc": f["novel_acc"], "hm": f["hm"], "flags": len(payload["flags"])})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
