"""Experiment orchestration: presets, run records, matrices, ablations.

A preset pins sample counts, epoch budgets, seeds, and per-family
hyperparameters so a whole benchmark invocation is reproducible from one
name. Runs are cached per (config, data) key only within a process; files
are the inter-process interface.
"""

from __future__ import annotations

import importlib.resources
import json
import os
import subprocess
import time

from . import graphgen as gg
from . import models as mdl
from . import pooling as pl
from . import tasks
from . import training as tr

DEFAULT_DATA_SEED = 100


def load_preset(name_or_path: str) -> dict:
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return json.load(fh)
    ref = importlib.resources.files("gnpbench") / "presets" / f"{name_or_path}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no preset named {name_or_path!r}")
    return json.loads(ref.read_text())


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"gnpbench-{__version__}"


def preset_epochs(preset: dict, task: str) -> int:
    table = preset["epochs"]
    if task in table:
        return int(table[task])
    return int(table[tasks.task_kind(task)])


def preset_counts(preset: dict, task: str) -> tuple[int, int, int]:
    table = preset["counts"]
    kind = tasks.task_kind(task)
    entry = table[kind] if kind in table else table["default"]
    return int(entry[0]), int(entry[1]), int(entry[2])


def hyper_for(preset: dict, task: str, is_gnp: bool) -> dict:
    kind = tasks.task_kind(task)
    return dict(preset["hyper"][kind]["gnp" if is_gnp else "baseline"])


def make_train_config(task, agg=None, readout=None, pool=None, mode=pl.FULL,
                      preset=None, seed=0, activation=mdl.RELU,
                      set_depth=mdl.BASIC, feature_mode="const",
                      overrides=None) -> tr.TrainConfig:
    """Assemble a TrainConfig from a preset plus combination choices."""
    kind = tasks.task_kind(task)
    agg = agg or (pl.GNP if kind != tasks.SET else pl.SUM)
    readout = readout or pl.GNP
    pool = pool or pl.GNP
    if kind == tasks.GRAPH:
        is_gnp = pl.GNP in (agg, readout)
    elif kind == tasks.NODE:
        is_gnp = agg == pl.GNP
    else:
        is_gnp = pool == pl.GNP
    hyper = hyper_for(preset, task, is_gnp)
    hyper.update(overrides or {})
    in_dim = 3 if feature_mode == "uniform" else 1
    model = mdl.ModelConfig(
        task=task, agg=agg, readout=readout, pool=pool, gnp_mode=mode,
        activation=activation, set_depth=set_depth, in_dim=in_dim,
    )
    return tr.TrainConfig(
        task=task,
        model=model,
        optimizer=hyper.get("optimizer", tr.RMSPROP),
        beta1=hyper.get("beta1", 0.9),
        beta2=hyper.get("beta2", 0.999),
        lr=hyper.get("lr", 1e-2),
        lr_p=hyper.get("lr_p", 3e-2),
        clip_norm=hyper.get("clip_norm", 1e4),
        epochs=preset_epochs(preset, task),
        batch_size=hyper.get("batch_size", 64),
        seed=seed,
    )


_DATASET_CACHE: dict = {}


def get_split(task, split, structure, preset, data_seed, feature_mode="const",
              prepared=True):
    """Build (or fetch cached) one prepared split."""
    counts = preset_counts(preset, task)
    count = counts[tasks.SPLITS.index(split)]
    key = (task, split, structure, count, data_seed, feature_mode, prepared)
    if key not in _DATASET_CACHE:
        ds = tasks.build_dataset(task, split, structure=structure, seed=data_seed,
                                 count=count, feature_mode=feature_mode)
        _DATASET_CACHE[key] = mdl.prepare(ds) if prepared else ds
    return _DATASET_CACHE[key]


def get_datasets(task, structure, preset, data_seed, feature_mode="const",
                 train_structure=gg.ER):
    """(train, val, test) prepared splits; train/val default to ER graphs."""
    train = get_split(task, tasks.TRAIN, train_structure, preset, data_seed, feature_mode)
    val = get_split(task, tasks.VAL, train_structure, preset, data_seed, feature_mode)
    test = get_split(task, tasks.TEST, structure, preset, data_seed, feature_mode)
    return train, val, test


def run_id_for(cfg: tr.TrainConfig, structure: str) -> str:
    m = cfg.model
    kind = tasks.task_kind(cfg.task)
    combo = m.pool if kind == tasks.SET else (
        m.agg if kind == tasks.NODE else f"{m.agg}-{m.readout}"
    )
    return f"{cfg.task}-{structure}-{combo}-{m.gnp_mode}-s{cfg.seed}-{cfg.digest()}"


def csv_row(cfg: tr.TrainConfig, structure: str, result: tr.RunResult,
            metrics: dict, wall: float) -> dict:
    m = cfg.model
    kind = tasks.task_kind(cfg.task)
    return {
        "run_id": run_id_for(cfg, structure),
        "build_id": build_id(),
        "task": cfg.task,
        "structure": structure,
        "agg": m.pool if kind == tasks.SET else m.agg,
        "readout": m.readout if kind == tasks.GRAPH else "",
        "mode": m.gnp_mode,
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "val_loss": min(result.val_loss_curve),
        "test_mape": metrics.get("mape", ""),
        "test_mae": metrics.get("mae", ""),
        "wall_seconds": round(wall, 3),
    }


def run_one(cfg: tr.TrainConfig, preset, structure=gg.ER,
            data_seed=DEFAULT_DATA_SEED, feature_mode="const",
            extra_structures=()) -> tuple[tr.RunResult, list[dict]]:
    """Train one configuration and evaluate on one or more test structures."""
    train_p, val_p, test_p = get_datasets(cfg.task, structure, preset, data_seed,
                                          feature_mode)
    t0 = time.time()
    result = tr.train(cfg, train_p, val_p, test_p)
    wall = time.time() - t0
    rows = [csv_row(cfg, structure, result, result.test_metrics, wall)]
    if extra_structures:
        model = mdl.model_from_checkpoint_obj(result.checkpoint)
        for st in extra_structures:
            if st == structure:
                continue
            te = get_split(cfg.task, tasks.TEST, st, preset, data_seed, feature_mode)
            metrics = tr.evaluate(model, cfg.task, te, cfg.eval_batch_size)
            rows.append(csv_row(cfg, st, result, metrics, wall))
    return result, rows


def matrix_cells(task: str) -> list[dict]:
    """Combination list: baseline grid plus the learnable-pooling cell."""
    kind = tasks.task_kind(task)
    cells = []
    if kind == tasks.GRAPH:
        for agg in pl.BASELINES:
            for readout in pl.BASELINES:
                cells.append({"agg": agg, "readout": readout})
        cells.append({"agg": pl.GNP, "readout": pl.GNP})
    elif kind == tasks.NODE:
        for agg in pl.BASELINES + (pl.GNP,):
            cells.append({"agg": agg})
    else:
        for pool in pl.BASELINES + (pl.GNP,):
            cells.append({"pool": pool})
    return cells


def jobs_from_env(jobs: int | None) -> int:
    env = os.environ.get("GNP_JOBS")
    if env:
        return max(1, int(env))
    return max(1, jobs or 1)


_POOL_PAYLOAD = {}


def _pool_cell(idx):
    payload = _POOL_PAYLOAD
    cell = payload["cells"][idx]
    cfg = tr.TrainConfig.from_dict(cell["cfg"])
    _, rows = run_one(
        cfg, payload["preset"], structure=payload["structure"],
        data_seed=payload["data_seed"], extra_structures=payload["extra_structures"],
    )
    return idx, rows


def run_cells(cell_cfgs: list[tr.TrainConfig], preset, structure,
              data_seed, extra_structures, jobs=1, keep_results=False):
    """Run many independent training cells, optionally in a process pool."""
    jobs = jobs_from_env(jobs)
    rows: list = [None] * len(cell_cfgs)
    results: list = [None] * len(cell_cfgs)
    if jobs <= 1 or len(cell_cfgs) <= 1:
        for i, cfg in enumerate(cell_cfgs):
            res, r = run_one(cfg, preset, structure=structure, data_seed=data_seed,
                             extra_structures=extra_structures)
            rows[i] = r
            results[i] = res if keep_results else None
        return results, [r for group in rows for r in group]
    import multiprocessing as mp

    global _POOL_PAYLOAD
    _POOL_PAYLOAD = {
        "cells": [{"cfg": c.to_dict()} for c in cell_cfgs],
        "preset": preset,
        "structure": structure,
        "data_seed": data_seed,
        "extra_structures": extra_structures,
    }
    ctx = mp.get_context("fork")
    with ctx.Pool(processes=jobs) as pool:
        for idx, r in pool.imap_unordered(_pool_cell, range(len(cell_cfgs))):
            rows[idx] = r
    # parallel cells cannot return full results cheaply; rows carry metrics
    return results, [r for group in rows for r in group]
