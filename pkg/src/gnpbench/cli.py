"""Command-line front end.

Subcommands: generate, train, eval, sweep, matrix, trajectory, ablation,
report. Every command exits nonzero on error; file outputs are written
atomically. The report and trajectory paths render PNG figures next to
their CSV outputs. GNP_JOBS overrides --jobs for matrix/sweep worker pools.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import bench
from . import graphgen as gg
from . import models as mdl
from . import pooling as pl
from . import reporting as rep
from . import tasks
from . import training as tr


class CliError(RuntimeError):
    pass


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _dataset_path(out, task, split, structure):
    return os.path.join(out, f"{task}_{split}_{structure}.jsonl")


# -- generate -------------------------------------------------------------


def cmd_generate(args) -> int:
    preset = bench.load_preset(args.preset)
    out = _ensure_out(args.out)
    path = _dataset_path(out, args.task, args.split, args.structure)
    manifest_path = path.replace(".jsonl", ".manifest.json")
    if os.path.exists(path) and not args.force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    count = args.count
    if count is None:
        count = bench.preset_counts(preset, args.task)[tasks.SPLITS.index(args.split)]
    ds = tasks.build_dataset(
        args.task, args.split, structure=args.structure, seed=args.seed,
        count=count, feature_mode=args.features,
    )
    import io

    buf = io.StringIO()
    for s in ds.samples:
        obj = tasks.sample_to_obj(s)
        if s.kind == tasks.SET:
            obj["task"] = ds.task
        buf.write(json.dumps(obj) + "\n")
    rep.atomic_write_text(path, buf.getvalue())
    manifest = {
        "task": args.task,
        "split": args.split,
        "structure": args.structure,
        "seed": args.seed,
        "count": count,
        "features": args.features,
        "build_id": bench.build_id(),
    }
    rep.atomic_write_text(manifest_path, json.dumps(manifest, sort_keys=True) + "\n")
    print(f"wrote {len(ds.samples)} samples to {path}")
    return 0


# -- train / eval ----------------------------------------------------------


def _load_train_config(args, preset) -> tr.TrainConfig:
    if args.config:
        with open(args.config) as fh:
            obj = json.load(fh)
        try:
            cfg = tr.TrainConfig.from_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"bad train config {args.config}: {exc}") from exc
        return cfg
    if not args.task:
        raise CliError("need --config or --task")
    return bench.make_train_config(
        args.task, agg=args.agg, readout=args.readout, pool=args.pool,
        mode=args.mode, preset=preset, seed=args.seed,
        activation=args.activation, set_depth=args.set_depth,
        feature_mode=args.features,
    )


def _datasets_for(cfg, args, preset):
    if args.data:
        def load(split, structure):
            path = _dataset_path(args.data, cfg.task, split, structure)
            if not os.path.exists(path):
                raise CliError(f"missing dataset file {path}")
            return mdl.prepare(tasks.load_dataset(path, cfg.task, split=split))

        return (load(tasks.TRAIN, args.train_structure),
                load(tasks.VAL, args.train_structure),
                load(tasks.TEST, args.structure))
    return bench.get_datasets(cfg.task, args.structure, preset, args.data_seed,
                              feature_mode=args.features,
                              train_structure=args.train_structure)


def cmd_train(args) -> int:
    preset = bench.load_preset(args.preset)
    cfg = _load_train_config(args, preset)
    out = _ensure_out(args.out)
    train_p, val_p, test_p = _datasets_for(cfg, args, preset)
    import time

    t0 = time.time()
    result = tr.train(cfg, train_p, val_p, test_p)
    wall = time.time() - t0
    run_id = bench.run_id_for(cfg, args.structure)
    runs_dir = _ensure_out(os.path.join(out, "runs"))
    rep.atomic_write_text(os.path.join(runs_dir, f"{run_id}.json"),
                          result.to_json() + "\n")
    row = bench.csv_row(cfg, args.structure, result, result.test_metrics, wall)
    rep.append_csv_rows(os.path.join(out, "metrics.csv"), [row])
    print(json.dumps({"run_id": run_id, **result.test_metrics,
                      "best_epoch": result.best_epoch}))
    return 0


def cmd_eval(args) -> int:
    model = mdl.load_checkpoint(args.checkpoint)
    task = model.cfg.task
    if args.data:
        ds = tasks.load_dataset(args.data, task, split=args.split)
        preps = mdl.prepare(ds)
    else:
        preset = bench.load_preset(args.preset)
        preps = bench.get_split(task, args.split, args.structure, preset,
                                args.data_seed)
    metrics = tr.evaluate(model, task, preps)
    print(json.dumps(metrics))
    if args.out:
        out = _ensure_out(args.out)
        row = {
            "run_id": f"eval-{os.path.basename(args.checkpoint)}-{args.structure}",
            "build_id": bench.build_id(),
            "task": task,
            "structure": args.structure,
            "agg": model.cfg.pool if tasks.task_kind(task) == tasks.SET else model.cfg.agg,
            "readout": model.cfg.readout if tasks.task_kind(task) == tasks.GRAPH else "",
            "mode": model.cfg.gnp_mode,
            "seed": "",
            "best_epoch": "",
            "val_loss": "",
            "test_mape": metrics.get("mape", ""),
            "test_mae": metrics.get("mae", ""),
            "wall_seconds": 0.0,
        }
        rep.append_csv_rows(os.path.join(out, "metrics.csv"), [row])
    return 0


# -- sweep -------------------------------------------------------------------


def cmd_sweep(args) -> int:
    with open(args.config) as fh:
        obj = json.load(fh)
    if "base" not in obj or "grid" not in obj:
        raise CliError('sweep config must have "base" and "grid" fields')
    try:
        base = tr.TrainConfig.from_dict(obj["base"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad sweep base config: {exc}") from exc
    preset = bench.load_preset(args.preset)
    configs = tr.sweep_grid(base, obj["grid"])
    out = _ensure_out(args.out)
    _, rows = bench.run_cells(configs, preset, args.structure, args.data_seed,
                              (), jobs=args.jobs)
    rep.append_csv_rows(os.path.join(out, "metrics.csv"), rows)
    best = min(rows, key=lambda r: r["val_loss"])
    print(json.dumps({"runs": len(rows), "best_run": best["run_id"],
                      "best_val_loss": best["val_loss"]}))
    return 0


# -- matrix --------------------------------------------------------------------


def cmd_matrix(args) -> int:
    preset = bench.load_preset(args.preset)
    seeds = args.seeds if args.seeds else preset["seeds"]
    structures = args.structures.split(",") if args.structures else [gg.ER]
    out = _ensure_out(args.out)
    cells = bench.matrix_cells(args.task)
    cfgs = []
    for cell in cells:
        for seed in range(seeds):
            cfgs.append(bench.make_train_config(
                args.task, agg=cell.get("agg"), readout=cell.get("readout"),
                pool=cell.get("pool"), preset=preset, seed=seed,
            ))
    extra = [s for s in structures if s != gg.ER]
    _, rows = bench.run_cells(cfgs, preset, gg.ER, args.data_seed, tuple(extra),
                              jobs=args.jobs)
    rep.append_csv_rows(os.path.join(out, "metrics.csv"), rows)
    _write_matrix_report(args.task, rows, out)
    print(f"matrix complete: {len(rows)} rows -> {out}")
    return 0


def _combo_label(row):
    if row["readout"]:
        return f"{row['agg']}/{row['readout']}"
    return row["agg"]


def _write_matrix_report(task, rows, out) -> None:
    kind = tasks.task_kind(task)
    by_combo: dict = {}
    for r in rows:
        key = (r["structure"], _combo_label(r))
        by_combo.setdefault(key, []).append(float(r["test_mape"] or r["test_mae"]))
    structures = sorted({s for s, _ in by_combo})
    lines = []
    for st in structures:
        combos = {c: rep.mean_std(v) for (s, c), v in by_combo.items() if s == st}
        if kind == tasks.GRAPH:
            headers = ["readout \\ agg"] + list(pl.BASELINES)
            grid = []
            for ro in pl.BASELINES:
                row = [ro]
                for ag in pl.BASELINES:
                    m, s = combos.get(f"{ag}/{ro}", (float("nan"), 0.0))
                    row.append(rep.fmt_pm(m, s, 1))
                grid.append(row)
            gm, gs = combos.get("gnp/gnp", (float("nan"), 0.0))
            grid.append(["gnp (agg+readout)", rep.fmt_pm(gm, gs, 1), "", "", ""])
            lines.append(rep.render_table(headers, grid,
                                          title=f"{task} on {st}: test MAPE"))
            values = [
                [combos.get(f"{ag}/{ro}", (float("nan"), 0.0))[0] for ag in pl.BASELINES]
                for ro in pl.BASELINES
            ]
            rep.save_matrix_heatmap(
                list(pl.BASELINES), list(pl.BASELINES), values,
                os.path.join(out, f"matrix_{task}_{st}.png"),
                title=f"{task} on {st} (gnp: {rep.fmt_pm(gm, gs, 1)})",
            )
        else:
            metric = "test MAE" if kind == tasks.NODE else "test MAPE"
            headers = ["pooling", metric]
            grid = [[c, rep.fmt_pm(*combos[c])] for c in sorted(combos)]
            lines.append(rep.render_table(headers, grid, title=f"{task} on {st}"))
            rep.save_metric_bars(
                {c: combos[c] for c in sorted(combos)},
                os.path.join(out, f"matrix_{task}_{st}.png"),
                title=f"{task} on {st}", ylabel=metric,
            )
        lines.append("")
    rep.atomic_write_text(os.path.join(out, f"matrix_{task}.txt"), "\n".join(lines))


# -- trajectory -------------------------------------------------------------------


def cmd_trajectory(args) -> int:
    paths = []
    for pattern in args.runs:
        paths.extend(sorted(glob.glob(pattern)))
    if not paths:
        raise CliError("no run files matched")
    out = _ensure_out(args.out)
    header = "run_id,epoch,gnp_instance,p_plus,p_minus,q_plus,q_minus\n"
    lines = [header]
    for path in paths:
        with open(path) as fh:
            result = tr.RunResult.from_json(fh.read())
        run_id = os.path.basename(path).rsplit(".", 1)[0]
        if not result.pq_trajectory:
            continue
        for name in sorted(result.pq_trajectory):
            for epoch, point in enumerate(result.pq_trajectory[name]):
                lines.append(
                    f"{run_id},{epoch},{name},{point['p_plus']!r},"
                    f"{point['p_minus']!r},{point['q_plus']!r},{point['q_minus']!r}\n"
                )
        rep.save_trajectory_figure(
            result.pq_trajectory,
            os.path.join(out, f"{run_id}_trajectory.png"),
            title=run_id,
        )
    rep.atomic_write_text(os.path.join(out, "trajectory.csv"), "".join(lines))
    print(f"trajectory export: {len(paths)} runs -> {out}")
    return 0


# -- ablation ---------------------------------------------------------------------


def cmd_ablation(args) -> int:
    preset = bench.load_preset(args.preset)
    seeds = args.seeds if args.seeds else preset["seeds"]
    modes = args.modes.split(",")
    for m in modes:
        if m not in pl.MODES:
            raise CliError(f"unknown mode {m!r}")
    out = _ensure_out(args.out)
    kind = tasks.task_kind(args.task)
    cfgs = []
    for mode in modes:
        for seed in range(seeds):
            kw = {"mode": mode}
            if kind == tasks.GRAPH:
                kw.update(agg=pl.GNP, readout=pl.GNP)
            elif kind == tasks.NODE:
                kw.update(agg=pl.GNP)
            else:
                kw.update(pool=pl.GNP)
            cfgs.append(bench.make_train_config(args.task, preset=preset,
                                                seed=seed, **kw))
    _, rows = bench.run_cells(cfgs, preset, gg.ER, args.data_seed, (),
                              jobs=args.jobs)
    rep.append_csv_rows(os.path.join(out, "metrics.csv"), rows)
    metric_key = "test_mae" if kind == tasks.NODE else "test_mape"
    by_mode: dict = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(float(r[metric_key]))
    table_rows = [
        [mode, rep.fmt_pm(*rep.mean_std(vals), 3)] for mode, vals in sorted(by_mode.items())
    ]
    text = rep.render_table(["mode", metric_key], table_rows,
                            title=f"{args.task} ablation over {seeds} seeds")
    rep.atomic_write_text(os.path.join(out, f"ablation_{args.task}.txt"), text)
    rep.save_metric_bars(
        {m: rep.mean_std(v) for m, v in sorted(by_mode.items())},
        os.path.join(out, f"ablation_{args.task}.png"),
        title=f"{args.task} ablation", ylabel=metric_key,
    )
    print(text)
    return 0


# -- report -----------------------------------------------------------------------


def cmd_report(args) -> int:
    rows = rep.read_csv(args.csv)
    if not rows:
        raise CliError(f"no rows in {args.csv}")
    out = _ensure_out(args.out)
    groups: dict = {}
    for r in rows:
        key = (r["task"], r["structure"], _combo_label(r), r["mode"])
        metric = r["test_mape"] if r["test_mape"] != "" else r["test_mae"]
        groups.setdefault(key, []).append(float(metric))
    header = ["task", "structure", "pooling", "mode", "n", "metric_mean", "metric_std"]
    table = []
    csv_lines = [",".join(header) + "\n"]
    for key in sorted(groups):
        m, s = rep.mean_std(groups[key])
        table.append(list(key) + [len(groups[key]), f"{m:.4f}", f"{s:.4f}"])
        csv_lines.append(",".join(map(str, table[-1])) + "\n")
    text = rep.render_table(header, table, title=f"aggregated metrics ({args.csv})")
    rep.atomic_write_text(os.path.join(out, "report.txt"), text)
    rep.atomic_write_text(os.path.join(out, "report.csv"), "".join(csv_lines))
    for task in sorted({k[0] for k in groups}):
        bars = {
            f"{k[2]}@{k[1]}" + (f" [{k[3]}]" if k[3] != pl.FULL else ""): rep.mean_std(v)
            for k, v in groups.items() if k[0] == task
        }
        rep.save_metric_bars(bars, os.path.join(out, f"report_{task}.png"),
                             title=task)
    print(text)
    return 0


# -- parser -----------------------------------------------------------------------


def _add_common(p, data=True):
    p.add_argument("--preset", default="desk", help="preset name or JSON path")
    p.add_argument("--data-seed", type=int, default=bench.DEFAULT_DATA_SEED)
    p.add_argument("--structure", default=gg.ER, choices=gg.FAMILIES)
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnpbench",
                                 description="norm-pooling extrapolation benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset split to JSON Lines")
    g.add_argument("--task", required=True, choices=tasks.ALL_TASKS)
    g.add_argument("--split", required=True, choices=tasks.SPLITS)
    g.add_argument("--structure", default=gg.ER, choices=gg.FAMILIES)
    g.add_argument("--seed", type=int, default=bench.DEFAULT_DATA_SEED)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--features", default="const", choices=["const", "uniform"])
    g.add_argument("--preset", default="desk")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--task", choices=tasks.ALL_TASKS)
    t.add_argument("--agg", choices=pl.POOL_KINDS)
    t.add_argument("--readout", choices=pl.POOL_KINDS)
    t.add_argument("--pool", choices=pl.POOL_KINDS)
    t.add_argument("--mode", default=pl.FULL, choices=pl.MODES)
    t.add_argument("--activation", default=mdl.RELU, choices=mdl.ACTIVATIONS)
    t.add_argument("--set-depth", default=mdl.BASIC, choices=[mdl.BASIC, mdl.DEEP])
    t.add_argument("--features", default="const", choices=["const", "uniform"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", help="directory of generated dataset files")
    t.add_argument("--train-structure", default=gg.ER, choices=gg.FAMILIES,
                   help="graph family for train/val (cross-structure studies)")
    t.add_argument("--out", required=True)
    _add_common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default=tasks.TEST, choices=tasks.SPLITS)
    e.add_argument("--data", help="dataset JSONL file")
    e.add_argument("--out")
    _add_common(e)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="grid search from a sweep config file")
    s.add_argument("--config", required=True, help='JSON {"base": ..., "grid": ...}')
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(fn=cmd_sweep)

    m = sub.add_parser("matrix", help="pooling-combination matrix for a task")
    m.add_argument("--task", required=True, choices=tasks.ALL_TASKS)
    m.add_argument("--seeds", type=int)
    m.add_argument("--structures", help="comma list of extra test structures")
    m.add_argument("--out", required=True)
    _add_common(m)
    m.set_defaults(fn=cmd_matrix)

    tj = sub.add_parser("trajectory", help="export per-epoch exponent trajectories")
    tj.add_argument("--runs", nargs="+", required=True, help="RunResult JSON globs")
    tj.add_argument("--out", required=True)
    tj.set_defaults(fn=cmd_trajectory)

    ab = sub.add_parser("ablation", help="compare pooling modes on one task")
    ab.add_argument("--task", required=True, choices=tasks.ALL_TASKS)
    ab.add_argument("--modes", default=f"{pl.FULL},{pl.PLUS_ONLY}")
    ab.add_argument("--seeds", type=int)
    ab.add_argument("--out", required=True)
    _add_common(ab)
    ab.set_defaults(fn=cmd_ablation)

    r = sub.add_parser("report", help="aggregate a metrics CSV into tables/figures")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, FileNotFoundError, ValueError, tr.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
