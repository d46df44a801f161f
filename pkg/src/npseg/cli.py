"""``npseg`` command line: gen, train, cluster, grid, eval.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import anp, datagen
from .cluster import DpConfig, InfeasibleConfig, iterate, np_affiliation, physics_affiliation
from .config import ConfigError, load_config, parse_config
from .evalgrid import ari, confusion, emit_scatter, grid_search, select_combos

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


def stream_seed(master: int, name: str) -> int:
    """Named sub-stream of the master seed, stable across unrelated changes."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(master), tag]).generate_state(1, dtype=np.uint64)[0])


def stream_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name))


def _write_json(obj, path: Path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config(args, **flag_overrides):
    overrides = {"seed": args.seed, "threads": getattr(args, "threads", None), **flag_overrides}
    cfg = load_config(args.config, overrides)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg, "--set")
    return cfg


def _provider(spec: str, cfg):
    kind, _, arg = spec.partition(":")
    if kind == "physics":
        eq = arg.upper() or "WS"
        return physics_affiliation(
            eq, seed=stream_seed(cfg.seed, "provider"), temperature_c=cfg.temperature,
            b_coeff=cfg.b_override, n_starts=cfg.fit_restarts, max_iter=cfg.fit_iters,
        )
    if kind == "anp":
        if not arg:
            raise ConfigError("anp provider needs a checkpoint path: anp:<ckpt>")
        weights = anp.load_checkpoint(arg)
        return np_affiliation(weights, cfg.context_cap, stream_seed(cfg.seed, "provider"), cfg.mc_samples)
    raise ConfigError(f"unknown provider {spec!r}; use anp:<ckpt> or physics:<WS|SGS|ARCHIE>")


def _dp_config(args, cfg, c, n, stream) -> DpConfig:
    return DpConfig(c=c, n=n, l_min=cfg.l_min, restarts=cfg.restarts, max_iters=cfg.max_iters,
                    seed=stream_seed(cfg.seed, stream))


def _series(path) -> datagen.LabeledSeries:
    series = datagen.LabeledSeries.from_csv(path)
    try:
        series.validate()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return series


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    rng = stream_rng(cfg.seed, "datagen")
    if (args.preset is None) == (args.random is None):
        raise ConfigError("give exactly one of --preset NAME or --random K")
    if args.preset is not None:
        series = datagen.build_preset(
            args.preset, noise=cfg.noise(), rng=rng, ranges=cfg.ranges(),
            block_length=cfg.block_length, n_blocks=args.blocks, smooth_width=cfg.smooth_width,
        )
    else:
        if args.random < 1:
            raise ConfigError("--random needs K >= 1")
        series = datagen.build_random(args.random, rng, cfg.noise(), cfg.ranges(), cfg.block_length, args.blocks)
    series.meta["seed"] = cfg.seed
    out = Path(args.out)
    csv_path, side = datagen.write_series(series, out)
    if args.figure:
        from .report import plot_label_strips

        plot_label_strips(series.depth, {"truth": series.labels}, out.with_suffix(".svg"))
    labels = sorted(set(series.labels.tolist()))
    print(f"wrote {csv_path} and {side}: {len(series)} points, labels {labels}, {len(series.blocks)} blocks")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs, sets_per_epoch=args.sets_per_epoch, lr=args.lr)
    tcfg = anp.TrainConfig(
        epochs=cfg.epochs, sets_per_epoch=cfg.sets_per_epoch, lr=cfg.lr, n_points=cfg.n_points,
        context_range=(cfg.context_min, cfg.context_max), noise=cfg.noise(), ranges=cfg.ranges(),
    )
    print(f"ANP parameters: {anp.count_parameters()}")
    out = Path(args.out)

    def progress(epoch, row):
        if not args.quiet:
            print(f"epoch {epoch:4d}  nll {row['nll']:.5f}  kl {row['kl']:.5f}", flush=True)

    status = EXIT_OK
    try:
        result = anp.train(tcfg, stream_rng(cfg.seed, "train"), progress)
        weights, curve = result.weights, result.curve
    except anp.TrainingDiverged as exc:
        print(f"training diverged: {exc}; saving last good weights", file=sys.stderr)
        weights, curve, status = exc.last_good, exc.curve, EXIT_DIVERGED
    anp.save_checkpoint(weights, out)
    curve_path = out.with_name(out.name + ".curve.csv")
    with open(curve_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "nll", "kl", "loss"])
        for row in curve:
            w.writerow([row["epoch"], repr(row["nll"]), repr(row["kl"]), repr(row["loss"])])
    if curve:
        from .report import plot_loss_curve

        plot_loss_curve(curve, out.with_name(out.name + ".curve.svg"))
    print(f"wrote {out} and {curve_path}")
    return status


def _parse_cells(text: str) -> list:
    cells = []
    for item in text.split(","):
        c, sep, n = item.strip().partition(":")
        if not sep:
            raise ConfigError(f"bad cell {item!r}; expected C:N")
        cells.append((int(c), int(n)))
    return cells


def cmd_cluster(args) -> int:
    cfg = _config(args)
    series = _series(args.series)
    provider = _provider(args.provider, cfg)
    dp = _dp_config(args, cfg, args.c, args.n, "cluster")
    res = iterate(series.x, series.y, provider, dp)
    record = {"dataset": Path(args.series).name, "provider": args.provider, **res.to_record()}
    line = f"cost_per_point {res.cost_per_point:.10g}"
    if series.labels is not None:
        record["ari"] = ari(res.pattern.labels, series.labels)
        line += f"  ARI {record['ari']:.4f}"
    _write_json(record, Path(args.out))
    print(line)
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _config(args, eps_rel=args.eps_rel)
    series = _series(args.series)
    provider = _provider(args.provider, cfg)
    base = _dp_config(args, cfg, 1, 0, "grid")
    result = grid_search(
        series.x, series.y, provider, range(args.c_min, args.c_max + 1), range(args.n_min, args.n_max + 1),
        base, parallelism=cfg.thread_count(),
    )
    explicit = _parse_cells(args.select_cells) if args.select_cells else None
    sel = select_combos(result.cells, cfg.eps_rel, explicit)
    out = Path(args.out)
    stem = out.with_suffix("")
    emit_scatter(result.cells, stem.with_name(stem.name + "_scatter"), sel)

    def summary(cell):
        d = {"c": cell.c, "n": cell.n, "cost_per_point": cell.cost_per_point,
             "pattern": cell.pattern.labels.tolist()}
        if series.labels is not None:
            d["ari"] = ari(cell.pattern.labels, series.labels)
        return d

    report = {
        "dataset": Path(args.series).name,
        "provider": args.provider,
        "eps_rel": cfg.eps_rel,
        "cells": [cell.to_record() for cell in result.cells],
        "skipped": [{"c": c, "n": n, "reason": why} for c, n, why in result.skipped],
        "selected": [[cell.c, cell.n] for cell in sel.selected],
        "most_common": {**summary(sel.most_common), "class_size": sel.class_size},
        "lowest_cost": summary(sel.lowest_cost),
    }
    if series.labels is not None:
        from .report import plot_confusion, plot_label_strips

        for key in ("most_common", "lowest_cost"):
            conf = confusion(getattr(sel, key).pattern.labels, series.labels, align=True)
            report[f"confusion_{key}"] = {"truth_labels": conf.truth_labels, "pred_labels": conf.pred_labels,
                                          "counts": conf.counts.tolist()}
            plot_confusion(conf, stem.with_name(f"{stem.name}_confusion_{key}.svg"), key.replace("_", " "))
        plot_label_strips(series.depth, {"truth": series.labels,
                                         "most common": sel.most_common.pattern.labels,
                                         "lowest cost": sel.lowest_cost.pattern.labels},
                          stem.with_name(stem.name + "_patterns.svg"))
    _write_json(report, out)
    for key in ("most_common", "lowest_cost"):
        r = report[key]
        msg = f"{key}: C={r['c']} N={r['n']} cost_per_point {r['cost_per_point']:.10g}"
        if "ari" in r:
            msg += f"  ARI {r['ari']:.4f}"
        print(msg)
    print(f"{len(result.cells)} cells, {len(result.skipped)} skipped; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.pred, encoding="utf-8") as fh:
        pred = json.load(fh)
    if "labels" in pred:
        labels = pred["labels"]
    elif args.which in pred:
        labels = pred[args.which]["pattern"]
    else:
        raise ConfigError(f"{args.pred}: no 'labels' or '{args.which}' entry")
    truth = datagen.LabeledSeries.from_csv(args.truth)
    if truth.labels is None:
        raise ConfigError(f"{args.truth}: no label column")
    if len(labels) != len(truth):
        raise ConfigError(f"length mismatch: prediction {len(labels)} vs truth {len(truth)}")
    score = ari(labels, truth.labels)
    conf = confusion(labels, truth.labels, align=True)
    print(f"ARI {score:.6f}")
    if args.out:
        conf.to_csv(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npseg", description="Segmentation clustering of well-log series.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=False):
        sp.add_argument("--seed", type=int, default=None, help="master seed (default from config, else 0)")
        sp.add_argument("--config", default=None, help="key=value config file (default $NPSEG_CONFIG)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker processes; 1 = serial")

    g = sub.add_parser("gen", help="generate a labeled synthetic series")
    g.add_argument("--preset", default=None, help=f"one of {', '.join(datagen.PRESET_NAMES)}")
    g.add_argument("--random", type=int, default=None, metavar="K", help="K random parameter sets")
    g.add_argument("--blocks", type=int, default=None, help="number of blocks (default K + K//2)")
    g.add_argument("--figure", action="store_true", help="also write a label strip SVG")
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the ANP on random realizations")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--sets-per-epoch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True, help="checkpoint path")
    common(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cluster", help="segment one series at fixed C and N")
    c.add_argument("series")
    c.add_argument("--provider", required=True, help="anp:<ckpt> or physics:<WS|SGS|ARCHIE>")
    c.add_argument("--c", type=int, required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--out", required=True)
    common(c)
    c.set_defaults(func=cmd_cluster)

    gr = sub.add_parser("grid", help="grid search over C and N")
    gr.add_argument("series")
    gr.add_argument("--provider", required=True)
    gr.add_argument("--c-min", type=int, required=True)
    gr.add_argument("--c-max", type=int, required=True)
    gr.add_argument("--n-min", type=int, required=True)
    gr.add_argument("--n-max", type=int, required=True)
    gr.add_argument("--eps-rel", type=float, default=None)
    gr.add_argument("--select-cells", default=None, metavar="C:N,...", help="explicit selection, e.g. 6:8,7:8")
    gr.add_argument("--out", required=True, help="report JSON path")
    common(gr, threads=True)
    gr.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", help="score a prediction against ground truth")
    e.add_argument("pred", help="cluster result JSON or grid report JSON")
    e.add_argument("truth", help="series CSV with a label column")
    e.add_argument("--which", default="lowest_cost", choices=["lowest_cost", "most_common"])
    e.add_argument("--out", default=None, help="confusion matrix CSV")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except anp.CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InfeasibleConfig, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
