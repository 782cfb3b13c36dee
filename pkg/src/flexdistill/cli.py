"""``flexdistill`` command line: train, compare, gradcheck, eval.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import config as C
from .errors import ConfigError, FlexDistillError
from .gradcheck import check_flexible_loss
from .losses import Strategy, one_hot
from .params import load_checkpoint, save_checkpoint
from .report import run_id, verdict, write_comparison, write_metrics, format_table, comparison_table
from .trainer import evaluate, loss_term_names, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-4
GRADCHECK_BATCH = 8

log = logging.getLogger("flexdistill")


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_training(cfg: dict, out_dir: str) -> dict:
    """Train one configuration into ``out_dir``; return a summary of the best epoch."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = copy.deepcopy(cfg)
    cfg["out"] = os.path.abspath(out_dir)
    _dump_json(cfg, os.path.join(out_dir, "config.resolved.json"))
    train_set, val_set = C.build_data(cfg)
    model = C.build_model(cfg, train_set.input_shape, train_set.num_classes)
    tcfg, dcfg = C.train_config(cfg), C.distill_config(cfg)
    result = train(model, train_set, val_set, tcfg, dcfg)
    names = model.sub_model_names
    strategy, seed = dcfg.strategy.value, tcfg.seed
    write_metrics(os.path.join(out_dir, "metrics.csv"), result.history, strategy, seed,
                  names, loss_term_names(model.num_submodels, dcfg.strategy))
    save_checkpoint(result.best.state, os.path.join(out_dir, "best.ckpt"),
                    trainable={p.name: p.trainable for p in model.store})
    return {"run_id": run_id(strategy, seed), "strategy": strategy, "seed": seed,
            "best_epoch": result.best.epoch, "sub_models": names,
            "accuracies": result.best.accuracies, "avg": result.best.avg_accuracy,
            "param_counts": [model.param_count(i) for i in range(1, model.num_submodels + 1)]}


def _load(args) -> dict:
    cfg = C.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    t0 = time.perf_counter()
    summary = run_training(cfg, cfg["out"])
    summary["seconds"] = round(time.perf_counter() - t0, 3)
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"{summary['run_id']}: best epoch {summary['best_epoch']}")
        for name, acc in zip(summary["sub_models"], summary["accuracies"]):
            print(f"  {name}: {acc:.4f}")
        print(f"  avg: {summary['avg']:.4f}")
        print(f"outputs in {cfg['out']}")
    return EXIT_OK


def _split_list(values, cast=str):
    out = []
    for v in values or []:
        out += [cast(p) for p in str(v).split(",") if p.strip()]
    return out


def _cell(args):
    cfg, out_dir = args
    return run_training(cfg, out_dir)


def cmd_compare(args) -> int:
    cfg = _load(args)
    try:
        strategies = [Strategy(s.upper()).value for s in _split_list(args.strategies)] or [s.value for s in Strategy]
        seeds = _split_list(args.seeds, int) or [cfg["train"]["seed"]]
    except ValueError as e:
        raise ConfigError(f"bad --strategies/--seeds value: {e}") from None
    if len(set(strategies)) != len(strategies) or len(set(seeds)) != len(seeds):
        raise ConfigError("--strategies and --seeds must not repeat entries")
    out = cfg["out"]
    cells = []
    for s in strategies:
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c["distill"]["strategy"] = s
            c["train"]["seed"] = seed
            C.resolve({k: v for k, v in c.items()})  # fail fast before any training
            cells.append((c, os.path.join(out, s, f"seed{seed}")))
    workers = max(1, int(os.environ.get("FLEXDISTILL_THREADS", "1") or 1))
    t0 = time.perf_counter()
    if workers == 1 or len(cells) == 1:
        summaries = [_cell(c) for c in cells]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(cells))) as ex:
            summaries = list(ex.map(_cell, cells))
    names = summaries[0]["sub_models"]
    results = {s: [r["accuracies"] for r in summaries if r["strategy"] == s] for s in strategies}
    stats = write_comparison(os.path.join(out, "comparison.csv"), results, names)
    header, rows, _ = comparison_table(results, names)
    lines = [format_table(header, rows)]
    v = verdict(stats)
    if v:
        lines.append(v + "\n")
    lines.append(f"{len(cells)} runs in {time.perf_counter() - t0:.1f}s\n")
    text = "".join(lines)
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    if args.json:
        print(json.dumps({"strategies": strategies, "seeds": seeds, "runs": summaries,
                          "avg": {s: stats["Avg"][s] for s in strategies}, "verdict": v}))
    else:
        print(text, end="")
    return EXIT_OK


def tiny_config(cfg: dict) -> dict:
    """Shrink the configured architecture to a few units per layer, keeping its sub-model count."""
    cfg = copy.deepcopy(cfg)
    m = cfg["model"]
    conv = m["kind"] == "conv"
    m["width"] = 4 if conv else 6
    m["channels"] = [4 if conv else 8] * len(m["channels"])
    return cfg


def gradcheck_inputs(cfg: dict, batch: int = GRADCHECK_BATCH):
    """A fixed mini-batch of the configured data for gradient checking."""
    train_set, _ = C.build_data(cfg)
    pick = np.random.Generator(np.random.PCG64(cfg["train"]["seed"])).permutation(len(train_set))[:batch]
    x = train_set.inputs[np.sort(pick)]
    y = one_hot(train_set.labels[np.sort(pick)], train_set.num_classes)
    return x, y, train_set.input_shape, train_set.num_classes


def cmd_gradcheck(args) -> int:
    cfg = tiny_config(_load(args))
    x, y, shape, classes = gradcheck_inputs(cfg)
    base = C.distill_config(cfg)
    ok = True
    report = []
    for s in Strategy:
        model = C.build_model(cfg, shape, classes)
        if s is not Strategy.NONE and model.num_submodels < 2:
            report.append({"strategy": s.value, "skipped": "needs at least 2 sub-models"})
            continue
        t0 = time.perf_counter()
        res = check_flexible_loss(model, x, y, dataclasses.replace(base, strategy=s))
        entry = {"strategy": s.value, "max_rel_error": res.max_error, "param": res.worst_param,
                 "index": [int(i) for i in res.worst_index], "analytic": res.analytic,
                 "numeric": res.numeric, "seconds": round(time.perf_counter() - t0, 3)}
        entry["pass"] = res.max_error < GRADCHECK_TOL
        ok &= entry["pass"]
        report.append(entry)
    if args.json:
        print(json.dumps({"pass": ok, "tolerance": GRADCHECK_TOL, "results": report}))
    else:
        for e in report:
            if "skipped" in e:
                print(f"{e['strategy']:<5} skipped: {e['skipped']}")
                continue
            line = f"{e['strategy']:<5} max_rel_error={e['max_rel_error']:.3e}"
            if not e["pass"]:
                line += (f"  FAIL at {e['param']}{tuple(e['index'])}: "
                         f"analytic={e['analytic']:.10g} numeric={e['numeric']:.10g}")
            print(line)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_eval(args) -> int:
    cfg_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                           "config.resolved.json")
    cfg = C.load_config(cfg_path)
    train_set, val_set = C.build_data(cfg)
    data = val_set if args.split == "val" else train_set
    model = C.build_model(cfg, train_set.input_shape, train_set.num_classes)
    try:
        state = load_checkpoint(args.checkpoint)
    except OSError as e:
        raise FlexDistillError(f"cannot read checkpoint {args.checkpoint}: {e.strerror}") from None
    model.store.load_state(state)
    which = "all" if args.sub_model == "all" else int(args.sub_model)
    idx = list(range(1, model.num_submodels + 1)) if which == "all" else [which]
    if which != "all":
        model._check_index(which)
    accs = evaluate(model, data, which)
    rows = [{"sub_model": model.sub_model_names[i - 1], "accuracy": a, "param_count": model.param_count(i)}
            for i, a in zip(idx, accs)]
    if args.json:
        print(json.dumps({"checkpoint": args.checkpoint, "split": args.split, "results": rows}))
    else:
        for r in rows:
            print(f"{r['sub_model']}: accuracy {r['accuracy']:.6g}  params {r['param_count']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="train every (strategy, seed) cell and tabulate")
    c.add_argument("--config", required=True)
    c.add_argument("--strategies", nargs="+", help="e.g. NONE IPKD TA1 TAM (comma lists accepted)")
    c.add_argument("--seeds", nargs="+", help="e.g. 0 1 2 (comma lists accepted)")
    c.add_argument("--out")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of a tiny instance, every strategy")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--json", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="defaults to config.resolved.json next to the checkpoint")
    e.add_argument("--split", choices=["val", "train"], default="val")
    e.add_argument("--sub-model", default="all", help="1-based index or 'all'")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlexDistillError, OSError, IndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
