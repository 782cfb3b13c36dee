"""CSV emission: per-run metrics and the strategy comparison table."""
from __future__ import annotations

import csv
import io

import numpy as np

FLOAT_FMT = "%.6g"


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % value
    return str(value)


def run_id(strategy, seed) -> str:
    return f"{strategy}-seed{seed}"


def metrics_header(sub_model_names, term_names) -> list[str]:
    return ["run_id", "strategy", "seed", "epoch", "lr", *sub_model_names, "avg", "loss", *term_names]


def metrics_rows(history, strategy, seed, sub_model_names, term_names):
    """History rows from :func:`flexdistill.trainer.train` as ordered lists of cells."""
    rid = run_id(strategy, seed)
    out = []
    for row in sorted(history, key=lambda r: r["epoch"]):
        cells = [rid, strategy, seed, row["epoch"], row["lr"]]
        cells += [row[k] for k in sub_model_names]
        cells += [row["avg"], row["loss"]]
        cells += [row[k] for k in term_names]
        out.append(cells)
    return out


def _write_csv(path, header, rows):
    # newline="" lets the csv module emit RFC 4180 CRLF line endings untouched
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(c) for c in r])


def write_metrics(path, history, strategy, seed, sub_model_names, term_names):
    _write_csv(path, metrics_header(sub_model_names, term_names),
               metrics_rows(history, strategy, seed, sub_model_names, term_names))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def comparison_table(results: dict, sub_model_names):
    """Rows of the strategy comparison.

    ``results`` maps strategy -> list over seeds of per-sub-model accuracy
    lists (taken at each run's best epoch). Returns ``(header, rows, stats)``
    where ``stats[row_name][strategy] = (mean, std)``.
    """
    strategies = list(results)
    header = ["sub_model", *strategies, "best"]
    row_names = [*sub_model_names, "Avg"]
    stats = {name: {} for name in row_names}
    for s in strategies:
        acc = np.asarray(results[s], dtype=np.float64)  # seeds x sub-models
        for k, name in enumerate(sub_model_names):
            stats[name][s] = mean_std(acc[:, k])
        stats["Avg"][s] = mean_std(acc.mean(axis=1))
    rows = []
    for name in row_names:
        cells = [name]
        printed = {}
        for s in strategies:
            m, sd = stats[name][s]
            printed[s] = float(FLOAT_FMT % m)
            cells.append(f"{FLOAT_FMT % m}±{FLOAT_FMT % sd}")
        top = max(printed.values())
        cells.append(" ".join(s for s in strategies if printed[s] == top))
        rows.append(cells)
    return header, rows, stats


def write_comparison(path, results, sub_model_names):
    header, rows, stats = comparison_table(results, sub_model_names)
    _write_csv(path, header, rows)
    return stats


def verdict(stats, challenger="TAM", baseline="NONE") -> str | None:
    """One-sentence statement comparing average accuracy of two strategies."""
    avg = stats["Avg"]
    if challenger not in avg or baseline not in avg:
        return None
    (mc, sc), (mb, sb) = avg[challenger], avg[baseline]
    holds = mc >= mb
    return (f"{challenger} avg accuracy {FLOAT_FMT % mc}±{FLOAT_FMT % sc} vs {baseline} "
            f"{FLOAT_FMT % mb}±{FLOAT_FMT % sb}: {challenger} >= {baseline} on average: "
            f"{'yes' if holds else 'no'} (difference {mc - mb:+.4f})")


def format_table(header, rows) -> str:
    """Plain aligned text rendering of a table, for terminals."""
    buf = io.StringIO()
    widths = [max(len(str(r[k])) for r in [header, *rows]) for k in range(len(header))]
    for r in [header, *rows]:
        buf.write("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    return buf.getvalue()
