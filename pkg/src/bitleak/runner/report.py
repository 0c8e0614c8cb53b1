"""Cross-seed aggregation of a finished run into tables of figure data.

Files written to ``<out>/report/``:

``aggregate.csv``
    median and interquartile range of every metric per (method, bits, mode)
``fig1_tradeoff.csv``
    median accuracy against median TPR@0.1%FPR across precisions
``fig2_accuracy_vs_bits.csv`` / ``fig3_tpr_vs_bits.csv``
    per-method curves over bit-widths
``fig5_decoupled.csv``
    uniform and last-layer-decoupled maps side by side
``fig7_b158_scatter.csv``
    one (accuracy, TPR) point per seed and method at B158, first attack mode
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..errors import IncompleteRunError
from ..quantgrid import BitWidth
from .config import ExperimentConfig
from .pipeline import _write_atomic, load_manifest, missing_cells, summary_rows

METRICS = ("accuracy", "auroc", "log_auroc", "tpr_at_0.001")
# highest precision first
BIT_ORDER = [str(b) for b in (BitWidth.FULL, BitWidth.B8, BitWidth.B4, BitWidth.B2,
                              BitWidth.B158, BitWidth.B1)]


def median_iqr(values):
    """``(median, q1, q3)`` with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q1), float(q3)


def _bits_key(label):
    body, _, rest = label.partition("+")
    return (BIT_ORDER.index(body) if body in BIT_ORDER else len(BIT_ORDER), rest)


def aggregate(rows):
    """Group summary rows by (method, bits, mode) and summarize each metric."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["bits"], r["mode"]), []).append(r)
    out = []
    for (method, bits, mode), rs in groups.items():
        rec = {"method": method, "bits": bits, "mode": mode, "n": len(rs)}
        for m in METRICS:
            med, q1, q3 = median_iqr([r[m] for r in rs])
            rec[f"{m}_median"], rec[f"{m}_q1"], rec[f"{m}_q3"] = med, q1, q3
            rec[f"{m}_iqr"] = q3 - q1
        out.append(rec)
    methods = list(dict.fromkeys(r["method"] for r in rows))
    out.sort(key=lambda r: (methods.index(r["method"]), _bits_key(r["bits"]), r["mode"]))
    return out


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in (r[h] for h in header)])
    return buf.getvalue()


def report(manifest, out=None, allow_incomplete=False):
    """Write the report CSVs for ``manifest`` (a dict or a path); returns their paths.

    Raises :class:`IncompleteRunError` listing missing cells unless
    ``allow_incomplete``.
    """
    if not isinstance(manifest, dict):
        base = Path(manifest)
        out = out or (base if base.is_dir() else base.parent)
        manifest = load_manifest(manifest)
    cfg = ExperimentConfig.model_validate(manifest["config"])
    out = Path(out or cfg.output_dir)
    missing = missing_cells(manifest)
    if missing and not allow_incomplete:
        raise IncompleteRunError(missing)
    rows = summary_rows(cfg, out, manifest)
    agg = aggregate(rows)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    files = {}

    def emit(name, header, data):
        path = rdir / name
        _write_atomic(path, _csv(header, data))
        files[name] = path

    agg_header = ["method", "bits", "mode", "n"] + [
        f"{m}_{s}" for m in METRICS for s in ("median", "q1", "q3", "iqr")]
    emit("aggregate.csv", agg_header, agg)

    uniform = [a for a in agg if "+" not in a["bits"]]
    emit("fig1_tradeoff.csv", ["method", "bits", "mode", "accuracy_median", "tpr_at_0.001_median"], uniform)

    acc_rows, seen = [], set()
    for a in uniform:
        if (a["method"], a["bits"]) not in seen:
            seen.add((a["method"], a["bits"]))
            acc_rows.append(a)
    emit("fig2_accuracy_vs_bits.csv",
         ["method", "bits", "n", "accuracy_median", "accuracy_q1", "accuracy_q3"], acc_rows)
    emit("fig3_tpr_vs_bits.csv",
         ["method", "bits", "mode", "n", "tpr_at_0.001_median", "tpr_at_0.001_q1",
          "tpr_at_0.001_q3", "auroc_median", "log_auroc_median"], uniform)

    fig5 = []
    for a in agg:
        body, _, last = a["bits"].partition("+")
        if last or any(b["bits"].startswith(body + "+") and b["method"] == a["method"] for b in agg):
            fig5.append({**a, "body_bits": body, "last_layer": last.split(":")[-1] if last else body,
                         "variant": "decoupled" if last else "uniform"})
    emit("fig5_decoupled.csv",
         ["method", "body_bits", "last_layer", "variant", "mode", "n", "accuracy_median",
          "tpr_at_0.001_median", "auroc_median"], fig5)

    mode0 = cfg.modes[0]
    scatter = [r for r in rows if r["bits"] == str(BitWidth.B158) and r["mode"] == mode0]
    emit("fig7_b158_scatter.csv", ["seed", "method", "mode", "accuracy", "tpr_at_0.001", "auroc"], scatter)
    return files
