"""Train -> quantize -> attack over a (seed x method x precision) grid.

Layout of an output directory::

    manifest.json
    summary.csv
    seeds/s<seed>/{split.json, target.json, shadows.npz}
    cells/<cell id>/{model.json, metrics.json, scores_<mode>.csv, roc_<mode>.csv}

Every seed first gets a *seed stage* (target model plus shadow confidences);
cells then quantize that seed's target and attack it. Both kinds of job run on
a process pool and are independent of each other within their phase, so the
worker count never changes results. Only the parent process writes the
manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__, checkpoint, data, metrics, mia, netcore, ptq
from ..errors import ConfigurationError
from ..quantgrid import BitWidth
from .config import ExperimentConfig

SUMMARY_COLUMNS = ["method", "bits", "seed", "mode", "accuracy", "auroc", "log_auroc", "tpr_at_0.001"]
STAGES = ("train", "quantize", "attack")


@dataclass(frozen=True)
class Cell:
    seed: int
    method: str
    pmap: ptq.PrecisionMap

    @property
    def bits(self):
        return self.pmap.label

    @property
    def id(self):
        return f"s{self.seed}-{self.method}-{self.bits.replace(':', '_').replace('+', '_')}"


def _template(cfg):
    # only layer names matter here
    return netcore.build_mlp(1, 2, cfg.hidden)


def plan_cells(cfg):
    """Every cell in run order: seeds, then methods, then precision maps."""
    maps = [ptq.PrecisionMap.uniform(b) for b in cfg.bitwidths]
    if cfg.decouple_last:
        tmpl = _template(cfg)
        for b in cfg.bitwidths:
            if BitWidth.parse(b) is not BitWidth.FULL and b != cfg.decouple_last:
                maps.append(ptq.decouple(ptq.PrecisionMap.uniform(b), tmpl, cfg.decouple_last))
    return [Cell(s, m, p) for s in cfg.seeds for m in cfg.methods for p in maps]


def _seed_dir(out, seed):
    return Path(out) / "seeds" / f"s{seed}"


def _cell_dir(out, cell):
    return Path(out) / "cells" / cell.id


def _write_atomic(path, text):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _digest(indices):
    return hashlib.sha256(np.asarray(indices, dtype=np.int64).tobytes()).hexdigest()


# --- jobs (run in worker processes) ------------------------------------------

def _job_target(args):
    cfg_doc, seed = args
    cfg = ExperimentConfig.model_validate(cfg_doc)
    ds = cfg.dataset.build(seed)
    plan = data.make_split_plan(ds, cfg.calib_size, seed)
    net = netcore.build_mlp(ds.dim, ds.classes, cfg.hidden, seed=seed)
    net, history = netcore.train(net, ds.subset(plan.target_train), cfg.recipe.recipe(seed))
    acc = {"train_accuracy": netcore.evaluate(net, ds.subset(plan.target_train)),
           "test_accuracy": netcore.evaluate(net, ds.subset(plan.held_out))}
    return net, plan, history, acc


def _job_shadow(args):
    ds = args[0]
    net = mia._train_shadow(args)
    return mia.confidences(net, ds.inputs, ds.labels)


def _load_seed(cfg, out, seed):
    d = _seed_dir(out, seed)
    ds = cfg.dataset.build(seed)
    split = json.loads((d / "split.json").read_text())
    plan = data.SplitPlan(
        np.arange(split["n"]), np.asarray(split["target_train"], dtype=np.int64),
        np.asarray(split["calibration"], dtype=np.int64), split["seed"],
    )
    target, _, _ = checkpoint.load(d / "target.json")
    membership = phi = None
    if (d / "shadows.npz").exists():
        with np.load(d / "shadows.npz") as z:
            membership, phi = z["membership"], z["phi"]
    return ds, plan, target, membership, phi


def _quantize_cell(cfg, cell, ds, plan, target):
    calib = data.CalibrationSet.from_plan(ds, plan)
    calib.check_no_leakage(plan.target_train)
    partition = ptq.BlockPartition.pairs(target) if cfg.partition == "pairs" else None
    qnet = ptq.quantize(cell.method, target, calib, cell.pmap, cfg.adaround.config(), partition)
    return qnet, calib


def _job_cell(args):
    cfg_doc, out, cell, do_attack, reuse_model = args
    cfg = ExperimentConfig.model_validate(cfg_doc)
    t0 = time.perf_counter()
    ds, plan, target, membership, phi = _load_seed(cfg, out, cell.seed)
    cdir = _cell_dir(out, cell)
    cdir.mkdir(parents=True, exist_ok=True)
    model_path = cdir / "model.json"
    timings = {}
    if reuse_model and model_path.exists():
        qnet, meta, _ = checkpoint.load(model_path)
        calib_digest = meta["calibration_sha256"]
    else:
        qnet, calib = _quantize_cell(cfg, cell, ds, plan, target)
        calib_digest = _digest(calib.indices)
        checkpoint.save(qnet, model_path, meta={
            "seed": cell.seed, "method": cell.method, "calibration_sha256": calib_digest,
        }, pmap=cell.pmap)
    timings["quantize"] = time.perf_counter() - t0
    test = ds.subset(plan.held_out)
    accuracy = netcore.evaluate(qnet, test)
    result = {
        "cell": cell.id, "seed": cell.seed, "method": cell.method, "bits": cell.bits,
        "pmap": cell.pmap.to_dict(), "accuracy": accuracy,
        "full_accuracy": netcore.evaluate(target, test),
        "calibration_sha256": calib_digest, "calibration_size": int(len(plan.calibration)),
        "modes": {},
    }
    files = {"model": str(model_path.relative_to(out))}
    if do_attack:
        t1 = time.perf_counter()
        truth = plan.membership()
        for mode in cfg.modes:
            res = mia.attack(qnet, ds.inputs, ds.labels, truth, phi, membership, mode)
            rep = metrics.roc(res.scores, res.truth)
            result["modes"][mode] = rep.to_dict()
            scores_path = cdir / f"scores_{mode}.csv"
            roc_path = cdir / f"roc_{mode}.csv"
            scores_path.write_text(res.to_csv())
            roc_path.write_text(rep.curve_csv())
            files[f"scores_{mode}"] = str(scores_path.relative_to(out))
            files[f"roc_{mode}"] = str(roc_path.relative_to(out))
        timings["attack"] = time.perf_counter() - t1
    metrics_path = cdir / "metrics.json"
    metrics_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    files["metrics"] = str(metrics_path.relative_to(out))
    return result, files, timings


# --- manifest ----------------------------------------------------------------

def _new_manifest(cfg):
    return {
        "tool_version": __version__,
        "config_hash": cfg.content_hash(),
        "config": cfg.model_dump(mode="json"),
        "seeds": {},
        "cells": {},
        "timings": {},
    }


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text())


def _save_manifest(out, manifest):
    _write_atomic(Path(out) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def _open_manifest(cfg, out, resume):
    path = Path(out) / "manifest.json"
    if resume and path.exists():
        manifest = load_manifest(path)
        if manifest["config_hash"] != cfg.content_hash():
            raise ConfigurationError(
                f"cannot resume {out}: config hash {cfg.content_hash()[:12]} differs from "
                f"the manifest's {manifest['config_hash'][:12]}"
            )
        return manifest
    return _new_manifest(cfg)


def _pool(workers):
    return ProcessPoolExecutor(max_workers=workers) if workers > 1 else None


def _map_jobs(pool, fn, jobs):
    """Yield ``(key, result_or_exception)`` for ``jobs`` = [(key, args)]."""
    if pool is None:
        for key, args in jobs:
            try:
                yield key, fn(args)
            except Exception as exc:  # noqa: BLE001 - recorded per job
                yield key, exc
        return
    futures = {pool.submit(fn, args): key for key, args in jobs}
    for fut in as_completed(futures):
        try:
            yield futures[fut], fut.result()
        except Exception as exc:  # noqa: BLE001
            yield futures[fut], exc


def _error(exc):
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()


def _seed_status(manifest, seed):
    return manifest["seeds"].setdefault(str(seed), {"target": "pending", "shadows": "pending", "files": {}})


def _run_seed_stages(cfg, out, manifest, seeds, pool, log, shadows=True):
    """Train missing targets and, if ``shadows``, missing shadow ensembles."""
    doc = cfg.model_dump(mode="json")
    t0 = time.perf_counter()
    need_target = [s for s in seeds if _seed_status(manifest, s)["target"] != "done"]
    for seed, res in _map_jobs(pool, _job_target, [(s, (doc, s)) for s in need_target]):
        rec = _seed_status(manifest, seed)
        if isinstance(res, Exception):
            rec.update(target="failed", error=_error(res))
            log(f"seed {seed}: target training failed: {_error(res)}")
            continue
        net, plan, history, acc = res
        d = _seed_dir(out, seed)
        d.mkdir(parents=True, exist_ok=True)
        (d / "split.json").write_text(json.dumps(plan.to_dict()))
        checkpoint.save(net, d / "target.json", meta={
            "seed": seed, "recipe": cfg.recipe.recipe(seed).to_dict(),
            "final_loss": history[-1] if history else None, **acc,
        })
        rec["target"] = "done"
        rec.update(acc)
        rec["files"].update(split=str((d / "split.json").relative_to(out)),
                            target=str((d / "target.json").relative_to(out)))
        log(f"seed {seed}: target trained")
    _save_manifest(out, manifest)

    need_shadows = [s for s in seeds if shadows and _seed_status(manifest, s)["target"] == "done"
                    and _seed_status(manifest, s)["shadows"] != "done"]
    jobs, memberships = [], {}
    for seed in need_shadows:
        ds = cfg.dataset.build(seed)
        bits = mia.build_shadow_splits(len(ds), cfg.shadows, seed)
        memberships[seed] = bits
        for i, job in enumerate(mia.shadow_jobs(ds, bits, cfg.recipe.recipe(seed), seed, cfg.hidden)):
            jobs.append(((seed, i), job))
    phis = {s: [None] * cfg.shadows for s in need_shadows}
    failed = {}
    for (seed, i), res in _map_jobs(pool, _job_shadow, jobs):
        if isinstance(res, Exception):
            failed.setdefault(seed, _error(res))
        else:
            phis[seed][i] = res
    for seed in need_shadows:
        rec = _seed_status(manifest, seed)
        if seed in failed:
            rec.update(shadows="failed", error=failed[seed])
            log(f"seed {seed}: shadow training failed: {failed[seed]}")
            continue
        path = _seed_dir(out, seed) / "shadows.npz"
        np.savez(path, membership=memberships[seed], phi=np.stack(phis[seed]))
        rec["shadows"] = "done"
        rec["files"]["shadows"] = str(path.relative_to(out))
        log(f"seed {seed}: {cfg.shadows} shadows trained")
    manifest["timings"]["seed_stages"] = manifest["timings"].get("seed_stages", 0.0) + time.perf_counter() - t0
    _save_manifest(out, manifest)


def run(config, out=None, workers=1, resume=False, stop_after="attack", max_cells=None, log=None):
    """Execute the grid and return the manifest dict.

    ``stop_after`` is one of ``train``, ``quantize`` or ``attack``.
    ``max_cells`` stops after that many cells finish, leaving an incomplete
    manifest that ``resume=True`` can pick up.
    """
    if stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}")
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.model_validate(config)
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)
    manifest = _open_manifest(cfg, out, resume)
    t_start = time.perf_counter()

    with _pool_context(workers) as pool:
        _run_seed_stages(cfg, out, manifest, cfg.seeds, pool, log,
                         shadows=stop_after in ("train", "attack"))
        if stop_after == "train":
            return manifest
        want = "done" if stop_after == "attack" else "quantized"
        todo = []
        for cell in plan_cells(cfg):
            rec = manifest["cells"].get(cell.id, {})
            if rec.get("status") == "done" or rec.get("status") == want:
                continue
            seed_rec = _seed_status(manifest, cell.seed)
            if seed_rec["target"] != "done" or (want == "done" and seed_rec["shadows"] != "done"):
                manifest["cells"][cell.id] = {"status": "failed", "seed": cell.seed,
                                              "error": "seed stage did not complete"}
                continue
            todo.append(cell)
        if max_cells is not None:
            todo = todo[:max_cells]
        doc = cfg.model_dump(mode="json")
        jobs = [(c, (doc, str(out), c, stop_after == "attack",
                     manifest["cells"].get(c.id, {}).get("status") == "quantized")) for c in todo]
        for cell, res in _map_jobs(pool, _job_cell, jobs):
            if isinstance(res, Exception):
                manifest["cells"][cell.id] = {"status": "failed", "seed": cell.seed,
                                              "method": cell.method, "bits": cell.bits, "error": _error(res)}
                log(f"cell {cell.id}: failed: {_error(res)}")
            else:
                result, files, timings = res
                manifest["cells"][cell.id] = {
                    "status": want, "seed": cell.seed, "method": cell.method, "bits": cell.bits,
                    "files": files, "timings": timings,
                }
                log(f"cell {cell.id}: {want} (accuracy {result['accuracy']:.4f})")
            _save_manifest(out, manifest)

    summary = write_summary(cfg, out, manifest)
    if summary is not None:
        manifest["summary"] = str(summary.relative_to(out))
    manifest["timings"]["run"] = manifest["timings"].get("run", 0.0) + time.perf_counter() - t_start
    _save_manifest(out, manifest)
    return manifest


class _NullPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _pool_context(workers):
    pool = _pool(workers)
    return pool if pool is not None else _NullPool()


def _fmt(x):
    return repr(float(x))


def summary_rows(cfg, out, manifest):
    """Summary rows of every finished cell, in grid order."""
    rows = []
    for cell in plan_cells(cfg):
        rec = manifest["cells"].get(cell.id)
        if not rec or rec.get("status") != "done":
            continue
        m = json.loads((Path(out) / rec["files"]["metrics"]).read_text())
        for mode in cfg.modes:
            mm = m["modes"][mode]
            rows.append({
                "method": cell.method, "bits": cell.bits, "seed": cell.seed, "mode": mode,
                "accuracy": m["accuracy"], "auroc": mm["auroc"], "log_auroc": mm["log_auroc"],
                "tpr_at_0.001": mm["tpr_at"]["0.001"],
            })
    return rows


def write_summary(cfg, out, manifest):
    rows = summary_rows(cfg, out, manifest)
    if not rows:
        return None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([r["method"], r["bits"], r["seed"], r["mode"], _fmt(r["accuracy"]),
                    _fmt(r["auroc"]), _fmt(r["log_auroc"]), _fmt(r["tpr_at_0.001"])])
    path = Path(out) / "summary.csv"
    _write_atomic(path, buf.getvalue())
    return path


def missing_cells(manifest):
    cfg = ExperimentConfig.model_validate(manifest["config"])
    return [c.id for c in plan_cells(cfg)
            if manifest["cells"].get(c.id, {}).get("status") != "done"]
