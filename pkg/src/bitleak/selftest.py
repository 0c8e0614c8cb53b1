"""Fast oracle checks of every module, run by ``bitleak selftest``.

Each check prints one PASS/FAIL line. The full randomized suites live in the
test-suite; these are scaled-down versions meant to finish in seconds.
"""

from __future__ import annotations

import struct
import tempfile
import time
from pathlib import Path

import numpy as np

from . import data, metrics, mia, netcore, oracles
from .ptq import AdaRoundConfig, adaround_layer, obc_quantize_row
from .quantgrid import BitWidth, calibrate_minmax, calibrate_spec, quantize_uaq


def _rng(seed):
    return np.random.default_rng(seed)


def check_quantizer(trials):
    rng = _rng(1)
    for _ in range(trials):
        bw = rng.choice([BitWidth.B158, BitWidth.B2, BitWidth.B4, BitWidth.B8])
        W = rng.normal(0, rng.uniform(0.01, 3), size=(3, int(rng.integers(1, 9))))
        spec = calibrate_spec(W, bw)
        Wq = quantize_uaq(W, spec).values
        if np.any(np.abs(W - Wq) > spec.scale[:, None] / 2 * (1 + 1e-9)):
            return False, "error exceeds half a step"
        if not np.array_equal(quantize_uaq(Wq, spec).values, Wq):
            return False, "quantization is not idempotent"
    if calibrate_minmax([-1.0, 2.0], BitWidth.B158) != (1.5, 1.0):
        return False, "min-max hand case"
    return True, f"{trials} trials"


def check_gradients(instances):
    rng = _rng(2)
    worst = 0.0
    for i in range(instances):
        net = netcore.build_mlp(4, 3, (5,), seed=i)
        for layer in net.layers:
            if layer.kind == "BatchNorm":
                layer.gamma = rng.uniform(0.5, 1.5, layer.width)
                layer.beta = rng.normal(0, 0.1, layer.width)
                layer.running_mean = rng.normal(0, 0.5, layer.width)
                layer.running_var = rng.uniform(0.5, 2, layer.width)
        training = bool(i % 2)
        relu = [j for j, layer in enumerate(net.layers) if layer.kind == "ReLU"]
        while True:
            # keep pre-activations clear of the ReLU kink, where differences are meaningless
            X = rng.normal(size=(6, 4))
            netcore.forward(net, X, training=training, update_stats=False)
            if min(np.abs(net.cache.inputs[j]).min() for j in relu) >= 1e-3:
                break
        y = rng.integers(0, 3, 6)
        grads = netcore.backward(net, X, y)
        f = lambda: netcore.cross_entropy(netcore.forward(net, X, training, update_stats=False), y)
        params = net.parameters()
        numeric = [oracles.finite_difference(f, p) for p in params.values()]
        analytic = [grads[name] for name in params]
        worst = max(worst, oracles.relative_error(np.concatenate([a.ravel() for a in analytic]),
                                                  np.concatenate([g.ravel() for g in numeric])))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def check_obc(rows):
    rng = _rng(3)
    for _ in range(rows):
        n = int(rng.integers(1, 5))
        w = rng.normal(size=n)
        A = rng.normal(size=(n + 3, n))
        H = 2 * A.T @ A + 0.1 * np.eye(n)
        bw = rng.choice([BitWidth.B158, BitWidth.B2, BitWidth.B4])
        spec = calibrate_spec(w[None, :], bw)
        _, trace = obc_quantize_row(w, H, spec, return_trace=True)
        _, ref = oracles.obc_row_bruteforce(w, H, spec.scale[0], spec.zero_point[0], spec.levels)
        for (qa, wa), (qb, wb) in zip(trace, ref):
            if qa != qb or np.max(np.abs(wa - wb)) > 1e-9:
                return False, "trace diverges from re-inversion oracle"
    return True, f"{rows} rows"


def check_adaround(instances):
    rng = _rng(4)
    cfg = AdaRoundConfig(iters=500)
    hits = 0
    for _ in range(instances):
        W = rng.normal(size=(1, int(rng.integers(2, 4))))
        X = rng.normal(size=(32, W.shape[1]))
        spec = calibrate_spec(W, BitWidth.B2)
        q = adaround_layer(netcore.Affine("fc", W, np.zeros(1)), X, spec, cfg)
        _, best = oracles.best_rounding(W, X, spec.scale, spec.zero_point, spec.levels)
        hits += oracles.rounding_loss(W, X, q.codes, spec.scale, spec.zero_point) <= best + 1e-9
    return hits >= 0.95 * instances, f"{hits}/{instances} optimal"


def check_metrics(sets):
    rng = _rng(5)
    for _ in range(sets):
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, 8, n).astype(float)
        truth = np.r_[True, False, rng.random(n - 2) < 0.5]
        if abs(metrics.roc(scores, truth).auroc - metrics.mann_whitney_auroc(scores, truth)) > 1e-9:
            return False, "AUROC disagrees with the pair count"
    diag = metrics.ROCReport.from_curve([0.0, 1.0], [0.0, 1.0]).log_auroc
    return abs(diag - 0.14462) <= 1e-4, f"diagonal log-AUROC {diag:.5f}"


def check_lira():
    if abs(float(mia.logit_confidence(0.9)) - np.log(9)) > 1e-12:
        return False, "logit of 0.9"
    phi = np.array([[1.0], [3.0], [-1.0], [1.0]])
    bits = np.array([[True], [True], [False], [False]])
    st = mia.fit_stats(phi, bits, "Online")
    if not (st.mu_in[0] == 2 and st.mu_out[0] == 0 and abs(st.sigma_in[0] - np.sqrt(2)) < 1e-12):
        return False, "hand-fitted statistics"
    fixed = mia.LiRAStats(np.array([2.0]), np.array([0.0]), np.array([1.0]), np.array([1.0]),
                          mia.AttackMode.ONLINE_FIXED)
    if abs(float(mia.lira_score(np.array([2.0]), fixed)[0]) - 2.0) > 1e-12:
        return False, "log-likelihood ratio hand case"
    return True, "hand cases"


def check_idx():
    with tempfile.TemporaryDirectory() as tmp:
        img, lab = Path(tmp) / "img", Path(tmp) / "lab"
        img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 0, 255, 255, 0, 255, 0]))
        lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([0, 1]))
        ds = data.load_idx(img, lab)
    ok = np.array_equal(ds.inputs, [[0, 1, 0, 1], [1, 0, 1, 0]])
    return ok, "hand-decoded bytes"


def check_splits(trials):
    ds = data.gen_gaussian_mixture(2, 2, 50, 1.0, seed=0)
    for seed in range(trials):
        plan = data.make_split_plan(ds, 16, seed)
        if set(plan.calibration) & set(plan.held_out):
            return False, f"calibration leaks at seed {seed}"
    return True, f"{trials} plans"


def run_selftest(quick=False, out=print):
    scale = 1 if quick else 4
    checks = [
        ("quantizer grid properties", lambda: check_quantizer(250 * scale)),
        ("gradients vs finite differences", lambda: check_gradients(5 * scale)),
        ("OBC vs re-inversion oracle", lambda: check_obc(50 * scale)),
        ("AdaRound vs exhaustive rounding", lambda: check_adaround(5 * scale)),
        ("ROC metrics oracles", lambda: check_metrics(50 * scale)),
        ("LiRA hand cases", check_lira),
        ("IDX decoding", check_idx),
        ("split leakage scan", lambda: check_splits(250 * scale)),
    ]
    all_ok = True
    for name, fn in checks:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report and carry on
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name:<34} {detail} ({time.perf_counter() - t:.2f}s)")
    return all_ok
