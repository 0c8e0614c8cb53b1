"""Greedy Hessian-guided quantization (OBC) with OBS-style compensation.

For a layer with calibration inputs X the row-wise loss is
(w - w')^T H (w - w') with H = 2 X^T X. Weights are quantized one at a time,
always the one whose rounding costs least under the current inverse Hessian,
and the not-yet-quantized weights absorb the error. All rows of a layer are
processed together, each with its own copy of the inverse Hessian.
"""

from __future__ import annotations

import numpy as np

from .. import netcore
from ..errors import NumericalError
from ..quantgrid import BitWidth, QuantizedLayer, QuantSpec, calibrate_spec
from .rtn import set_quantized

DAMP = 1e-2
# cap on rows x n x n doubles held at once
_CHUNK_ELEMS = 1 << 23


def hessian(inputs, damp=DAMP):
    """Damped 2 X^T X for calibration inputs X [C x n]."""
    X = np.asarray(inputs, dtype=np.float64)
    H = 2.0 * X.T @ X
    mean_diag = float(np.mean(np.diag(H))) if H.size else 0.0
    delta = damp * mean_diag if mean_diag > 0 else damp
    return H + delta * np.eye(H.shape[0])


def _inverse(H):
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Hessian is not positive definite after damping") from exc
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def _obc_rows(W, Hinv, spec_rows, trace=None):
    """Quantize rows of ``W`` (a chunk) sharing the initial inverse Hessian."""
    rows, n = W.shape
    w = W.copy()
    Hi = np.broadcast_to(Hinv, (rows, n, n)).copy()
    done = np.zeros((rows, n), dtype=bool)
    r = np.arange(rows)
    for _ in range(n):
        qv = spec_rows.from_codes(spec_rows.to_codes(w))
        diag = np.einsum("rii->ri", Hi)
        live = diag[~done]
        if np.any(live <= 0) or not np.all(np.isfinite(live)):
            raise NumericalError("inverse Hessian lost positive definiteness during elimination")
        score = np.full((rows, n), np.inf)
        score[~done] = ((qv - w) ** 2)[~done] / live
        q = np.argmin(score, axis=1)
        d = Hi[r, q, q]
        err = (w[r, q] - qv[r, q]) / d
        col = Hi[r, :, q]  # [rows, n]
        w -= err[:, None] * col
        w[r, q] = qv[r, q]
        done[r, q] = True
        Hi -= col[:, :, None] * Hi[r, q, :][:, None, :] / d[:, None, None]
        Hi[r, q, :] = 0.0
        Hi[r, :, q] = 0.0
        if trace is not None:
            trace.append((q.copy(), w.copy()))
    return spec_rows.to_codes(w)


def _row_spec(spec, rows):
    return QuantSpec(spec.levels, spec.scale[rows], spec.zero_point[rows], 0, spec.kind)


def obc_quantize_row(w, H, spec, return_trace=False):
    """Quantize one row ``w`` with Hessian ``H`` on a one-channel ``spec``.

    With ``return_trace`` also returns the list of (chosen index, row after
    the step) pairs.
    """
    w = np.asarray(w, dtype=np.float64)[None, :]
    trace = [] if return_trace else None
    codes = _obc_rows(w, _inverse(np.asarray(H, dtype=np.float64)), spec, trace)
    values = spec.from_codes(codes)[0]
    if return_trace:
        return values, [(int(q[0]), row[0]) for q, row in trace]
    return values


def _row_errors(W, Wq, G):
    D = W - Wq
    return np.einsum("ri,ij,rj->r", D, G, D)


def obc_quantize_layer(W, inputs, spec, damp=DAMP):
    """OBC codes for a whole weight matrix; rows never end up worse than RTN.

    Rows whose output error exceeds the plain round-to-nearest error on the
    undamped Gram are replaced by their RTN codes.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(inputs, dtype=np.float64)
    Hinv = _inverse(hessian(X, damp))
    n = W.shape[1]
    chunk = max(1, _CHUNK_ELEMS // (n * n))
    codes = np.empty(W.shape, dtype=np.int64)
    for start in range(0, W.shape[0], chunk):
        rows = np.arange(start, min(start + chunk, W.shape[0]))
        codes[rows] = _obc_rows(W[rows], Hinv, _row_spec(spec, rows))
    rtn = spec.to_codes(W)
    G = X.T @ X
    worse = _row_errors(W, spec.from_codes(codes), G) > _row_errors(W, spec.from_codes(rtn), G)
    codes[worse] = rtn[worse]
    return QuantizedLayer(codes, spec)


def obc_quantize(net, calib, pmap, damp=DAMP, bn_tune=True):
    """OBC on every quantized affine layer, then batch-norm re-estimation.

    Each layer's Hessian comes from the full-precision network's activations
    on the calibration inputs.
    """
    pmap.validate(net)
    X = np.asarray(getattr(calib, "inputs", calib), dtype=np.float64)
    acts = netcore.layer_inputs(net, X)
    out = net.copy()
    touched = False
    for layer in out.affine_layers:
        bw = pmap.for_layer(layer.name)
        if bw is BitWidth.FULL:
            continue
        spec = calibrate_spec(layer.W, bw)
        set_quantized(layer, obc_quantize_layer(layer.W, acts[layer.name], spec, damp))
        touched = True
    if touched and bn_tune:
        out = netcore.batchnorm_tune(out, X)
    return out
