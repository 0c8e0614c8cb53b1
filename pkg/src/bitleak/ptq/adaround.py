"""Learned up/down rounding (AdaRound) and its block-wise extension (BRECQ).

Both optimizers share one engine: a contiguous segment of the network, from
one affine layer to another, is run on calibration inputs and the rounding
variables of every quantized affine inside it are tuned jointly so that the
segment output matches the full-precision segment. A single-layer segment is
plain AdaRound; a multi-layer segment is one BRECQ block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import netcore
from ..errors import OptimizationError
from ..quantgrid import BitWidth, QuantizedLayer, calibrate_spec, clamp
from .precision import BlockPartition
from .rtn import set_quantized


@dataclass(frozen=True)
class AdaRoundConfig:
    iters: int = 2000
    lr: float = 1e-2
    lam: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    zeta: float = 1.1
    gamma: float = -0.1
    # fraction of iterations run without the rounding regularizer
    warmup: float = 1.0 / 3.0

    def __post_init__(self):
        if not self.zeta > 1 or not self.gamma < 0:
            raise ValueError("rectified sigmoid needs zeta > 1 and gamma < 0")
        if not self.beta_start >= self.beta_end >= 2:
            raise ValueError("need beta_start >= beta_end >= 2")
        if self.iters < 0 or not 0 <= self.warmup <= 1:
            raise ValueError("iters must be >= 0 and warmup in [0, 1]")

    def beta_at(self, it):
        """``None`` during warm-up, otherwise the linearly annealed exponent."""
        start = int(self.warmup * self.iters)
        if it < start:
            return None
        span = max(self.iters - start, 1)
        t = (it - start) / span
        return self.beta_end + (self.beta_start - self.beta_end) * max(0.0, 1.0 - t)

    def to_dict(self):
        return asdict(self)


def rectified_sigmoid(V, zeta=1.1, gamma=-0.1):
    return np.clip(_sigmoid(V) * (zeta - gamma) + gamma, 0.0, 1.0)


def _sigmoid(V):
    return 0.5 * (1.0 + np.tanh(0.5 * V))


def _inverse_rectified(h, zeta, gamma):
    p = np.clip((h - gamma) / (zeta - gamma), 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


class _RoundingVar:
    """Rounding state of one affine weight matrix."""

    def __init__(self, W, spec):
        self.spec = spec
        self.W = W
        s = spec.scale[:, None]
        z = spec.zero_point[:, None]
        u = W / s + z
        self.base = np.floor(u)
        self.frac = u - self.base
        self.s, self.z = s, z
        self.top = spec.levels - 1

    def init_V(self, cfg):
        return _inverse_rectified(self.frac, cfg.zeta, cfg.gamma)

    def soft_weight(self, h):
        c = self.base + h
        inside = (c >= 0) & (c <= self.top)
        return self.s * (np.clip(c, 0, self.top) - self.z), inside

    def codes(self, up):
        return clamp(self.base + up, 0, self.top).astype(np.int64)

    def rtn_codes(self):
        return self.spec.to_codes(self.W)


def _bn_affine(layer):
    a = layer.gamma / np.sqrt(layer.running_var + netcore.BN_EPS)
    return a, layer.beta - layer.running_mean * a


def _run_segment(segment, X, weights):
    """Forward through ``segment`` with affine weights taken from ``weights``."""
    acts = []
    h = X
    for i, layer in enumerate(segment):
        acts.append(h)
        if layer.kind == "Affine":
            h = h @ weights[i].T + layer.b
        elif layer.kind == "BatchNorm":
            a, c = _bn_affine(layer)
            h = h * a + c
        elif layer.kind == "ReLU":
            h = np.maximum(h, 0.0)
        else:
            raise ValueError(f"layer {layer.name!r} cannot sit inside a reconstruction block")
    return h, acts


def _segment_grads(segment, acts, weights, g, wanted):
    grads = {}
    for i in range(len(segment) - 1, -1, -1):
        layer = segment[i]
        if layer.kind == "Affine":
            if i in wanted:
                grads[i] = g.T @ acts[i]
            if i == min(wanted):
                break
            g = g @ weights[i]
        elif layer.kind == "BatchNorm":
            g = g * _bn_affine(layer)[0]
        elif layer.kind == "ReLU":
            g = g * (acts[i] > 0)
    return grads


def _hard_weights(segment, rvars, codes):
    weights = {i: layer.W for i, layer in enumerate(segment) if layer.kind == "Affine"}
    for i, rv in rvars.items():
        weights[i] = rv.spec.from_codes(codes[i])
    return weights


def _output_sq_error(segment, X, Y, weights):
    out, _ = _run_segment(segment, X, weights)
    return ((out - Y) ** 2).sum(axis=0) / X.shape[0]


def reconstruct(segment, X, specs, cfg, target=None):
    """Optimize rounding for every affine index in ``specs`` within ``segment``.

    ``segment`` is a list of layers (Affine, BatchNorm, ReLU) whose weights are
    full precision; ``X`` the calibration input of its first layer. Returns
    per-index integer codes plus diagnostics (final relaxed values, losses).
    """
    X = np.asarray(X, dtype=np.float64)
    fp_weights = {i: layer.W for i, layer in enumerate(segment) if layer.kind == "Affine"}
    Y = _run_segment(segment, X, fp_weights)[0] if target is None else target
    # element-wise mean squared error, so lam does not scale with layer width
    C = X.shape[0] * Y.shape[1]
    rvars = {i: _RoundingVar(segment[i].W, spec) for i, spec in specs.items()}
    V = {i: rv.init_V(cfg) for i, rv in rvars.items()}
    m1 = {i: np.zeros_like(v) for i, v in V.items()}
    m2 = {i: np.zeros_like(v) for i, v in V.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    weights = dict(fp_weights)
    span = cfg.zeta - cfg.gamma
    wanted = set(rvars)

    for it in range(cfg.iters):
        beta = cfg.beta_at(it)
        hs, dW_dh = {}, {}
        for i, rv in rvars.items():
            sig = _sigmoid(V[i])
            raw = sig * span + cfg.gamma
            h = np.clip(raw, 0.0, 1.0)
            weights[i], inside = rv.soft_weight(h)
            hs[i] = (h, sig, (raw > 0) & (raw < 1))
            dW_dh[i] = rv.s * inside
        out, acts = _run_segment(segment, X, weights)
        diff = out - Y
        loss = float((diff ** 2).sum() / C)
        if not math.isfinite(loss):
            raise OptimizationError(f"non-finite reconstruction loss at iteration {it}", iteration=it)
        gW = _segment_grads(segment, acts, weights, 2.0 * diff / C, wanted)
        t = it + 1
        for i in rvars:
            h, sig, active = hs[i]
            g_h = gW[i] * dW_dh[i]
            if beta is not None:
                a = 2.0 * h - 1.0
                g_h = g_h - cfg.lam * beta * np.abs(a) ** (beta - 1) * np.sign(a) * 2.0
            g = g_h * span * sig * (1.0 - sig) * active
            m1[i] = b1 * m1[i] + (1 - b1) * g
            m2[i] = b2 * m2[i] + (1 - b2) * g * g
            step = (m1[i] / (1 - b1 ** t)) / (np.sqrt(m2[i] / (1 - b2 ** t)) + eps)
            V[i] = V[i] - cfg.lr * step

    codes = {i: rvars[i].codes((V[i] >= 0).astype(np.float64)) for i in rvars}
    rtn = {i: rvars[i].rtn_codes() for i in rvars}
    learned_err = _output_sq_error(segment, X, Y, _hard_weights(segment, rvars, codes))
    rtn_err = _output_sq_error(segment, X, Y, _hard_weights(segment, rvars, rtn))
    single = len(rvars) == 1 and len(segment) == 1
    if single:
        # output rows of a lone affine are independent: keep the better row
        (i,) = rvars
        worse = learned_err > rtn_err
        codes[i] = np.where(worse[:, None], rtn[i], codes[i])
        fallback = int(worse.sum())
    elif learned_err.sum() > rtn_err.sum():
        codes, fallback = rtn, -1
    else:
        fallback = 0
    final_err = _output_sq_error(segment, X, Y, _hard_weights(segment, rvars, codes))
    info = {
        "h": {i: rectified_sigmoid(V[i], cfg.zeta, cfg.gamma) for i in rvars},
        "loss": float(final_err.sum()),
        "rtn_loss": float(rtn_err.sum()),
        "fallback": fallback,
    }
    return codes, info


def adaround_layer(layer, inputs, spec, cfg=None, return_info=False):
    """AdaRound one affine layer against its own full-precision output."""
    cfg = cfg or AdaRoundConfig()
    codes, info = reconstruct([layer], inputs, {0: spec}, cfg)
    q = QuantizedLayer(codes[0], spec)
    return (q, info) if return_info else q


def _calib_inputs(calib):
    return np.asarray(getattr(calib, "inputs", calib), dtype=np.float64)


def _prefix_inputs(net, stop, X):
    h = X
    for layer in net.layers[:stop]:
        h = netcore.apply_layer(layer, h)
    return h


def brecq_quantize(net, partition, calib, pmap, cfg=None, log=None):
    """Block-wise reconstruction over ``partition``, blocks in network order.

    Each block's input comes from the already-quantized prefix; its target is
    the full-precision block applied to that same input.
    """
    cfg = cfg or AdaRoundConfig()
    pmap.validate(net)
    partition.validate(net)
    X = _calib_inputs(calib)
    out = net.copy()
    for block in partition.blocks:
        i0, i1 = net.index_of(block[0]), net.index_of(block[-1])
        segment = [net.layers[j] for j in range(i0, i1 + 1)]
        specs = {}
        for j, layer in enumerate(segment):
            if layer.kind == "Affine":
                bw = pmap.for_layer(layer.name)
                if bw is not BitWidth.FULL:
                    specs[j] = calibrate_spec(layer.W, bw)
        if not specs:
            continue
        Xb = _prefix_inputs(out, i0, X)
        codes, info = reconstruct(segment, Xb, specs, cfg)
        for j, spec in specs.items():
            set_quantized(out.layer(segment[j].name), QuantizedLayer(codes[j], spec))
        if log is not None:
            log.append({"block": list(block), "loss": info["loss"], "rtn_loss": info["rtn_loss"]})
    return out


def adaround_quantize(net, calib, pmap, cfg=None, log=None):
    """Sequential layer-wise AdaRound over every affine layer."""
    return brecq_quantize(net, BlockPartition.singletons(net), calib, pmap, cfg, log)
