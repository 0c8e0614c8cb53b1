"""Feedforward network engine: affine, batch-norm, ReLU and softmax layers.

Everything runs in float64 with hand-written backpropagation. Networks are
plain lists of layers; training works on a private copy so a finished
network can be shared read-only.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError, TrainingError

BN_EPS = 1e-5


@dataclass
class Affine:
    name: str
    W: np.ndarray  # [out, in]
    b: np.ndarray  # [out]
    # QuantizedLayer whose dequantized values equal W, when the layer is quantized
    quant: Optional[object] = None
    kind: str = field(default="Affine", init=False)

    @property
    def in_features(self):
        return self.W.shape[1]

    @property
    def out_features(self):
        return self.W.shape[0]


@dataclass
class BatchNorm:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    kind: str = field(default="BatchNorm", init=False)

    @classmethod
    def fresh(cls, name, n):
        return cls(name, np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))

    @property
    def width(self):
        return self.gamma.shape[0]


@dataclass
class ReLU:
    name: str
    kind: str = field(default="ReLU", init=False)


@dataclass
class Softmax:
    name: str
    kind: str = field(default="Softmax", init=False)


PARAM_NAMES = {"Affine": ("W", "b"), "BatchNorm": ("gamma", "beta")}


@dataclass
class _Cache:
    batch: np.ndarray
    training: bool
    inputs: list  # input activation of every layer, in order
    probs: np.ndarray
    bn: dict  # layer index -> (xhat, inv_std)


class Network:
    """Ordered list of layers ending in exactly one Softmax."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("Softmax") != 1 or kinds[-1] != "Softmax":
            raise ValueError("network must end in exactly one Softmax layer")
        self._check_chain()
        self.cache: Optional[_Cache] = None

    def _check_chain(self):
        width = None
        for layer in self.layers:
            if layer.kind == "Affine":
                if width is not None and layer.in_features != width:
                    raise ShapeError(
                        f"layer {layer.name!r} expects width {layer.in_features}, "
                        f"previous affine produces {width}"
                    )
                width = layer.out_features
            elif layer.kind == "BatchNorm" and width is not None and layer.width != width:
                raise ShapeError(f"layer {layer.name!r} has width {layer.width}, expected {width}")

    @property
    def affine_layers(self):
        return [layer for layer in self.layers if layer.kind == "Affine"]

    @property
    def input_dim(self):
        return self.affine_layers[0].in_features

    @property
    def output_dim(self):
        return self.affine_layers[-1].out_features

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index_of(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def parameters(self):
        """Live references to every trainable array, keyed ``"<layer>.<param>"``."""
        params = {}
        for layer in self.layers:
            for p in PARAM_NAMES.get(layer.kind, ()):
                params[f"{layer.name}.{p}"] = getattr(layer, p)
        return params

    def snapshot(self):
        state = {}
        for layer in self.layers:
            if layer.kind == "Affine":
                state[layer.name] = {"W": layer.W.copy(), "b": layer.b.copy(), "quant": layer.quant}
            elif layer.kind == "BatchNorm":
                state[layer.name] = {
                    k: getattr(layer, k).copy()
                    for k in ("gamma", "beta", "running_mean", "running_var")
                }
        return state

    def restore(self, state):
        for name, values in state.items():
            layer = self.layer(name)
            for k, v in values.items():
                setattr(layer, k, v.copy() if isinstance(v, np.ndarray) else v)
        self.cache = None

    def copy(self):
        twin = copy.deepcopy(self)
        twin.cache = None
        return twin

    def __repr__(self):
        body = ", ".join(f"{layer.kind}:{layer.name}" for layer in self.layers)
        return f"Network({body})"


def build_mlp(input_dim, classes, hidden=(128, 128), seed=0, batchnorm=True):
    """Affine-BN-ReLU stack with a final Affine-Softmax head, He-initialized."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6E6574])))
    layers = []
    width = input_dim
    for i, h in enumerate(hidden, start=1):
        layers.append(Affine(f"fc{i}", rng.normal(0.0, math.sqrt(2.0 / width), (h, width)), np.zeros(h)))
        if batchnorm:
            layers.append(BatchNorm.fresh(f"bn{i}", h))
        layers.append(ReLU(f"relu{i}"))
        width = h
    n = len(hidden) + 1
    layers.append(Affine(f"fc{n}", rng.normal(0.0, math.sqrt(2.0 / width), (classes, width)), np.zeros(classes)))
    layers.append(Softmax("softmax"))
    return Network(layers)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(net, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D [B x d], got shape {x.shape}")
    return x


def _bn_apply(layer, x, training, update_stats):
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        if update_stats:
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = layer.momentum
            layer.running_mean = (1 - m) * layer.running_mean + m * mean
            layer.running_var = np.maximum((1 - m) * layer.running_var + m * unbiased, BN_EPS)
    else:
        mean = layer.running_mean
        inv_std = 1.0 / np.sqrt(layer.running_var + BN_EPS)
    xhat = (x - mean) * inv_std
    return layer.gamma * xhat + layer.beta, xhat, inv_std


def apply_layer(layer, x, training=False, update_stats=False):
    """Run one layer in inference mode (or training mode for batch-norm)."""
    kind = layer.kind
    if kind == "Affine":
        if x.shape[1] != layer.in_features:
            raise ShapeError(
                f"layer {layer.name!r}: expected input width {layer.in_features}, got {x.shape[1]}"
            )
        return x @ layer.W.T + layer.b
    if kind == "BatchNorm":
        if x.shape[1] != layer.width:
            raise ShapeError(f"layer {layer.name!r}: expected input width {layer.width}, got {x.shape[1]}")
        return _bn_apply(layer, x, training, update_stats)[0]
    if kind == "ReLU":
        return np.maximum(x, 0.0)
    if kind == "Softmax":
        return _softmax(x)
    raise ValueError(f"unknown layer kind {kind!r}")


def forward(net, batch, training=False, update_stats=None):
    """Return class probabilities [B x k]; caches every layer's input on ``net``.

    ``training=True`` normalizes batch-norm layers with batch statistics and
    (unless ``update_stats=False``) folds them into the running estimates.
    """
    x = _as_batch(net, batch)
    if update_stats is None:
        update_stats = training
    inputs, bn = [], {}
    h = x
    for i, layer in enumerate(net.layers):
        inputs.append(h)
        if layer.kind == "BatchNorm":
            if h.shape[1] != layer.width:
                raise ShapeError(f"layer {layer.name!r}: expected input width {layer.width}, got {h.shape[1]}")
            h, xhat, inv_std = _bn_apply(layer, h, training, update_stats)
            bn[i] = (xhat, inv_std)
        else:
            h = apply_layer(layer, h)
    net.cache = _Cache(batch=x, training=training, inputs=inputs, probs=h, bn=bn)
    return h


def logits(net, batch):
    """Pre-softmax scores in inference mode (does not touch the cache)."""
    h = _as_batch(net, batch)
    for layer in net.layers:
        if layer.kind == "Softmax":
            break
        h = apply_layer(layer, h)
    return h


def layer_inputs(net, batch):
    """Inference-mode input activation of every Affine layer, keyed by name."""
    h = _as_batch(net, batch)
    acts = {}
    for layer in net.layers:
        if layer.kind == "Affine":
            acts[layer.name] = h
        h = apply_layer(layer, h)
    return acts


def cross_entropy(probs, labels):
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def loss(net, batch, labels):
    return cross_entropy(forward(net, batch), labels)


def backward(net, batch, labels, return_input_grad=False):
    """Gradients of the mean cross-entropy w.r.t. every trainable parameter.

    Needs the cache left by ``forward`` on the same batch.
    """
    cache = net.cache
    if cache is None:
        raise StateError("backward called before forward: no cached activations")
    x = _as_batch(net, batch)
    if cache.batch.shape != x.shape or not (cache.batch is x or np.array_equal(cache.batch, x)):
        raise StateError("cached activations belong to a different batch")
    labels = np.asarray(labels, dtype=np.int64)
    B = x.shape[0]

    grads = {}
    g = cache.probs.copy()
    g[np.arange(B), labels] -= 1.0
    g /= B
    # g is now dL/dlogits; the Softmax layer itself is folded in
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        h_in = cache.inputs[i]
        if layer.kind == "Affine":
            grads[f"{layer.name}.W"] = g.T @ h_in
            grads[f"{layer.name}.b"] = g.sum(axis=0)
            g = g @ layer.W
        elif layer.kind == "BatchNorm":
            xhat, inv_std = cache.bn[i]
            grads[f"{layer.name}.gamma"] = (g * xhat).sum(axis=0)
            grads[f"{layer.name}.beta"] = g.sum(axis=0)
            dxhat = g * layer.gamma
            if cache.training:
                n = h_in.shape[0]
                g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv_std
        elif layer.kind == "ReLU":
            g = g * (h_in > 0)
        else:
            raise ValueError(f"unexpected layer {layer.name!r} before the softmax head")
    if return_input_grad:
        grads["input"] = g
    return grads


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch):
        if self.schedule == "constant":
            return self.lr0
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def replace(self, **changes):
        return TrainRecipe(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)


def epoch_rng(seed, epoch):
    """Counter-based generator keyed by (seed, epoch)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))


def train(net, data, recipe):
    """SGD with momentum and L2 weight decay, applied to a copy of ``net``.

    ``data`` needs ``inputs`` [N x d] and ``labels`` [N]. Returns the trained
    copy and the per-epoch mean training loss.
    """
    X = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("training data is empty")
    net = net.copy()
    params = net.parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    n = len(X)
    for epoch in range(recipe.epochs):
        lr = recipe.lr_at(epoch)
        order = epoch_rng(recipe.seed, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            xb, yb = X[idx], y[idx]
            probs = forward(net, xb, training=True)
            total += cross_entropy(probs, yb) * len(idx)
            grads = backward(net, xb, yb)
            for k, p in params.items():
                g = grads[k] + recipe.weight_decay * p
                v = velocity[k]
                v *= recipe.momentum
                v += g
                p -= lr * v
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch}", epoch=epoch)
        history.append(epoch_loss)
    net.cache = None
    return net, history


def predict(net, inputs, batch_size=4096):
    X = np.asarray(inputs, dtype=np.float64)
    out = [logits(net, X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.output_dim))


def evaluate(net, data):
    """Top-1 accuracy; ties go to the lowest class index."""
    y = np.asarray(data.labels)
    if len(y) == 0:
        raise ValueError("evaluation data is empty")
    pred = np.argmax(_softmax(predict(net, data.inputs)), axis=1)
    return float(np.mean(pred == y))


def batchnorm_tune(net, calib):
    """Re-estimate every batch-norm's running statistics on ``calib``.

    Layers are visited in order, so each batch-norm sees activations produced
    by the already re-tuned layers upstream. Returns a new network.
    """
    x = np.asarray(calib, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("calibration batch must be a non-empty [C x d] array")
    net = net.copy()
    h = x
    for layer in net.layers:
        if layer.kind == "BatchNorm":
            n = h.shape[0]
            layer.running_mean = h.mean(axis=0)
            layer.running_var = np.maximum(h.var(axis=0, ddof=1 if n > 1 else 0), BN_EPS)
        h = apply_layer(layer, h)
    return net
