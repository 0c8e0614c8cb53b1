"""JSON checkpoints for (possibly quantized) networks.

Schema::

    {"layers": [{"name", "kind", "shape", "values", ...}], "meta": {...},
     "pmap": {...}}

Arrays are row-major lists of floats; Python's float repr round-trips
exactly, so ``load(save(net))`` reproduces every value bit-for-bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .netcore import Affine, BatchNorm, Network, ReLU, Softmax
from .quantgrid import QuantizedLayer

FORMAT_VERSION = 1


def _flat(a):
    return np.asarray(a, dtype=np.float64).ravel().tolist()


def network_to_dict(net, meta=None, pmap=None):
    layers = []
    for layer in net.layers:
        rec = {"name": layer.name, "kind": layer.kind}
        if layer.kind == "Affine":
            rec.update(shape=list(layer.W.shape), values=_flat(layer.W), bias=_flat(layer.b))
            if layer.quant is not None:
                rec["quant"] = layer.quant.to_dict()
        elif layer.kind == "BatchNorm":
            rec.update(
                shape=[layer.width], values=_flat(layer.gamma), beta=_flat(layer.beta),
                running_mean=_flat(layer.running_mean), running_var=_flat(layer.running_var),
                momentum=layer.momentum,
            )
        else:
            rec.update(shape=[], values=[])
        layers.append(rec)
    doc = {"format": FORMAT_VERSION, "layers": layers, "meta": dict(meta or {})}
    if pmap is not None:
        doc["pmap"] = pmap.to_dict()
    return doc


def network_from_dict(doc):
    layers = []
    for rec in doc["layers"]:
        kind = rec["kind"]
        if kind == "Affine":
            W = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
            quant = QuantizedLayer.from_dict(rec["quant"]) if "quant" in rec else None
            layers.append(Affine(rec["name"], W, np.asarray(rec["bias"], dtype=np.float64), quant))
        elif kind == "BatchNorm":
            layers.append(BatchNorm(
                rec["name"], np.asarray(rec["values"], dtype=np.float64),
                np.asarray(rec["beta"], dtype=np.float64),
                np.asarray(rec["running_mean"], dtype=np.float64),
                np.asarray(rec["running_var"], dtype=np.float64),
                rec.get("momentum", 0.1),
            ))
        elif kind == "ReLU":
            layers.append(ReLU(rec["name"]))
        elif kind == "Softmax":
            layers.append(Softmax(rec["name"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return Network(layers)


def save(net, path, meta=None, pmap=None):
    doc = network_to_dict(net, meta, pmap)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))
    return path


def load(path):
    """Returns ``(network, meta, pmap_dict_or_None)``."""
    doc = json.loads(Path(path).read_text())
    return network_from_dict(doc), doc.get("meta", {}), doc.get("pmap")
