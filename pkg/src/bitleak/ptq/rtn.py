"""Round-to-nearest baseline."""

from __future__ import annotations

from ..quantgrid import BitWidth, rtn_layer


def set_quantized(layer, q):
    layer.quant = q
    layer.W = q.values


def rtn_quantize(net, pmap):
    """Replace each affine weight by its min-max RTN value at the mapped bit-width.

    Biases stay full precision; Full-mapped layers are left untouched.
    """
    pmap.validate(net)
    out = net.copy()
    for layer in out.affine_layers:
        bw = pmap.for_layer(layer.name)
        if bw is BitWidth.FULL:
            continue
        set_quantized(layer, rtn_layer(layer.W, bw))
    return out
