"""Post-training quantization: RTN, AdaRound, BRECQ and OBC over precision maps."""

from .adaround import AdaRoundConfig, adaround_layer, adaround_quantize, brecq_quantize, reconstruct
from .obc import obc_quantize, obc_quantize_layer, obc_quantize_row
from .precision import BlockPartition, PrecisionMap, decouple
from .rtn import rtn_quantize
from ..data import CalibrationSet

METHODS = ("RTN", "AdaRound", "BRECQ", "OBC")


def quantize(method, net, calib, pmap, adaround=None, partition=None):
    """Dispatch by method name; ``Full`` maps return an identical copy."""
    if method == "RTN":
        return rtn_quantize(net, pmap)
    if method == "AdaRound":
        return adaround_quantize(net, calib, pmap, adaround)
    if method == "BRECQ":
        return brecq_quantize(net, partition or BlockPartition.pairs(net), calib, pmap, adaround)
    if method == "OBC":
        return obc_quantize(net, calib, pmap)
    raise ValueError(f"unknown PTQ method {method!r}; expected one of {METHODS}")


__all__ = [
    "AdaRoundConfig", "BlockPartition", "CalibrationSet", "METHODS", "PrecisionMap",
    "adaround_layer", "adaround_quantize", "brecq_quantize", "decouple", "obc_quantize",
    "obc_quantize_layer", "obc_quantize_row", "quantize", "reconstruct", "rtn_quantize",
]
