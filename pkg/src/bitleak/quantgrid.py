"""Uniform affine weight grids: per-channel min-max calibration, quantize, dequantize.

A channel is one output row of an affine weight matrix. Codes are integers in
``[0, levels - 1]`` and dequantize to ``scale * (code - zero_point)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError

SCALE_FLOOR = 1e-12


class BitWidth(enum.Enum):
    B1 = "B1"
    B158 = "B158"
    B2 = "B2"
    B4 = "B4"
    B8 = "B8"
    FULL = "Full"

    @property
    def levels(self):
        """Grid size; ``None`` for full precision."""
        return _LEVELS[self]

    @property
    def bits(self):
        return None if self is BitWidth.FULL else float(np.log2(self.levels))

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-bit", "").replace("bit", "")
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(f"unknown bit-width {value!r}")

    def __str__(self):
        return self.value


_LEVELS = {
    BitWidth.B1: 2,
    BitWidth.B158: 3,
    BitWidth.B2: 4,
    BitWidth.B4: 16,
    BitWidth.B8: 256,
    BitWidth.FULL: None,
}
_ALIASES = {
    "b1": BitWidth.B1, "1": BitWidth.B1, "sign": BitWidth.B1,
    "b158": BitWidth.B158, "1.58": BitWidth.B158, "ternary": BitWidth.B158,
    "b2": BitWidth.B2, "2": BitWidth.B2,
    "b4": BitWidth.B4, "4": BitWidth.B4,
    "b8": BitWidth.B8, "8": BitWidth.B8,
    "full": BitWidth.FULL, "fp": BitWidth.FULL, "32": BitWidth.FULL, "fp64": BitWidth.FULL,
}


def clamp(a, lo, hi):
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError(f"clamp bounds out of order: lo={lo} > hi={hi}")
    return np.maximum(lo, np.minimum(a, hi))


def round_half_away(x):
    """Round to nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantSpec:
    """Per-channel grid. ``kind='sign'`` is the symmetric 1-bit grid {-m, +m}.

    The sign grid is stored in the same ``scale * (code - zero_point)`` form
    with ``scale = 2m`` and ``zero_point = 0.5``; every other grid has an
    integer zero-point.
    """

    levels: int
    scale: np.ndarray
    zero_point: np.ndarray
    axis: int = 0
    kind: str = "affine"

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        z = np.atleast_1d(np.asarray(self.zero_point, dtype=np.float64))
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)
        if s.shape != z.shape:
            raise ValueError("scale and zero_point must have one entry per channel")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("scales must be positive and finite")
        if self.kind == "affine":
            if np.any(z < 0) or np.any(z > self.levels - 1) or np.any(z != np.round(z)):
                raise ValueError("zero-points must be integers in [0, levels-1]")
        elif self.kind == "sign":
            if self.levels != 2 or np.any(z != 0.5):
                raise ValueError("sign grids have 2 levels and zero_point 0.5")
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def channels(self):
        return self.scale.shape[0]

    def _bcast(self, arr, ndim):
        shape = [1] * ndim
        shape[self.axis] = -1
        return arr.reshape(shape)

    def grid(self, channel):
        """All representable values of one channel."""
        q = np.arange(self.levels)
        return self.scale[channel] * (q - self.zero_point[channel])

    def to_codes(self, W):
        """Nearest-grid codes (round-to-nearest) for ``W``."""
        W = np.asarray(W, dtype=np.float64)
        s = self._bcast(self.scale, W.ndim)
        z = self._bcast(self.zero_point, W.ndim)
        if self.kind == "sign":
            return (W >= 0).astype(np.int64)
        q = clamp(round_half_away(W / s) + z, 0, self.levels - 1)
        return q.astype(np.int64)

    def from_codes(self, codes):
        codes = np.asarray(codes)
        s = self._bcast(self.scale, codes.ndim)
        z = self._bcast(self.zero_point, codes.ndim)
        return s * (codes - z)

    def to_dict(self):
        return {
            "kind": self.kind,
            "levels": int(self.levels),
            "axis": int(self.axis),
            "s": self.scale.tolist(),
            "z": self.zero_point.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["levels"]), np.asarray(d["s"]), np.asarray(d["z"]),
                   int(d.get("axis", 0)), d.get("kind", "affine"))


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    codes: np.ndarray
    spec: QuantSpec

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < 0 or codes.max() > self.spec.levels - 1):
            raise IntegrityError(f"codes outside [0, {self.spec.levels - 1}]")
        object.__setattr__(self, "codes", codes.astype(np.int64))

    @property
    def values(self):
        return dequantize(self)

    def to_dict(self):
        return {"shape": list(self.codes.shape), "codes": self.codes.ravel().tolist(),
                "spec": self.spec.to_dict()}

    @classmethod
    def from_dict(cls, d):
        codes = np.asarray(d["codes"], dtype=np.int64).reshape(d["shape"])
        return cls(codes, QuantSpec.from_dict(d["spec"]))


def calibrate_minmax(channel_weights, bitwidth):
    """Scale and zero-point of one channel from its range.

    The range is widened to include 0 so that zero is always representable
    and constant channels reconstruct exactly.
    """
    levels = BitWidth.parse(bitwidth).levels
    w = np.asarray(channel_weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("channel is empty")
    lo, hi = min(float(w.min()), 0.0), max(float(w.max()), 0.0)
    s = max((hi - lo) / (levels - 1), SCALE_FLOOR)
    z = float(clamp(round_half_away(-lo / s), 0, levels - 1))
    return s, z


def calibrate_spec(W, bitwidth, axis=0):
    """Per-channel grid for ``W``; B1 yields the symmetric sign grid."""
    bw = BitWidth.parse(bitwidth)
    if bw is BitWidth.FULL:
        raise ValueError("full precision has no grid")
    W = np.asarray(W, dtype=np.float64)
    rows = np.moveaxis(W, axis, 0).reshape(W.shape[axis], -1)
    if bw is BitWidth.B1:
        m = np.maximum(np.abs(rows).mean(axis=1), SCALE_FLOOR / 2)
        return QuantSpec(2, 2 * m, np.full(len(m), 0.5), axis, "sign")
    pairs = [calibrate_minmax(r, bw) for r in rows]
    s = np.array([p[0] for p in pairs])
    z = np.array([p[1] for p in pairs])
    return QuantSpec(bw.levels, s, z, axis)


def quantize_uaq(W, spec):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 0 or W.shape[spec.axis] != spec.channels:
        raise ValueError(
            f"spec has {spec.channels} channels, W has shape {W.shape} on axis {spec.axis}"
        )
    return QuantizedLayer(spec.to_codes(W), spec)


def dequantize(q):
    codes = np.asarray(q.codes)
    if codes.size and (codes.min() < 0 or codes.max() > q.spec.levels - 1):
        raise IntegrityError(f"codes outside [0, {q.spec.levels - 1}]")
    return q.spec.from_codes(codes)


def sign_quantize(W):
    """1-bit baseline: ``+m`` where ``W >= 0`` else ``-m``, ``m`` = mean |W| per row."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    return quantize_uaq(W, calibrate_spec(W, BitWidth.B1))


def rtn_layer(W, bitwidth):
    """Round-to-nearest on a min-max grid (sign grid for B1)."""
    return quantize_uaq(W, calibrate_spec(W, bitwidth))
