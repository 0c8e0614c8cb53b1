"""Per-layer bit-width assignment and block partitions."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigurationError
from ..quantgrid import BitWidth


@dataclass(frozen=True)
class PrecisionMap:
    default: BitWidth
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "default", BitWidth.parse(self.default))
        object.__setattr__(
            self, "overrides", {str(k): BitWidth.parse(v) for k, v in dict(self.overrides).items()}
        )

    @classmethod
    def uniform(cls, bitwidth):
        return cls(BitWidth.parse(bitwidth))

    def for_layer(self, name):
        return self.overrides.get(name, self.default)

    def validate(self, net):
        affine = {layer.name for layer in net.affine_layers}
        unknown = sorted(set(self.overrides) - affine)
        if unknown:
            raise ConfigurationError(f"precision map names unknown affine layers: {unknown}")
        return self

    @property
    def is_full(self):
        return self.default is BitWidth.FULL and all(
            v is BitWidth.FULL for v in self.overrides.values()
        )

    @property
    def label(self):
        extra = "".join(f"+{k}:{v}" for k, v in sorted(self.overrides.items()))
        return f"{self.default}{extra}"

    def to_dict(self):
        return {"default": str(self.default),
                "overrides": {k: str(v) for k, v in sorted(self.overrides.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["default"], d.get("overrides", {}))


def decouple(pmap, net, last_bits):
    """Copy of ``pmap`` with the final affine layer pinned to ``last_bits``."""
    affine = net.affine_layers
    if not affine:
        raise ConfigurationError("network has no affine layer to decouple")
    return PrecisionMap(pmap.default, {**pmap.overrides, affine[-1].name: BitWidth.parse(last_bits)})


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))

    def validate(self, net):
        order = [layer.name for layer in net.affine_layers]
        flat = [name for block in self.blocks for name in block]
        if any(len(b) == 0 for b in self.blocks):
            raise ConfigurationError("empty block in partition")
        if sorted(flat) != sorted(order) or len(set(flat)) != len(flat):
            raise ConfigurationError(
                f"partition must cover every affine layer exactly once; got {self.blocks}, layers {order}"
            )
        if flat != order:
            raise ConfigurationError(f"blocks must be contiguous and in network order: {self.blocks}")
        return self

    @classmethod
    def singletons(cls, net):
        return cls(tuple((layer.name,) for layer in net.affine_layers))

    @classmethod
    def pairs(cls, net):
        """Consecutive pairs of affine layers; an odd final layer stands alone."""
        names = [layer.name for layer in net.affine_layers]
        return cls(tuple(tuple(names[i:i + 2]) for i in range(0, len(names), 2)))
