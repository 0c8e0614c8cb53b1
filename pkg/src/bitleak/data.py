"""Datasets, IDX files and leakage-safe split plans."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Mean separations of the two desk tasks. EASY_SEP puts the 10-class task
# well above 0.85 accuracy; HARD_SEP was tuned so a full-precision MLP lands
# in the 0.5-0.7 test-accuracy band at 20 classes / 32 dims (measured 0.55-0.64
# over seeds 0-4 between sep 3.5 and 3.7).
EASY_SEP = 5.0
HARD_SEP = 3.6


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    classes: int = 0

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(y) or len(x) < 1:
            raise ValueError("dataset needs N >= 1 rows of inputs and N labels")
        k = self.classes or int(y.max()) + 1
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "classes", k)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name, self.classes)


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def simplex_means(k, d, sep):
    """``k`` points in R^d with all pairwise distances equal to ``sep``."""
    if k - 1 > d:
        raise ValueError(f"a {k}-point simplex needs d >= {k - 1}, got d={d}")
    centered = np.eye(k) - 1.0 / k
    # orthonormal basis of the (k-1)-dim span, so coordinates fit in d dims
    u, _, _ = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ u[:, : k - 1]
    means = np.zeros((k, d))
    means[:, : k - 1] = coords * (sep / np.sqrt(2.0))
    return means


def gen_gaussian_mixture(k, d, n_per_class, sep, seed=0, name=None):
    if k < 2 or d < 1 or n_per_class < 1:
        raise ValueError("need k >= 2, d >= 1 and n_per_class >= 1")
    rng = _rng(seed, 0x64617461)
    means = simplex_means(k, d, sep)
    labels = np.repeat(np.arange(k), n_per_class)
    inputs = means[labels] + rng.standard_normal((len(labels), d))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], name or f"gauss-k{k}-d{d}-sep{sep:g}", k)


def gen_easy_mixture(k=10, d=32, n_per_class=200, seed=0):
    return gen_gaussian_mixture(k, d, n_per_class, EASY_SEP, seed, name=f"easy-k{k}-d{d}")


def gen_hard_mixture(k=20, d=32, n_per_class=100, seed=0):
    """Low-separation mixture; the stand-in for the harder benchmarks."""
    return gen_gaussian_mixture(k, d, n_per_class, HARD_SEP, seed, name=f"hard-k{k}-d{d}")


def nearest_centroid_accuracy(train, test):
    """Accuracy of classifying ``test`` by the nearest class mean of ``train``."""
    cents = np.stack([train.inputs[train.labels == c].mean(axis=0) for c in range(train.classes)])
    d2 = ((test.inputs[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(d2.argmin(axis=1) == test.labels))


# --- IDX -------------------------------------------------------------------

def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if count == 0:
        raise FormatError(f"{path}: IDX payload is empty", offset=header)
    if len(raw) < header + count:
        raise FormatError(
            f"{path}: truncated payload, {len(raw) - header} of {count} bytes present",
            offset=len(raw),
        )
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return payload.reshape(dims)


def load_idx(images_path, labels_path, name=None):
    """Images become rows scaled by 1/255; any trailing dims are flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), name or Path(images_path).stem)


def to_unit_bytes(x):
    """Min-max rescale to [0, 1] and snap to multiples of 1/255."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    span = hi - lo if hi > lo else 1.0
    return np.round((x - lo) / span * 255.0) / 255.0


def save_idx(dataset, images_path, labels_path, shape=None):
    """Write ``dataset`` as IDX; inputs must already lie in [0, 1]."""
    x = dataset.inputs
    if x.min() < 0 or x.max() > 1:
        raise ValueError("inputs must lie in [0, 1]; see to_unit_bytes")
    n = len(x)
    shape = tuple(shape) if shape else (1, x.shape[1])
    if int(np.prod(shape)) != x.shape[1]:
        raise ValueError(f"image shape {shape} does not hold {x.shape[1]} values")
    payload = np.round(x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", n, *shape))
        fh.write(payload.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# --- splits ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Target-training half, its complement, and a calibration subset of the half."""

    population: np.ndarray
    target_train: np.ndarray
    calibration: np.ndarray
    seed: int
    _members: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        members = frozenset(int(i) for i in self.target_train)
        object.__setattr__(self, "_members", members)
        if not set(int(i) for i in self.calibration) <= members:
            raise ValueError("calibration indices must come from the target training split")

    @property
    def held_out(self):
        mask = np.ones(len(self.population), dtype=bool)
        mask[self.target_train] = False
        return self.population[mask]

    def membership(self):
        """Boolean target membership of every population index."""
        bits = np.zeros(len(self.population), dtype=bool)
        bits[self.target_train] = True
        return bits

    def is_member(self, index):
        return int(index) in self._members

    def to_dict(self):
        return {"seed": self.seed, "n": len(self.population),
                "target_train": self.target_train.tolist(),
                "calibration": self.calibration.tolist()}


def make_split_plan(dataset, calib_size, seed):
    n = len(dataset)
    half = n // 2
    if calib_size > half:
        raise ValueError(f"calibration size {calib_size} exceeds the target split ({half})")
    if calib_size < 0:
        raise ValueError("calibration size must be non-negative")
    rng = _rng(seed, 0x73706C74)
    target = np.sort(rng.permutation(n)[:half])
    calib = np.sort(rng.choice(target, size=calib_size, replace=False))
    return SplitPlan(np.arange(n), target, calib, seed)


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Calibration inputs plus the dataset indices they were taken from."""

    inputs: np.ndarray
    indices: np.ndarray
    labels: np.ndarray = None

    @classmethod
    def from_plan(cls, dataset, plan):
        idx = np.asarray(plan.calibration, dtype=np.int64)
        if not all(plan.is_member(i) for i in idx):
            raise ValueError("calibration leaks examples outside the target training split")
        return cls(dataset.inputs[idx], idx, dataset.labels[idx])

    def check_no_leakage(self, target_train):
        allowed = set(int(i) for i in target_train)
        leaked = [int(i) for i in self.indices if int(i) not in allowed]
        if leaked:
            raise ValueError(f"calibration indices outside the training split: {leaked[:5]}")
        return True
