"""Experiment configuration: a TOML document validated against a strict schema.

Example::

    name = "easy-trend"
    seeds = [0, 1, 2]
    methods = ["RTN", "AdaRound"]
    bitwidths = ["Full", "B4", "B158"]
    modes = ["OnlineFixedVar"]
    shadows = 16
    output_dir = "runs/easy"

    [dataset]
    kind = "easy"          # easy | hard | gaussian | idx

    [recipe]
    epochs = 100

Unknown keys anywhere raise :class:`ConfigurationError`.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import tomli
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .. import data, netcore
from ..errors import ConfigurationError
from ..mia import AttackMode
from ..ptq import METHODS, AdaRoundConfig
from ..quantgrid import BitWidth

SEED_ENV = "BITLEAK_SEED_OVERRIDE"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    kind: Literal["easy", "hard", "gaussian", "idx"] = "easy"
    classes: Optional[int] = None
    dim: int = 32
    n_per_class: Optional[int] = None
    sep: Optional[float] = None
    images: Optional[str] = None
    labels: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "idx" and not (self.images and self.labels):
            raise ValueError("idx datasets need both 'images' and 'labels' paths")
        if self.kind == "gaussian" and self.sep is None:
            raise ValueError("gaussian datasets need 'sep'")
        return self

    def build(self, seed):
        """The dataset for one seed; synthetic tasks are redrawn per seed."""
        if self.kind == "idx":
            return data.load_idx(self.images, self.labels)
        if self.kind == "easy":
            k, n = self.classes or 10, self.n_per_class or 200
            return data.gen_easy_mixture(k, self.dim, n, seed)
        if self.kind == "hard":
            k, n = self.classes or 20, self.n_per_class or 100
            return data.gen_hard_mixture(k, self.dim, n, seed)
        k, n = self.classes or 10, self.n_per_class or 200
        return data.gen_gaussian_mixture(k, self.dim, n, self.sep, seed)


class RecipeConfig(_Strict):
    epochs: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: Literal["cosine", "constant"] = "cosine"
    batch_size: int = 64

    def recipe(self, seed):
        return netcore.TrainRecipe(seed=seed, **self.model_dump())


class AdaRoundSettings(_Strict):
    iters: int = 2000
    lr: float = 1e-2
    lam: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 1.0 / 3.0

    def config(self):
        return AdaRoundConfig(**self.model_dump())


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seeds: List[int]
    methods: List[str] = list(METHODS)
    bitwidths: List[str] = ["Full", "B8", "B4", "B2", "B158", "B1"]
    decouple_last: Optional[str] = None
    modes: List[str] = ["OnlineFixedVar"]
    shadows: int = 16
    calib_size: int = 256
    hidden: Tuple[int, ...] = (128, 128)
    partition: Literal["pairs", "singletons"] = "pairs"
    dataset: DatasetConfig = DatasetConfig()
    recipe: RecipeConfig = RecipeConfig()
    adaround: AdaRoundSettings = AdaRoundSettings()
    output_dir: str = "runs/experiment"

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seeds must be nonempty")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad or not v:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}, got {bad}")
        return v

    @field_validator("bitwidths")
    @classmethod
    def _bits(cls, v):
        if not v:
            raise ValueError("bitwidths must be nonempty")
        return [str(BitWidth.parse(b)) for b in v]

    @field_validator("decouple_last")
    @classmethod
    def _decouple(cls, v):
        return None if v is None else str(BitWidth.parse(v))

    @field_validator("modes")
    @classmethod
    def _modes(cls, v):
        if not v:
            raise ValueError("modes must be nonempty")
        return [str(AttackMode.parse(m)) for m in v]

    @field_validator("shadows")
    @classmethod
    def _k(cls, v):
        if v < 2 or v % 2:
            raise ValueError("shadows must be even and >= 2")
        return v

    def content_hash(self):
        """SHA-256 of every field that influences results (not ``output_dir``)."""
        doc = self.model_dump(mode="json", exclude={"output_dir"})
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **changes):
        return self.model_copy(update=changes)


def _wrap(exc):
    msgs = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
    return ConfigurationError("invalid experiment config: " + "; ".join(msgs))


def parse_config(doc, env=None):
    """Validate a mapping; ``BITLEAK_SEED_OVERRIDE`` (comma list) replaces seeds."""
    env = os.environ if env is None else env
    doc = dict(doc)
    override = env.get(SEED_ENV)
    if override:
        try:
            doc["seeds"] = [int(s) for s in override.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be a comma-separated list of ints") from exc
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise _wrap(exc) from None


def load_config(path, env=None):
    try:
        doc = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return parse_config(doc, env)
