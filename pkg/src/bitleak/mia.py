"""Shadow-model ensembles and the likelihood-ratio membership attack (LiRA)."""

from __future__ import annotations

import csv
import enum
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from . import netcore
from .errors import CoverageError

P_CLIP = 1e-12
PHI_MAX = float(np.log((1 - P_CLIP) / P_CLIP))
SIGMA_FLOOR = 1e-6


class AttackMode(enum.Enum):
    ONLINE = "Online"
    ONLINE_FIXED = "OnlineFixedVar"
    OFFLINE = "Offline"
    OFFLINE_FIXED = "OfflineFixedVar"

    @property
    def online(self):
        return self in (AttackMode.ONLINE, AttackMode.ONLINE_FIXED)

    @property
    def fixed_variance(self):
        return self in (AttackMode.ONLINE_FIXED, AttackMode.OFFLINE_FIXED)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for mode in cls:
            if mode.value.lower() == str(value).lower():
                return mode
        raise ValueError(f"unknown attack mode {value!r}")

    def __str__(self):
        return self.value


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def build_shadow_splits(n, K, seed):
    """K x n boolean matrix; every column holds exactly K/2 ones.

    Each column is an independent uniform draw from the (K choose K/2)
    balanced patterns.
    """
    if K < 2 or K % 2:
        raise ValueError(f"shadow count must be even and >= 2, got {K}")
    base = np.zeros((n, K), dtype=bool)
    base[:, : K // 2] = True
    return _rng(seed, 0x736864).permuted(base, axis=1).T.copy()


def check_membership(bits):
    bits = np.asarray(bits, dtype=bool)
    K = bits.shape[0]
    if K % 2 or np.any(bits.sum(axis=0) != K // 2):
        raise ValueError("every example must be in exactly half of the shadow sets")
    return bits


@dataclass
class ShadowEnsemble:
    models: list
    membership: np.ndarray  # [K x N]
    recipe: netcore.TrainRecipe

    @property
    def size(self):
        return len(self.models)

    def confidences(self, inputs, labels):
        """Logit-scaled confidence of every shadow on every query, [K x N]."""
        return np.stack([confidences(m, inputs, labels) for m in self.models])


def _train_shadow(args):
    dataset, idx, recipe, hidden, init_seed = args
    net = netcore.build_mlp(dataset.dim, dataset.classes, hidden, seed=init_seed)
    trained, _ = netcore.train(net, dataset.subset(idx), recipe)
    return trained


def shadow_jobs(dataset, membership, recipe, seed, hidden=(128, 128)):
    jobs = []
    for i, row in enumerate(membership):
        member_seed = int(np.random.SeedSequence([seed, 0x7368, i]).generate_state(1)[0])
        jobs.append((dataset, np.flatnonzero(row), recipe.replace(seed=member_seed), hidden, member_seed))
    return jobs


def train_shadows(dataset, K, recipe, seed, hidden=(128, 128), workers=1):
    """Train K full-precision shadows on balanced halves of ``dataset``."""
    membership = build_shadow_splits(len(dataset), K, seed)
    jobs = shadow_jobs(dataset, membership, recipe, seed, hidden)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(_train_shadow, jobs))
    else:
        models = [_train_shadow(j) for j in jobs]
    return ShadowEnsemble(models, membership, recipe)


def logit_confidence(p):
    """ln(p) - ln(1 - p) with p clipped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1 - P_CLIP)
    return np.log(p) - np.log1p(-p)


def confidences(model, inputs, labels):
    """Logit-scaled true-class probability, computed stably from the logits."""
    z = netcore.predict(model, inputs)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    zy = z[rows, labels]
    others = z.copy()
    others[rows, labels] = -np.inf
    m = others.max(axis=1)
    lse = m + np.log(np.exp(others - m[:, None]).sum(axis=1))
    return np.clip(zy - lse, -PHI_MAX, PHI_MAX)


@dataclass
class LiRAStats:
    mu_in: Optional[np.ndarray]
    mu_out: np.ndarray
    sigma_in: Optional[np.ndarray]
    sigma_out: np.ndarray
    mode: AttackMode
    in_counts: Optional[np.ndarray] = None
    out_counts: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.mu_out)


def _masked_mean_sd(phi, mask):
    count = mask.sum(axis=0)
    safe = np.maximum(count, 1)
    mean = np.where(mask, phi, 0.0).sum(axis=0) / safe
    dev = np.where(mask, phi - mean, 0.0)
    var = (dev ** 2).sum(axis=0) / np.maximum(count - 1, 1)
    return mean, np.maximum(np.sqrt(var), SIGMA_FLOOR), count


def fit_stats(phi, membership, mode):
    """Per-example Gaussian fits from a [K x N] matrix of shadow confidences."""
    mode = AttackMode.parse(mode)
    phi = np.asarray(phi, dtype=np.float64)
    bits = np.asarray(membership, dtype=bool)
    if phi.shape != bits.shape:
        raise ValueError("confidence and membership matrices differ in shape")
    mu_out, sd_out, n_out = _masked_mean_sd(phi, ~bits)
    if np.any(n_out == 0):
        raise CoverageError(f"{int(np.sum(n_out == 0))} examples have no out-shadows")
    mu_in = sd_in = n_in = None
    if mode.online:
        mu_in, sd_in, n_in = _masked_mean_sd(phi, bits)
        if np.any(n_in == 0):
            raise CoverageError(f"{int(np.sum(n_in == 0))} examples have no in-shadows")
    if mode.fixed_variance:
        pooled = np.mean(np.concatenate([sd_in, sd_out])) if mode.online else np.mean(sd_out)
        pooled = max(float(pooled), SIGMA_FLOOR)
        sd_out = np.full_like(sd_out, pooled)
        if mode.online:
            sd_in = np.full_like(sd_in, pooled)
    return LiRAStats(mu_in, mu_out, sd_in, sd_out, mode, n_in, n_out)


def fit_lira_stats(ensemble, inputs, labels, mode, query_index=None):
    """Fit LiRA statistics for queries; ``query_index`` maps queries to membership columns."""
    phi = ensemble.confidences(inputs, labels)
    bits = ensemble.membership
    if query_index is not None:
        bits = bits[:, np.asarray(query_index)]
    return fit_stats(phi, bits, mode)


def _gauss_logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)


def lira_score(phi, stats, mode=None):
    """Membership score, higher meaning more likely a member.

    Online modes return the Gaussian log-likelihood ratio (in vs out); offline
    modes return the out-distribution CDF at ``phi``.
    """
    mode = AttackMode.parse(mode) if mode is not None else stats.mode
    phi = np.asarray(phi, dtype=np.float64)
    if mode.online:
        return _gauss_logpdf(phi, stats.mu_in, stats.sigma_in) - _gauss_logpdf(
            phi, stats.mu_out, stats.sigma_out
        )
    # keep the open interval (0, 1) even where the tail underflows
    cdf = ndtr((phi - stats.mu_out) / stats.sigma_out)
    return np.clip(cdf, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


@dataclass
class AttackResult:
    scores: np.ndarray
    truth: np.ndarray
    phi_target: np.ndarray
    stats: LiRAStats
    example_ids: np.ndarray

    def __post_init__(self):
        if len(self.scores) != len(self.truth):
            raise ValueError("scores and truth differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("attack produced non-finite scores")

    def to_csv(self):
        st = self.stats
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["example_id", "phi_target", "mu_in", "mu_out", "sigma", "score", "truth"])
        mu_in = st.mu_in if st.mu_in is not None else np.full(len(st.mu_out), np.nan)
        for j in range(len(self.scores)):
            w.writerow([
                int(self.example_ids[j]), repr(float(self.phi_target[j])), repr(float(mu_in[j])),
                repr(float(st.mu_out[j])), repr(float(st.sigma_out[j])),
                repr(float(self.scores[j])), int(self.truth[j]),
            ])
        return buf.getvalue()


def attack(target, inputs, labels, truth, shadow_phi, membership, mode, example_ids=None):
    """Score every query against ``target`` given precomputed shadow confidences.

    ``shadow_phi`` and ``membership`` are [K x Q] and aligned with the queries.
    """
    mode = AttackMode.parse(mode)
    truth = np.asarray(truth).astype(bool)
    stats = fit_stats(shadow_phi, membership, mode)
    phi_t = confidences(target, inputs, labels)
    scores = lira_score(phi_t, stats, mode)
    ids = np.arange(len(truth)) if example_ids is None else np.asarray(example_ids)
    return AttackResult(scores, truth, phi_t, stats, ids)


def attack_ensemble(target, inputs, labels, truth, ensemble, mode, query_index=None):
    phi = ensemble.confidences(inputs, labels)
    bits = ensemble.membership if query_index is None else ensemble.membership[:, query_index]
    return attack(target, inputs, labels, truth, phi, bits, mode, query_index)
