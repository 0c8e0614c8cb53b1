"""ROC curves and the privacy metrics: AUROC, log-AUROC, TPR at a fixed FPR."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOG_FPR_MIN = 1e-3
LOG_GRID_POINTS = 200


@dataclass
class ROCReport:
    thresholds: np.ndarray  # descending; +inf first for the (0, 0) point
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float
    n_pos: Optional[int] = None
    n_neg: Optional[int] = None
    log_auroc: float = float("nan")
    tpr_at: dict = field(default_factory=dict)
    under_resolved: set = field(default_factory=set)

    @classmethod
    def from_curve(cls, fpr, tpr):
        """Report for an analytic curve (no finite-sample resolution limit)."""
        fpr = np.asarray(fpr, dtype=np.float64)
        tpr = np.asarray(tpr, dtype=np.float64)
        auroc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
        rep = cls(np.full(len(fpr), np.nan), tpr, fpr, auroc)
        rep.log_auroc = log_auroc(rep)
        return rep

    def to_dict(self, levels=(0.001,)):
        tpr_at = {f"{lvl:g}": tpr_at_fpr(self, lvl) for lvl in levels}
        return {
            "auroc": self.auroc,
            "log_auroc": self.log_auroc,
            "tpr_at": tpr_at,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "under_resolved": sorted(f"{lvl:g}" for lvl in self.under_resolved),
        }

    def to_json(self, levels=(0.001,)):
        return json.dumps(self.to_dict(levels), indent=2, sort_keys=True)

    def curve_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in zip(self.fpr, self.tpr):
            w.writerow([repr(float(f)), repr(float(t))])
        return buf.getvalue()


def roc(scores, truth):
    """ROC from scores (higher = member) and membership bits.

    Thresholds sweep the distinct score values, so tied scores cross together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have equal length")
    n_pos = int(truth.sum())
    n_neg = int(len(truth) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both members and non-members")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(t)[last_of_group]
    fp = np.cumsum(~t)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auroc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    rep = ROCReport(thresholds, tpr, fpr, auroc, n_pos, n_neg)
    rep.log_auroc = log_auroc(rep)
    rep.tpr_at[0.001] = tpr_at_fpr(rep, 0.001)
    return rep


def tpr_at_fpr(report, level):
    """TPR at FPR ``level``, interpolated linearly along the upper ROC envelope.

    When the negatives cannot resolve ``level`` (fewer than 1/level of them),
    the TPR at the smallest positive empirical FPR is returned and the level
    is recorded in ``report.under_resolved``.
    """
    if not 0 < level < 1:
        raise ValueError("FPR level must lie in (0, 1)")
    fpr, tpr = report.fpr, report.tpr
    if report.n_neg is not None and report.n_neg * level < 1:
        report.under_resolved.add(level)
        first = int(np.argmax(fpr > 0))
        return float(tpr[first])
    # last point with fpr <= level carries the highest tpr there
    i = int(np.searchsorted(fpr, level, side="right")) - 1
    if fpr[i] == level or i == len(fpr) - 1:
        return float(tpr[i])
    j = i + 1
    frac = (level - fpr[i]) / (fpr[j] - fpr[i])
    return float(tpr[i] + frac * (tpr[j] - tpr[i]))


def log_auroc(report, fpr_min=LOG_FPR_MIN, points=LOG_GRID_POINTS):
    """Area under TPR against log-FPR on [fpr_min, 1], normalized to [0, 1].

    TPR is sampled at ``points`` log-spaced FPR levels and integrated with the
    trapezoid rule in log-FPR.
    """
    grid = np.logspace(np.log10(fpr_min), 0.0, points)
    under = set(report.under_resolved)
    # at FPR 1 take the left limit: a final vertical jump adds no area
    end = float(report.tpr[int(np.argmax(report.fpr >= 1.0))])
    vals = np.array([tpr_at_fpr(report, f) if f < 1 else end for f in grid])
    report.under_resolved = under  # sweep levels do not count as requested levels
    x = np.log(grid)
    area = np.sum((x[1:] - x[:-1]) * (vals[1:] + vals[:-1]) / 2.0)
    return float(area / (x[-1] - x[0]))


def mann_whitney_auroc(scores, truth):
    """P(member score > non-member score), ties counted half, by direct pair count."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    pos, neg = scores[truth], scores[~truth]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))
