"""Prediction error and partition-agreement scores.

Label arguments are always ``(truth, prediction)``. Pair-counting scores are
computed from integer pair counts and a single final division, so they are
exactly reproducible. Logarithms are natural.

Degenerate cases follow one rule: two identical partitions score 1. With
``n`` items, partitions that are both a single block, or both all
singletons, get 1 from NMI, AMI, ARI, FMI, F1 and Jaccard.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, LengthMismatch, NothingToEvaluate, ShapeMismatch

CLUSTER_FIELDS = ("nmi", "ami", "fmi", "ari", "v_measure", "f1", "jaccard")
REPORT_FIELDS = ("rmse",) + CLUSTER_FIELDS


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"shapes differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ShapeMismatch("rmse of empty arrays")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


@dataclass(frozen=True)
class ContingencyTable:
    """``counts[a, b]`` = number of items with truth class ``a`` and predicted cluster ``b``."""

    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


@dataclass(frozen=True)
class PairCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _codes(labels) -> np.ndarray:
    """Integer codes in sorted label order."""
    if not isinstance(labels, np.ndarray):
        # hashing is much cheaper than np.unique for short Python sequences
        try:
            pos = {v: i for i, v in enumerate(sorted(set(labels)))}
        except TypeError:
            pass
        else:
            return np.fromiter((pos[v] for v in labels), dtype=np.int64, count=len(labels))
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.reshape(-1)


def contingency(labels_true: Sequence, labels_pred: Sequence) -> ContingencyTable:
    if len(labels_true) != len(labels_pred):
        raise LengthMismatch(f"label sequences have lengths {len(labels_true)} and {len(labels_pred)}")
    if len(labels_true) == 0:
        raise LengthMismatch("empty label sequences")
    a, b = _codes(labels_true), _codes(labels_pred)
    nb = b.max() + 1
    counts = np.bincount(a * nb + b, minlength=(a.max() + 1) * nb).reshape(-1, nb)
    return ContingencyTable(counts.astype(np.int64))


def _as_table(t) -> ContingencyTable:
    return t if isinstance(t, ContingencyTable) else ContingencyTable(np.asarray(t, dtype=np.int64))


def _comb2(x) -> int:
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def pair_counts_from_table(table) -> PairCounts:
    t = _as_table(table)
    n = t.n
    both = _comb2(t.counts)
    same_true = _comb2(t.row_sums)
    same_pred = _comb2(t.col_sums)
    tp = both
    fp = same_pred - both
    fn = same_true - both
    tn = n * (n - 1) // 2 - tp - fp - fn
    return PairCounts(tp, fp, fn, tn)


def pair_counts(labels_true: Sequence, labels_pred: Sequence) -> PairCounts:
    return pair_counts_from_table(contingency(labels_true, labels_pred))


def _entropy(counts: np.ndarray) -> float:
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    n = c.sum()
    return float(-np.sum(c / n * np.log(c / n)))


def mutual_info(table) -> float:
    t = _as_table(table)
    n = t.n
    a, b = t.row_sums.astype(np.float64), t.col_sums.astype(np.float64)
    i, j = np.nonzero(t.counts)
    nij = t.counts[i, j].astype(np.float64)
    mi = np.sum(nij / n * (np.log(nij) + np.log(n) - np.log(a[i]) - np.log(b[j])))
    return max(float(mi), 0.0)


def _trivial_pair(t: ContingencyTable) -> bool:
    """Both partitions are one block, or both are all singletons."""
    r, c = t.counts.shape
    return (r == 1 and c == 1) or (r == t.n and c == t.n)


def nmi(table) -> float:
    """Mutual information over the geometric mean of the two entropies."""
    t = _as_table(table)
    hx, hy = _entropy(t.row_sums), _entropy(t.col_sums)
    if hx == 0.0 and hy == 0.0:
        return 1.0
    if hx == 0.0 or hy == 0.0:
        return 0.0
    return mutual_info(t) / math.sqrt(hx * hy)


def expected_mutual_info(table) -> float:
    """``E[MI]`` under random permutation with fixed marginals (hypergeometric model)."""
    t = _as_table(table)
    n = t.n
    a, b = t.row_sums, t.col_sums
    lg_n = gammaln(n + 1)
    total = 0.0
    for ai in a:
        for bj in b:
            lo, hi = max(1, ai + bj - n), min(ai, bj)
            if lo > hi:
                continue
            k = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                - lg_n - gammaln(k + 1) - gammaln(ai - k + 1) - gammaln(bj - k + 1)
                - gammaln(n - ai - bj + k + 1)
            )
            term = k / n * (np.log(n) + np.log(k) - np.log(ai) - np.log(bj))
            total += float(np.sum(term * np.exp(log_p)))
    return total


def ami(table) -> float:
    """Adjusted mutual information; the maximum is the arithmetic mean of the entropies."""
    t = _as_table(table)
    if _trivial_pair(t):
        return 1.0
    hx, hy = _entropy(t.row_sums), _entropy(t.col_sums)
    emi = expected_mutual_info(t)
    return (mutual_info(t) - emi) / (0.5 * (hx + hy) - emi)


def _pc(x) -> PairCounts:
    return x if isinstance(x, PairCounts) else pair_counts_from_table(x)


def fmi(pc) -> float:
    pc = _pc(pc)
    if pc.tp + pc.fp + pc.fn == 0:
        return 1.0
    denom = (pc.tp + pc.fp) * (pc.tp + pc.fn)
    if denom == 0:
        return 0.0
    return pc.tp / math.sqrt(denom)


def ri(pc) -> float:
    pc = _pc(pc)
    if pc.total == 0:
        return 1.0
    return (pc.tp + pc.tn) / pc.total


def ari(table) -> float:
    """Adjusted Rand index, ``(index - expected) / (max - expected)`` from the marginals.

    Written in pair counts as ``2 (tp tn - fn fp) / ((tp+fn)(fn+tn) + (tp+fp)(fp+tn))``;
    a zero denominator (both partitions trivial and equal) gives 1.
    """
    pc = _pc(table)
    num = 2 * (pc.tp * pc.tn - pc.fn * pc.fp)
    den = (pc.tp + pc.fn) * (pc.fn + pc.tn) + (pc.tp + pc.fp) * (pc.fp + pc.tn)
    if den == 0:
        return 1.0
    return num / den


def pair_f1(pc) -> float:
    pc = _pc(pc)
    den = 2 * pc.tp + pc.fp + pc.fn
    return 1.0 if den == 0 else 2 * pc.tp / den


def pair_jaccard(pc) -> float:
    pc = _pc(pc)
    den = pc.tp + pc.fp + pc.fn
    return 1.0 if den == 0 else pc.tp / den


def homogeneity_completeness(table) -> tuple[float, float]:
    """``1 - H(truth | pred) / H(truth)`` and ``1 - H(pred | truth) / H(pred)``."""
    t = _as_table(table)
    hx, hy = _entropy(t.row_sums), _entropy(t.col_sums)
    mi = mutual_info(t)
    # H(X|Y) = H(X) - MI
    h = 1.0 if hx == 0.0 else mi / hx
    c = 1.0 if hy == 0.0 else mi / hy
    return h, c


def v_measure(table) -> float:
    h, c = homogeneity_completeness(table)
    return 0.0 if h + c == 0.0 else 2.0 * h * c / (h + c)


@dataclass(frozen=True)
class EvalReport:
    rmse: Optional[float] = None
    nmi: Optional[float] = None
    ami: Optional[float] = None
    fmi: Optional[float] = None
    ari: Optional[float] = None
    v_measure: Optional[float] = None
    f1: Optional[float] = None
    jaccard: Optional[float] = None

    def as_dict(self, percent: bool = False) -> dict:
        """Fields that were computed; ``percent`` scales the clustering scores by 100."""
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                continue
            out[k] = 100.0 * v if percent and k in CLUSTER_FIELDS else v
        return out

    def to_json(self, percent: bool = False) -> str:
        return json.dumps(self.as_dict(percent), indent=2) + "\n"

    def to_csv(self, percent: bool = False) -> str:
        d = self.as_dict(percent)
        cols = [k for k in REPORT_FIELDS if k in d]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow([repr(float(d[k])) for k in cols])
        return buf.getvalue()


def evaluate(y_true=None, y_pred=None, labels_true=None, labels_pred=None) -> EvalReport:
    have_matrix = y_true is not None or y_pred is not None
    have_labels = labels_true is not None or labels_pred is not None
    if not have_matrix and not have_labels:
        raise NothingToEvaluate("supply protein matrices, label sequences, or both")
    if have_matrix and (y_true is None or y_pred is None):
        raise ConfigError("RMSE needs both the true and the predicted matrix")
    if have_labels and (labels_true is None or labels_pred is None):
        raise ConfigError("clustering scores need both the true and the predicted labels")
    fields = {}
    if have_matrix:
        fields["rmse"] = rmse(y_true, y_pred)
    if have_labels:
        t = contingency(labels_true, labels_pred)
        pc = pair_counts_from_table(t)
        fields.update(
            nmi=nmi(t), ami=ami(t), fmi=fmi(pc), ari=ari(pc),
            v_measure=v_measure(t), f1=pair_f1(pc), jaccard=pair_jaccard(pc),
        )
    return EvalReport(**fields)


__all__ = [
    "ContingencyTable", "PairCounts", "EvalReport", "rmse", "contingency",
    "pair_counts", "pair_counts_from_table", "mutual_info", "expected_mutual_info",
    "nmi", "ami", "fmi", "ri", "ari", "pair_f1", "pair_jaccard",
    "homogeneity_completeness", "v_measure", "evaluate",
]
