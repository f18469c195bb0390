"""Likelihood-threshold anomaly detection and the private voting ensemble.

A single model classifies a point as in-distribution when its log-density
exceeds a threshold. The private variant partitions the data, trains one
non-private flow per part, counts threshold votes, and releases the label
through the binary exponential mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accounting import exp_mech_binary
from .errors import ConfigurationError
from .flows import FlowModel, build_maf
from .training import train_flow


def threshold_classify(model: FlowModel, x, threshold: float) -> bool:
    """True (in-distribution) iff log p(x) strictly exceeds the threshold."""
    return bool(model.log_prob(np.asarray(x, dtype=float)) > threshold)


def select_threshold(scores, labels):
    """Pick the accuracy-maximizing cut for the rule "in iff score > T".

    Candidates are midpoints between adjacent sorted unique scores plus the
    two all-in / all-out extremes; ties break toward the larger threshold.
    Returns (threshold, accuracy). Labels: 1 = in-distribution.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(set(labels.tolist())) < 2:
        raise ConfigurationError("both classes must be present")
    uniq = np.unique(scores)
    candidates = [uniq[0] - 1.0, uniq[-1]]
    candidates.extend(0.5 * (uniq[:-1] + uniq[1:]))
    best_t, best_acc = None, -1.0
    for t in candidates:
        acc = float(np.mean((scores > t).astype(int) == labels))
        if acc > best_acc or (acc == best_acc and t > best_t):
            best_t, best_acc = float(t), acc
    return best_t, best_acc


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(scores, labels) -> RocCurve:
    """Threshold sweep over the unique scores; AUC by the trapezoid rule.

    Positive class (label 1) is predicted when score > threshold, so the
    curve starts at (0, 0) for threshold +inf and ends at (1, 1).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("both classes must be present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # Keep one point per distinct score (the last index of each run).
    distinct = np.flatnonzero(np.diff(sorted_scores, append=np.nan))
    thresholds = np.concatenate([[np.inf], sorted_scores[distinct]])
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds, fpr, tpr, auc)


def gen_tail_anomalies(reference, count: int, seed=0,
                       lower=(5.0, 30.0), upper=(70.0, 95.0)) -> np.ndarray:
    """Uniform draws from the per-dimension tail bands of a reference sample
    (between the 5th-30th and 70th-95th percentiles by default); the band is
    chosen by a fair coin per coordinate."""
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    n, d = reference.shape
    if n < 20:
        raise ConfigurationError("need at least 20 reference rows")
    rng = np.random.default_rng(seed)
    qs = np.percentile(reference, [lower[0], lower[1], upper[0], upper[1]],
                       axis=0)  # (4, D)
    if np.any(reference.max(axis=0) == reference.min(axis=0)):
        raise ConfigurationError("degenerate dimension: all values equal")
    pick_upper = rng.random((count, d)) < 0.5
    lo = np.where(pick_upper, qs[2], qs[0])
    hi = np.where(pick_upper, qs[3], qs[1])
    return lo + rng.random((count, d)) * (hi - lo)


@dataclass
class EnsembleDetector:
    models: list
    threshold: float
    query_epsilon: float = 1.0

    @property
    def k(self) -> int:
        return len(self.models)

    def votes(self, x) -> int:
        """Number of member models whose log-density at x exceeds the
        threshold."""
        x = np.asarray(x, dtype=float)
        return sum(int(m.log_prob(x) > self.threshold) for m in self.models)


def partition_indices(n: int, k: int, seed=0):
    """Seeded shuffle then contiguous split into k near-equal parts.

    Equal-size parts keep the vote sensitivity of one changed example at 1.
    """
    if k < 1 or k > n:
        raise ConfigurationError("need 1 <= k <= n")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def build_ensemble(X, k: int, threshold: float = 0.0, *, n_blocks: int = 5,
                   hidden: int = 64, train_steps: int = 1000,
                   batch_size: int = 128, learning_rate: float = 1e-3,
                   seed=0) -> EnsembleDetector:
    """Train one non-private flow per data partition."""
    X = np.asarray(X, dtype=float)
    parts = partition_indices(X.shape[0], k, seed=seed)
    min_size = min(len(p) for p in parts)
    if min_size < 2:
        raise ConfigurationError("insufficient data per partition")
    seq = np.random.SeedSequence(seed)
    models = []
    for part, child in zip(parts, seq.spawn(k)):
        child_seed = child.generate_state(1)[0]
        model = build_maf(X.shape[1], n_blocks=n_blocks, hidden=hidden,
                          seed=child_seed)
        train_flow(X[part], model, train_steps,
                   batch_size=min(batch_size, len(part)),
                   learning_rate=learning_rate, seed=child_seed)
        models.append(model)
    return EnsembleDetector(models, threshold)


def dp_ad_query(detector: EnsembleDetector, x, eps: float, seed) -> bool:
    """Private in/out-of-distribution label for one query point."""
    c = detector.votes(x)
    return exp_mech_binary(c, detector.k, eps, seed)


def majority_label(detector: EnsembleDetector, x, seed) -> bool:
    """Non-private majority vote; an exact tie falls back to the fair coin
    the exponential mechanism would use at infinite eps."""
    c = detector.votes(x)
    if 2 * c != detector.k:
        return 2 * c > detector.k
    return bool(np.random.default_rng(seed).random() < 0.5)
