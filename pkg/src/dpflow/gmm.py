"""Diagonal-covariance Gaussian mixtures: density, sampling, EM fitting.

Used as an alternative base density for flow models on multi-modal data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError

VARIANCE_FLOOR = 1e-6


@dataclass
class GmmParams:
    """Mixture weights, means and per-component diagonal variances."""

    weights: np.ndarray    # (M,), simplex
    means: np.ndarray      # (M, D)
    variances: np.ndarray  # (M, D), entrywise >= VARIANCE_FLOOR

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise ConfigurationError("means and variances must share a shape")
        if self.weights.shape[0] != self.means.shape[0]:
            raise ConfigurationError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigurationError("weights must lie on the simplex")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ConfigurationError("variances below floor")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_logpdf(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """Per-component Gaussian log-densities, shape (n, M)."""
    diff = x[:, None, :] - gmm.means[None, :, :]          # (n, M, D)
    quad = np.sum(diff * diff / gmm.variances[None], axis=2)
    norm = np.sum(np.log(gmm.variances), axis=1) + gmm.dim * math.log(2 * math.pi)
    return -0.5 * (quad + norm[None, :])


def gmm_logpdf(gmm: GmmParams, x) -> np.ndarray:
    """log sum_m pi_m N(x; mean_m, diag var_m), via log-sum-exp.

    Accepts a single point (D,) or a batch (n, D); returns a scalar or (n,).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    log_joint = _component_logpdf(gmm, pts) + np.log(gmm.weights)[None, :]
    out = logsumexp(log_joint, axis=1)
    return float(out[0]) if single else out


def gmm_logpdf_grad(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """Gradient of the mixture log-density with respect to x, shape (n, D)."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    log_joint = _component_logpdf(gmm, pts) + np.log(gmm.weights)[None, :]
    resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    grads = -(pts[:, None, :] - gmm.means[None]) / gmm.variances[None]
    return np.sum(resp[:, :, None] * grads, axis=1)


def gmm_sample(gmm: GmmParams, n: int, seed) -> np.ndarray:
    """Draw n points: categorical component choice, then a Gaussian draw."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    return gmm.means[comps] + noise * np.sqrt(gmm.variances[comps])


def _kmeanspp_centers(X: np.ndarray, m: int, rng) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    for _ in range(m - 1):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(len(X))])
            continue
        centers.append(X[rng.choice(len(X), p=d2 / total)])
    return np.array(centers)


def gmm_fit_em(X, n_components: int, n_iters: int = 100, seed=0,
               variance_floor: float = VARIANCE_FLOOR):
    """Fit a diagonal-covariance mixture by EM with k-means++ seeding.

    Returns (GmmParams, per-iteration mean log-likelihoods). The likelihood
    trace is nondecreasing except when the variance floor or an empty-cluster
    reseed intervenes.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n <= n_components:
        raise ConfigurationError("need more points than components")
    rng = np.random.default_rng(seed)

    means = _kmeanspp_centers(X, n_components, rng)
    variances = np.tile(np.maximum(X.var(axis=0), variance_floor),
                        (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    ll_trace = []
    for _ in range(n_iters):
        gmm = GmmParams(weights, means, variances)
        log_joint = _component_logpdf(gmm, X) + np.log(weights)[None, :]
        log_norm = logsumexp(log_joint, axis=1, keepdims=True)
        ll_trace.append(float(np.mean(log_norm)))
        resp = np.exp(log_joint - log_norm)                # (n, M)

        counts = resp.sum(axis=0)
        empty = counts < 1e-10
        nonempty = ~empty
        r = resp[:, nonempty]
        c = counts[nonempty][:, None]
        means[nonempty] = (r.T @ X) / c
        diff2 = (X[:, None, :] - means[None, nonempty, :]) ** 2
        variances[nonempty] = np.maximum(
            np.einsum("nm,nmd->md", r, diff2) / c, variance_floor)
        for m_idx in np.flatnonzero(empty):
            means[m_idx] = X[rng.integers(n)]
            variances[m_idx] = variance_floor
            counts[m_idx] = 1.0  # ~1/n weight, enough to recapture a point
        weights = counts / counts.sum()

    return GmmParams(weights, means, variances), ll_trace
