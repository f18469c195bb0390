"""Privacy accounting and noise mechanisms.

Two interchangeable accountants map training progress (steps t, sampling
ratio q, noise multiplier sigma, tolerance delta) to a spent epsilon:

* ``rdp``: per-step Renyi-DP of the subsampled Gaussian mechanism at integer
  orders, composed linearly over steps, converted via
  eps = min_alpha [eps(alpha) + log(1/delta) / (alpha - 1)].
* ``gdp``: Gaussian-DP composition with the CLT-approximate per-run
  mu = q * sqrt(t * (exp(1/sigma^2) - 1)), converted analytically.

Also provides the Gaussian and Laplace noise mechanisms and the binary
exponential mechanism used for private vote aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, log_ndtr, logsumexp, ndtr

from .errors import ConfigurationError

DEFAULT_ORDERS = tuple(range(2, 257))


def _log_binom(n: int, k: int) -> float:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def rdp_subsampled_gaussian(alpha: int, q: float, sigma: float) -> float:
    """Per-step RDP of order ``alpha`` for a Gaussian mechanism applied to a
    uniform without-replacement subsample with sampling ratio ``q``.

    The base mechanism has RDP curve eps(j) = j / (2 sigma^2); the subsampling
    bound is a binomial series in q, evaluated in log space so large orders do
    not overflow.
    """
    if alpha < 2 or int(alpha) != alpha:
        raise ConfigurationError(f"order must be an integer >= 2, got {alpha}")
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"sampling ratio must be in (0, 1], got {q}")
    if sigma <= 0.0:
        raise ConfigurationError(f"noise multiplier must be positive, got {sigma}")

    alpha = int(alpha)
    inv = 1.0 / (sigma * sigma)  # eps(2) of the base mechanism
    log_q = math.log(q)

    # j = 2 term: q^2 C(alpha,2) min{4(e^eps2 - 1), 2 e^eps2}.
    # log(4(e^x - 1)) = log 4 + x + log1p(-e^-x) is stable for all x > 0.
    log_b2 = min(math.log(4.0) + inv + math.log1p(-math.exp(-inv)),
                 math.log(2.0) + inv)
    terms = [0.0, 2.0 * log_q + _log_binom(alpha, 2) + log_b2]
    # j >= 3 terms: q^j C(alpha,j) e^{(j-1) eps(j)} * 2.
    for j in range(3, alpha + 1):
        terms.append(j * log_q + _log_binom(alpha, j)
                     + (j - 1) * j * inv / 2.0 + math.log(2.0))
    return float(logsumexp(terms)) / (alpha - 1)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP values at each order; composition over t steps is t times
    this curve, pointwise."""
    return np.array([rdp_subsampled_gaussian(a, q, sigma) for a in orders])


def rdp_to_dp(orders, curve, delta: float) -> float:
    """Convert a cumulative RDP curve to an (eps, delta) guarantee."""
    orders = np.asarray(orders, dtype=float)
    curve = np.asarray(curve, dtype=float)
    if orders.size == 0:
        raise ConfigurationError("empty order grid")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}")
    return float(np.min(curve + math.log(1.0 / delta) / (orders - 1.0)))


def gdp_mu(t: int, q: float, sigma: float) -> float:
    """CLT-approximate mu after t subsampled Gaussian steps."""
    if sigma <= 0.0:
        raise ConfigurationError("noise multiplier must be positive")
    if t < 0:
        raise ConfigurationError("step count must be nonnegative")
    return q * math.sqrt(t * math.expm1(1.0 / (sigma * sigma)))


def gdp_delta_for_eps(mu: float, eps: float) -> float:
    """delta(eps) = Phi(-eps/mu + mu/2) - e^eps Phi(-eps/mu - mu/2)."""
    if mu <= 0.0:
        raise ConfigurationError("mu must be positive")
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    if eps > 30.0:
        # Both terms are tiny; keep e^eps * Phi(b) in log space.
        return float(math.exp(log_ndtr(a)) - math.exp(eps + log_ndtr(b)))
    return float(ndtr(a) - math.exp(eps) * ndtr(b))


def gdp_eps_for_delta(mu: float, delta: float) -> tuple[float, bool]:
    """Invert delta(eps) by bisection.

    Returns (eps, bracketed). delta(eps) is strictly decreasing in eps, so
    the root is unique when it exists; if ``delta >= delta(0)`` there is no
    eps >= 0 to find and (0.0, False) is returned.
    """
    if mu <= 0.0:
        raise ConfigurationError("mu must be positive")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}")
    if gdp_delta_for_eps(mu, 0.0) <= delta:
        return 0.0, False
    lo, hi = 0.0, 1.0
    while gdp_delta_for_eps(mu, hi) > delta:
        lo, hi = hi, hi * 2.0
        if hi > 1e6:
            raise ArithmeticError("failed to bracket eps below 1e6")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if gdp_delta_for_eps(mu, mid) > delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), True


@dataclass
class AccountantState:
    """Inputs the accountant maps to a spent epsilon."""

    method: str  # "rdp" | "gdp"
    steps: int
    q: float
    sigma: float
    delta: float
    orders: tuple = DEFAULT_ORDERS


def accountant_eps(state: AccountantState) -> float:
    """Spent epsilon after ``state.steps`` noisy gradient steps.

    The clipping norm does not appear: noise is calibrated as sigma * C, so
    epsilon depends only on (t, q, sigma, delta).
    """
    if state.steps == 0:
        return 0.0
    if state.method == "rdp":
        step = rdp_curve(state.q, state.sigma, state.orders)
        return rdp_to_dp(state.orders, state.steps * step, state.delta)
    if state.method == "gdp":
        eps, _ = gdp_eps_for_delta(gdp_mu(state.steps, state.q, state.sigma),
                                   state.delta)
        return eps
    raise ConfigurationError(f"unknown accountant method {state.method!r}")


@dataclass
class Accountant:
    """Reusable accountant for a fixed (q, sigma, delta) training run.

    ``eps(t)`` is the budget spent after t steps; the per-step RDP curve is
    precomputed once. The GDP path is the CLT-approximate composition
    (reported as such in run metadata).
    """

    method: str
    q: float
    sigma: float
    delta: float
    orders: tuple = DEFAULT_ORDERS
    _step_curve: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in ("rdp", "gdp"):
            raise ConfigurationError(f"unknown accountant method {self.method!r}")
        if self.method == "rdp":
            self._step_curve = rdp_curve(self.q, self.sigma, self.orders)

    def eps(self, t: int) -> float:
        if t == 0:
            return 0.0
        if self.method == "rdp":
            return rdp_to_dp(self.orders, t * self._step_curve, self.delta)
        eps, _ = gdp_eps_for_delta(gdp_mu(t, self.q, self.sigma), self.delta)
        return eps

    def steps_for_budget(self, epsilon: float, t_max: int = 10_000_000) -> int:
        """Largest t with eps(t) < epsilon (0 if even one step exceeds it)."""
        if self.eps(1) >= epsilon:
            return 0
        lo, hi = 1, 2
        while hi <= t_max and self.eps(hi) < epsilon:
            lo, hi = hi, hi * 2
        hi = min(hi, t_max + 1)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.eps(mid) < epsilon:
                lo = mid
            else:
                hi = mid
        return lo


def gaussian_mechanism_sigma(l2_sensitivity: float, eps: float, delta: float) -> float:
    """Noise std for an (eps, delta) guarantee on a query with the given
    l2 sensitivity: sqrt(2 ln(1.25/delta)) * sensitivity / eps, taken with
    equality plus a hair of margin."""
    if eps <= 0.0 or not 0.0 < delta < 1.0 or l2_sensitivity <= 0.0:
        raise ConfigurationError("need eps > 0, delta in (0,1), sensitivity > 0")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * l2_sensitivity / eps * (1.0 + 1e-12)


def gaussian_mechanism(value, l2_sensitivity: float, eps: float, delta: float,
                       seed) -> np.ndarray:
    """Add i.i.d. Gaussian noise calibrated for (eps, delta)."""
    value = np.asarray(value, dtype=float)
    sigma = gaussian_mechanism_sigma(l2_sensitivity, eps, delta)
    rng = np.random.default_rng(seed)
    return value + rng.normal(0.0, sigma, size=value.shape)


def laplace_noise(value, scale: float, seed) -> np.ndarray:
    """Add i.i.d. Laplace(0, scale) noise."""
    if scale <= 0.0:
        raise ConfigurationError(f"scale must be positive, got {scale}")
    value = np.asarray(value, dtype=float)
    rng = np.random.default_rng(seed)
    return value + rng.laplace(0.0, scale, size=value.shape)


def exp_mech_binary(c: int, k: int, eps: float, seed) -> bool:
    """Private binary vote aggregation.

    Returns True ("in-distribution") with probability
    exp(eps c / 2) / (exp(eps c / 2) + exp(eps (k - c) / 2)), evaluated in the
    numerically stable logistic form.
    """
    if not 0 <= c <= k:
        raise ConfigurationError(f"vote count {c} outside [0, {k}]")
    if eps < 0.0:
        raise ConfigurationError("eps must be nonnegative")
    p_in = float(expit(eps * (2.0 * c - k) / 2.0))
    rng = np.random.default_rng(seed)
    return bool(rng.random() < p_in)
