"""Noisy gradient training of flow models.

Each iteration draws a uniform without-replacement batch, computes
per-example gradients, clips them to an l2 bound, averages with Gaussian
noise, and applies an SGD or Adam update. The loop halts before executing
any step whose cumulative accountant cost would reach the epsilon budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .accounting import Accountant
from .errors import (ConfigurationError, NumericalOverflowError,
                     TrainingInstabilityError)
from .flows import FlowModel


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    noise_multiplier: float = 1.1
    clip_norm: float = 10.0
    epsilon: float = 1.0
    delta: float = 1e-5
    accountant: str = "gdp"          # "rdp" | "gdp"
    optimizer: str = "adam"          # "sgd" | "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1_000_000
    seed: int = 0
    sampling: str = "uniform"        # "uniform" | "poisson"
    max_bad_batches: int = 20        # consecutive non-finite batches tolerated
    eval_every: int = 500

    def validate(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.batch_size < 1:
            raise ConfigurationError("rates, clip norm and batch size must be positive")
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise multiplier must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must be in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon budget must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.sampling not in ("uniform", "poisson"):
            raise ConfigurationError(f"unknown sampling mode {self.sampling!r}")


@dataclass
class OptimizerState:
    m: np.ndarray | None = None  # first moment (adam)
    v: np.ndarray | None = None  # second moment (adam)
    step: int = 0


@dataclass
class Checkpoint:
    step: int
    epsilon: float
    train_nll: float
    holdout_nll: float | None


@dataclass
class TrainReport:
    steps: int = 0
    final_epsilon: float = 0.0
    skipped_batches: int = 0
    checkpoints: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"step": c.step, "epsilon": c.epsilon,
                             "train_nll": c.train_nll,
                             "holdout_nll": c.holdout_nll})
                 for c in self.checkpoints]
        lines.append(json.dumps({"final": True, "steps": self.steps,
                                 "epsilon": self.final_epsilon,
                                 "skipped_batches": self.skipped_batches}))
        return "\n".join(lines) + "\n"


def clip_grad(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale g to l2 norm at most clip_norm: g / max(1, |g| / C)."""
    if clip_norm <= 0:
        raise ConfigurationError("clip norm must be positive")
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / clip_norm)


def clip_grads(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Row-wise clipping of a (m, P) per-example gradient matrix."""
    if clip_norm <= 0:
        raise ConfigurationError("clip norm must be positive")
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    return grads / np.maximum(1.0, norms / clip_norm)


def _noisy_mean_from_sum(total: np.ndarray, clip_norm: float,
                         noise_multiplier: float, rng,
                         denominator: int) -> np.ndarray:
    if denominator < 1:
        raise ConfigurationError("empty gradient list")
    if noise_multiplier > 0:
        total = total + rng.normal(
            0.0, noise_multiplier * clip_norm, size=total.shape)
    return total / denominator


def noisy_mean(grads, clip_norm: float, noise_multiplier: float, rng,
               denominator: int | None = None) -> np.ndarray:
    """(sum of clipped gradients + N(0, (sigma C)^2 I)) / b.

    ``denominator`` defaults to the number of gradients; Poisson sampling
    passes the nominal batch size instead.
    """
    grads = np.asarray(grads, dtype=float)
    if grads.ndim == 1:
        grads = grads[None, :]
    return _noisy_mean_from_sum(
        grads.sum(axis=0), clip_norm, noise_multiplier, rng,
        grads.shape[0] if denominator is None else denominator)


def apply_update(params: np.ndarray, grad: np.ndarray, state: OptimizerState,
                 config: TrainConfig):
    """One optimizer step on the flat parameter vector; returns
    (new params, new state). Adam is plain post-processing of the (already
    private) gradient, so it leaves the privacy guarantee unchanged."""
    if params.shape != grad.shape:
        raise ConfigurationError("parameter / gradient shape mismatch")
    if config.optimizer == "sgd":
        return params - config.learning_rate * grad, state
    if state.m is None:
        state = OptimizerState(np.zeros_like(params), np.zeros_like(params), 0)
    t = state.step + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad * grad
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    new_params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new_params, OptimizerState(m, v, t)


def _draw_batch(rng, n: int, config: TrainConfig):
    if config.sampling == "poisson":
        mask = rng.random(n) < config.batch_size / n
        return np.flatnonzero(mask)
    return rng.permutation(n)[:config.batch_size]


def train_dp_nf(X, model: FlowModel, config: TrainConfig,
                accountant: Accountant | None = None, holdout=None):
    """Budget-gated noisy training (returns the mutated model and a report).

    The accountant is consulted with the prospective step count before each
    update; training stops once executing the next step would spend at least
    the configured epsilon, or at the iteration cap.
    """
    config.validate()
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < config.batch_size:
        raise ConfigurationError("batch size exceeds dataset size")
    if accountant is None:
        accountant = Accountant(config.accountant, config.batch_size / n,
                                config.noise_multiplier, config.delta)

    seq = np.random.SeedSequence(config.seed)
    sample_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    params = model.get_flat()
    state = OptimizerState()
    report = TrainReport()
    denominator = config.batch_size
    bad_streak = 0
    spent = 0.0

    def checkpoint(step):
        if report.checkpoints and report.checkpoints[-1].step == step:
            return
        probe = X[:min(n, 2048)]
        train_nll = model.nll(probe)
        hold_nll = model.nll(holdout) if holdout is not None else None
        report.checkpoints.append(Checkpoint(step, spent, train_nll, hold_nll))

    t = 1
    while t <= config.max_steps:
        eps_next = accountant.eps(t)
        if not np.isfinite(eps_next):
            raise ConfigurationError("accountant returned non-finite epsilon")
        if eps_next >= config.epsilon:
            break
        idx = _draw_batch(sample_rng, n, config)
        skip = False
        if idx.size == 0:  # possible under poisson sampling: noise-only step
            clipped_sum = np.zeros(params.size)
        else:
            try:
                losses, clipped_sum, _ = model.clipped_grad_sum(
                    X[idx], config.clip_norm)
                skip = not np.all(np.isfinite(losses))
            except (TrainingInstabilityError, NumericalOverflowError):
                skip = True
        if skip:
            # The batch was drawn, so its privacy cost is charged even
            # though the update is dropped.
            report.skipped_batches += 1
            bad_streak += 1
            if bad_streak > config.max_bad_batches:
                raise TrainingInstabilityError(
                    f"{bad_streak} consecutive non-finite batches")
            spent = eps_next
            t += 1
            continue
        bad_streak = 0
        noisy = _noisy_mean_from_sum(clipped_sum, config.clip_norm,
                                     config.noise_multiplier, noise_rng,
                                     denominator)
        params, state = apply_update(params, noisy, state, config)
        model.set_flat(params)
        model.project_params()
        params = model.get_flat()
        spent = eps_next
        report.steps += 1
        if report.steps % config.eval_every == 0:
            checkpoint(report.steps)
        t += 1

    report.final_epsilon = spent
    checkpoint(report.steps)
    return model, report


def train_flow(X, model: FlowModel, n_steps: int, batch_size: int = 128,
               learning_rate: float = 1e-3, seed=0) -> FlowModel:
    """Plain (non-private) minibatch Adam on the mean negative log-likelihood.

    Used for ensemble members and non-private reference models.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    config = TrainConfig(learning_rate=learning_rate, optimizer="adam")
    params = model.get_flat()
    state = OptimizerState()
    for _ in range(n_steps):
        idx = rng.permutation(n)[:min(batch_size, n)]
        _, grad_sum, _ = model.clipped_grad_sum(X[idx], np.inf)
        params, state = apply_update(params, grad_sum / idx.size, state, config)
        model.set_flat(params)
        model.project_params()
        params = model.get_flat()
    return model
