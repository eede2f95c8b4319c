"""Full-batch gradient training over all embedding parameters.

The loop is deliberately plain: seeded initialization, one combined loss
evaluation per step with the pixel subsample redrawn from a step-derived
seed, an Adam or SGD update in float64, an explicit learning-rate drop
schedule, and a divergence guard that aborts loudly instead of letting a
blow-up propagate NaNs.  Two runs with the same config and inputs produce
bitwise-identical loss histories.
"""

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import DivergenceError, SembError
from .losses import (LossWeights, loss_anchor, loss_i2m, loss_i2m_all,
                     loss_m2m, loss_sup, loss_total, make_omega_samples)
from .embedding import image_distance

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    steps: int = 500
    learning_rate: float = 1e-2
    lr_drops: tuple = ()  # (step, factor) pairs, steps strictly increasing
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise SembError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise SembError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise SembError(f"unknown optimizer {self.optimizer!r}")
        drop_steps = [s for s, _ in self.lr_drops]
        if any(b <= a for a, b in zip(drop_steps, drop_steps[1:])):
            raise SembError("lr_drop steps must be strictly increasing")


@dataclass
class TrainReport:
    history: list
    final_params: dict
    wall_clock: float
    config: TrainConfig


class AdamState:
    """First/second moment accumulators, one pair per parameter block."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def _check_grads(params, grads):
    for key in params:
        if key not in grads:
            raise SembError(f"missing gradient for block {key!r}")
        if grads[key].shape != params[key].shape:
            raise SembError(f"gradient shape mismatch for block {key!r}")
        if not np.isfinite(grads[key]).all():
            raise SembError(f"non-finite gradient in block {key!r}")


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns new params, mutates state."""
    _check_grads(params, grads)
    b1, b2 = betas
    state.t += 1
    t = state.t
    out = {}
    for key in sorted(params):
        g = grads[key]
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        v = state.v[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key] = m
        state.v[key] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[key] = params[key] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state


def sgd_step(params, grads, lr):
    """Plain gradient descent update."""
    _check_grads(params, grads)
    return {key: params[key] - lr * grads[key] for key in sorted(params)}


def train(config, problem):
    """Run the full training loop and return a :class:`TrainReport`.

    Initialization, the per-step pixel subsample, and every reduction order
    are derived from ``config.seed``, so the run is deterministic.  Raises
    :class:`DivergenceError` (with the partial report attached) if the
    total loss exceeds the divergence guard.
    """
    t_start = time.perf_counter()
    problem.initialize(config.seed)
    params = problem.parameters()
    state = AdamState()
    lr = config.learning_rate
    drops = dict(config.lr_drops)
    history = []

    for step in range(config.steps):
        if step in drops:
            lr *= drops[step]
        omega = None
        if problem.fields and config.weights.lambda_i2m > 0:
            omega = make_omega_samples(problem, seed=(config.seed, 2, step))
        lv = loss_total(problem, config.weights, omega_samples=omega)
        record = {"step": step, "total": lv.value, "lr": lr}
        record.update(lv.terms)
        history.append(record)
        if lv.value > DIVERGENCE_LIMIT:
            partial = TrainReport(history, problem.parameters(),
                                  time.perf_counter() - t_start, config)
            raise DivergenceError(
                f"total loss {lv.value:g} exceeded divergence guard at step {step}",
                report=partial,
            )
        grads = {key: lv.gradients.get(key, np.zeros_like(value))
                 for key, value in params.items()}
        if config.optimizer == "adam":
            params, state = adam_step(params, grads, state, lr,
                                      betas=(config.beta1, config.beta2),
                                      eps=config.epsilon)
        else:
            params = sgd_step(params, grads, lr)
        problem.set_parameters(params)

    return TrainReport(history, problem.parameters(),
                       time.perf_counter() - t_start, config)


TERMS = ("sup", "anchor", "m2m", "i2m", "i2m_all", "total")


def _term_evaluator(problem, term, omega_samples, weights):
    """Build value+gradients closure for one loss term over problem parameters."""

    def evaluate(params):
        problem.set_parameters(params)
        if term == "sup":
            lv = loss_sup(problem.annotations, problem.embeddings, problem.fields,
                          problem.geodesics, mode=problem.mode)
        elif term == "anchor":
            lv = loss_anchor(problem.anchors, problem.embeddings,
                             problem.geodesics, mode=problem.mode)
        elif term == "m2m":
            cats = sorted(problem.embeddings)
            if len(cats) < 2:
                raise SembError("mesh cycle term needs at least 2 categories")
            factor = 1.0 / (len(cats) * (len(cats) - 1))
            value = 0.0
            gradients = {}
            for m in cats:
                for n in cats:
                    if m == n:
                        continue
                    part = loss_m2m(problem.embeddings[m], problem.embeddings[n],
                                    problem.geodesics[m], mode=problem.mode)
                    value += factor * part.value
                    for key in sorted(part.gradients):
                        g = part.gradients[key] * factor
                        gradients[key] = gradients.get(key, 0.0) + g
            return value, gradients
        elif term in ("i2m", "i2m_all"):
            if not problem.fields:
                raise SembError("image round-trip term needs at least one scene")
            factor = 1.0 / len(problem.fields)
            value = 0.0
            gradients = {}
            for sid in sorted(problem.fields):
                field = problem.fields[sid]
                pixels = omega_samples[sid]
                d_img = image_distance(pixels, *field.resolution)
                if term == "i2m_all":
                    part = loss_i2m_all(problem.embeddings, field, pixels, d_img,
                                        mode=problem.mode)
                else:
                    part = loss_i2m(problem.embeddings[field.category_id], field,
                                    pixels, d_img, mode=problem.mode)
                value += factor * part.value
                for key in sorted(part.gradients):
                    g = part.gradients[key] * factor
                    gradients[key] = gradients.get(key, 0.0) + g
            return value, gradients
        elif term == "total":
            lv = loss_total(problem, weights, omega_samples=omega_samples)
        else:
            raise SembError(f"unknown loss term {term!r}")
        return lv.value, lv.gradients

    return evaluate


def max_relative_gradient_error(fn, params, n_coords=20, epsilon=1e-6, seed=0):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` maps a parameter dict to ``(value, gradients)``.  ``n_coords``
    coordinates are drawn uniformly over the concatenated parameter space.
    Returns the maximum relative error over the drawn coordinates; blocks
    the analytic gradient does not mention are treated as zero.
    """
    if not 1e-8 <= epsilon <= 1e-4:
        raise SembError(f"epsilon must be in [1e-8, 1e-4], got {epsilon}")
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    _, grads = fn({k: params[k].copy() for k in keys})
    worst = 0.0
    for flat in sorted(int(c) for c in coords):
        block = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[block]
        local = flat - offsets[block]
        plus = {k: params[k].copy() for k in keys}
        plus[key].flat[local] += epsilon
        minus = {k: params[k].copy() for k in keys}
        minus[key].flat[local] -= epsilon
        fd = (fn(plus)[0] - fn(minus)[0]) / (2 * epsilon)
        analytic = grads[key].flat[local] if key in grads else 0.0
        denom = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(analytic - fd) / denom)
    fn({k: params[k].copy() for k in keys})  # restore original state
    return worst


def grad_check(problem, term, n_coords=20, epsilon=1e-6, seed=0, weights=None):
    """Max relative analytic-vs-finite-difference error for one loss term."""
    if weights is None:
        weights = LossWeights()
    omega = None
    if problem.fields:
        omega = make_omega_samples(problem, seed=(int(seed), 777))
    params = problem.parameters()
    fn = _term_evaluator(problem, term, omega, weights)
    return max_relative_gradient_error(fn, params, n_coords=n_coords,
                                       epsilon=epsilon, seed=seed)
