"""Numeric substrate: stable softmax, Adam, finite-difference checks, seeding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .seqcore import UsageError

ParameterSet = Dict[str, np.ndarray]


class NumericError(ArithmeticError):
    pass


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise UsageError("log_softmax of an empty row")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def param_count(params: ParameterSet) -> int:
    return int(sum(v.size for v in params.values()))


def copy_params(params: ParameterSet) -> ParameterSet:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: ParameterSet) -> ParameterSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_scaled(acc: ParameterSet, other: ParameterSet, scale: float = 1.0) -> ParameterSet:
    for k, v in other.items():
        acc[k] += scale * v
    return acc


def global_norm(grads: ParameterSet) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: ParameterSet = field(default_factory=dict)
    v: ParameterSet = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: ParameterSet, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if set(grads) != set(params):
        raise UsageError("gradient names do not match parameters")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise UsageError(f"shape mismatch for {k}: {grads[k].shape} vs {params[k].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k in params:
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(f: Callable[[ParameterSet], float], grad: ParameterSet, params: ParameterSet,
               h: float = 1e-5, n_samples: int | None = 64,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``grad`` and central differences of ``f``.

    Relative error is ``|analytic - numeric| / max(1, |numeric|)`` over a
    random subset of ``n_samples`` coordinates (all of them if None).
    ``params`` is perturbed in place and restored.
    """
    rng = rng or np.random.default_rng(0)
    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    if n_samples is not None and n_samples < len(coords):
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, i in coords:
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = f(params)
        flat[i] = old - h
        fm = f(params)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective while probing {k}[{i}]")
        numeric = (fp - fm) / (2 * h)
        analytic = grad[k].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst


def child_seed(seed: int, *path: int) -> np.random.SeedSequence:
    """Sub-seed ``mix(seed, i, ...)``: SeedSequence entropy hashing of the path."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *path])


def seeded_rng(seed: int, *path: int) -> np.random.Generator:
    """PCG64 generator; ``seeded_rng(s, i)`` is the i-th child stream of seed s."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, *path)))
