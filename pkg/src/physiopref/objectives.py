"""Alignment losses with analytic gradients.

Every sequence-level loss here is a function of per-sequence log-probs, so
each one computes dLoss/dlogpi per sequence in closed form and hands the
coefficients to ``PolicyModel.grad_weighted``.  Energy weights and
reference log-probs are data: nothing is differentiated through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import AdamState, ParameterSet, adam_step, log_sigmoid, sigmoid
from .policy import NGramNet, PolicyConfig, PolicyModel
from .seqcore import UsageError, get_alphabet


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhysioParams:
    beta: float = 0.1
    lam: float = 1.0
    mu: float = 2.0
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")


# mu/tau are in oracle energy units: lattice gaps are small integers,
# Rosetta-style gaps are tens of REU.
LATTICE_PSI = PhysioParams(beta=0.1, lam=1.0, mu=2.0, tau=0.5)
REU_PSI = PhysioParams(beta=0.1, lam=1.0, mu=50.0, tau=10.0)


def delta_e(e_w, e_l):
    return np.maximum(0.0, np.asarray(e_l, dtype=np.float64) - np.asarray(e_w, dtype=np.float64))


def psi(d, p: PhysioParams):
    if not p.tau > 0:
        raise ConfigError("tau must be > 0")
    return p.lam * sigmoid((np.asarray(d, dtype=np.float64) - p.mu) / p.tau)


def linear_psi(d, scale: float = 1.0):
    if not scale > 0:
        raise ConfigError("linear weighting scale must be > 0")
    return scale * np.asarray(d, dtype=np.float64)


def const_one(d):
    return np.ones_like(np.asarray(d, dtype=np.float64))


def gradient_gain(d, margin, p: PhysioParams):
    return psi(d, p) * sigmoid(-np.asarray(margin, dtype=np.float64))


@dataclass
class PairBatch:
    w: np.ndarray          # (N, L) winner tokens
    l: np.ndarray          # (N, L) loser tokens
    delta_e: np.ndarray    # (N,)
    ref_w: np.ndarray      # (N,) log pi_ref(y_w)
    ref_l: np.ndarray      # (N,) log pi_ref(y_l)

    @classmethod
    def build(cls, ref: PolicyModel, w, l, delta) -> "PairBatch":
        w = ref.encode(w)
        l = ref.encode(l)
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        if not (len(w) == len(l) == len(delta)) or len(w) == 0:
            raise UsageError("pair batch needs equal, nonzero numbers of winners, losers and gaps")
        return cls(w, l, delta, ref.log_probs(w), ref.log_probs(l))

    def __len__(self):
        return len(self.delta_e)

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.w[idx], self.l[idx], self.delta_e[idx], self.ref_w[idx], self.ref_l[idx])


def log_ratios(policy: PolicyModel, batch: PairBatch):
    """(log pi/pi_ref on winners, same on losers)."""
    return policy.log_probs(batch.w) - batch.ref_w, policy.log_probs(batch.l) - batch.ref_l


def implicit_reward_margin(policy: PolicyModel, batch: PairBatch, beta: float) -> np.ndarray:
    rw, rl = log_ratios(policy, batch)
    return beta * (rw - rl)


def _pair_grad(policy, batch, cw, cl) -> ParameterSet:
    tokens = np.concatenate([batch.w, batch.l], axis=0)
    return policy.grad_weighted(tokens, np.concatenate([cw, cl]))


def _weighted_dpo(policy, batch, beta, weights, need_grad=True):
    margin = implicit_reward_margin(policy, batch, beta)
    n = len(batch)
    loss = float(-np.mean(weights * log_sigmoid(margin)))
    if not need_grad:
        return loss, None
    # d/dlogpi_w of -psi * log sigmoid(margin) = -psi * sigmoid(-margin) * beta
    c = weights * sigmoid(-margin) * beta / n
    return loss, _pair_grad(policy, batch, -c, c)


def physio_loss(policy: PolicyModel, batch: PairBatch, p: PhysioParams,
                psi_fn: Callable | None = None, need_grad: bool = True):
    """Energy-gap weighted DPO loss and gradient; ``psi_fn`` overrides the weighting."""
    weights = psi(batch.delta_e, p) if psi_fn is None else np.asarray(psi_fn(batch.delta_e), dtype=np.float64)
    return _weighted_dpo(policy, batch, p.beta, weights, need_grad)


def dpo_loss(policy: PolicyModel, batch: PairBatch, beta: float = 0.1, need_grad: bool = True):
    return _weighted_dpo(policy, batch, beta, np.ones(len(batch)), need_grad)


def ipo_loss(policy: PolicyModel, batch: PairBatch, tau_ipo: float = 0.1, need_grad: bool = True):
    if not tau_ipo > 0:
        raise ConfigError("tau_ipo must be > 0")
    rw, rl = log_ratios(policy, batch)
    resid = (rw - rl) - 1.0 / (2.0 * tau_ipo)
    loss = float(np.mean(resid ** 2))
    if not need_grad:
        return loss, None
    c = 2.0 * resid / len(batch)
    return loss, _pair_grad(policy, batch, c, -c)


def kto_loss(policy: PolicyModel, batch: PairBatch, beta: float = 0.1,
             lambda_w: float = 1.0, lambda_l: float = 1.0, need_grad: bool = True,
             z0: float | None = None):
    """Simplified KTO; the reference point is held constant within the step."""
    rw, rl = log_ratios(policy, batch)
    if z0 is None:
        z0 = max(0.0, float(np.mean(rl)))
    sw = sigmoid(beta * (rw - z0))
    sl = sigmoid(beta * (rl - z0))
    loss = float(np.mean(lambda_w * (1.0 - sw) + lambda_l * sl))
    if not need_grad:
        return loss, None
    n = len(batch)
    cw = -lambda_w * beta * sw * (1.0 - sw) / n
    cl = lambda_l * beta * sl * (1.0 - sl) / n
    return loss, _pair_grad(policy, batch, cw, cl)


def sft_loss(policy: PolicyModel, winners, need_grad: bool = True):
    tokens = policy.encode(winners)
    n = len(tokens)
    if n == 0:
        raise UsageError("sft needs at least one winner")
    loss = float(-np.mean(policy.log_probs(tokens)))
    if not need_grad:
        return loss, None
    return loss, policy.grad_weighted(tokens, np.full(n, -1.0 / n))


# -- reward model and policy-gradient baseline ----------------------------

class RewardModel:
    """Scalar sequence reward: sum over positions of an n-gram network head."""

    def __init__(self, config: PolicyConfig, params: ParameterSet | None = None, seed: int = 0):
        self.config = config
        vocab = get_alphabet(config.alphabet).size
        self.net = NGramNet(vocab, 1, config.L, config.k, config.embed, config.hidden, include_current=True)
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
            params = self.net.init_params(rng, config.init_scale)
        self.params = params

    def score(self, tokens) -> np.ndarray:
        out, _ = self.net.forward(self.params, np.atleast_2d(tokens))
        return out[:, :, 0].sum(axis=1)

    def grad_weighted(self, tokens, weights) -> ParameterSet:
        tokens = np.atleast_2d(tokens)
        _, cache = self.net.forward(self.params, tokens)
        n, L = tokens.shape
        dout = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None, None], (n, L, 1)).copy()
        return self.net.backward(self.params, cache, dout)


def bt_loss(rm: RewardModel, w: np.ndarray, l: np.ndarray, need_grad: bool = True):
    """Bradley-Terry negative log-likelihood, its gradient and pair accuracy."""
    diff = rm.score(w) - rm.score(l)
    loss = float(-np.mean(log_sigmoid(diff)))
    acc = float(np.mean(diff > 0))
    if not need_grad:
        return loss, None, acc
    c = -sigmoid(-diff) / len(diff)
    g = rm.grad_weighted(np.concatenate([w, l]), np.concatenate([c, -c]))
    return loss, g, acc


def bt_reward_train(w: np.ndarray, l: np.ndarray, rm: RewardModel, steps: int,
                    rng: np.random.Generator, batch_size: int = 64, lr: float = 3e-3):
    """Fit ``rm`` in place; returns (rm, training accuracy over all pairs)."""
    if len(w) == 0:
        raise UsageError("reward model needs at least one pair")
    opt = AdamState(lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(w), size=min(batch_size, len(w)))
        _, g, _ = bt_loss(rm, w[idx], l[idx])
        adam_step(rm.params, g, opt)
    _, _, acc = bt_loss(rm, w, l, need_grad=False)
    return rm, acc


@dataclass
class PGState:
    """Moving-average reward baseline; initialised from the first batch."""

    momentum: float = 0.9
    value: float | None = None


@dataclass
class PGBatch:
    tokens: np.ndarray
    logp_old: np.ndarray
    advantage: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def pg_collect(policy: PolicyModel, ref: PolicyModel, rm: RewardModel, n_samples: int,
               kl_coef: float, rng: np.random.Generator, state: PGState) -> PGBatch:
    if n_samples < 2:
        raise UsageError("policy gradient needs at least 2 samples")
    tokens = policy.sample(n_samples, rng)
    logp = policy.log_probs(tokens)
    kl_terms = logp - ref.log_probs(tokens)
    rm_reward = rm.score(tokens)
    reward = rm_reward - kl_coef * kl_terms
    if state.value is None:
        state.value = float(reward.mean())
    adv = reward - state.value
    state.value = state.momentum * state.value + (1.0 - state.momentum) * float(reward.mean())
    diag = {"mean_reward": float(rm_reward.mean()), "kl": float(kl_terms.mean())}
    return PGBatch(tokens, logp, adv, diag)


def pg_grad(policy: PolicyModel, batch: PGBatch, clip_eps: float):
    """Gradient of the negated clipped surrogate at the current parameters."""
    logp = policy.log_probs(batch.tokens)
    ratio = np.exp(logp - batch.logp_old)
    A = batch.advantage
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surrogate = np.minimum(ratio * A, clipped * A)
    # the clipped branch is active (zero gradient) when it is the strict minimum
    active = ratio * A <= clipped * A
    n = len(A)
    coef = np.where(active, -A * ratio / n, 0.0)
    grad = policy.grad_weighted(batch.tokens, coef)
    diag = dict(batch.diagnostics, loss=float(-surrogate.mean()), clip_frac=float(np.mean(~active)))
    return grad, diag


def pg_step(policy: PolicyModel, ref: PolicyModel, rm: RewardModel, n_samples: int,
            kl_coef: float, clip_eps: float, rng: np.random.Generator,
            state: PGState | None = None):
    """One on-policy sample batch and its clipped policy-gradient estimate."""
    state = state if state is not None else PGState()
    batch = pg_collect(policy, ref, rm, n_samples, kl_coef, rng, state)
    grad, diag = pg_grad(policy, batch, clip_eps)
    return grad, diag, batch
