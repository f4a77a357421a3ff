"""Training loops for every objective plus reference-model pretraining."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as obj
from .numerics import AdamState, NumericError, adam_step, seeded_rng
from .oracle import EnergyOracle, default_e_thresh
from .policy import MAX_ENUMERATION, PolicyConfig, PolicyModel, all_sequences, block_process
from .prefdata import PreferencePair
from .seqcore import CapabilityError, UsageError

log = logging.getLogger(__name__)

OBJECTIVES = ("sft", "dpo", "ipo", "kto", "physio", "physio-linear", "pg")
PSI_KINDS = ("sigmoid", "linear", "const1")
LOG_HEADER = ["step", "loss", "energy_per_res", "kl", "foldability", "seconds"]

# child-stream ids under the run seed
STREAM_BATCHES, STREAM_EVAL, STREAM_PG, STREAM_RM = 1, 2, 3, 4


class NumericAbort(NumericError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    objective: str = "physio"
    psi: str = "sigmoid"
    beta: float = 0.1
    lam: float = 1.0
    mu: float = 2.0
    tau: float = 0.5
    linear_scale: float = 0.25
    tau_ipo: float = 0.1
    kto_lambda_w: float = 1.0
    kto_lambda_l: float = 1.0
    kl_coef: float = 0.05
    clip_eps: float = 0.2
    pg_samples: int = 64
    pg_epochs: int = 2
    rm_steps: int = 1000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 5000
    eval_every: int = 250
    eval_samples: int = 256
    g_max: int = 4
    seed: int = 0
    wall_clock: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UsageError(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")
        if self.psi not in PSI_KINDS:
            raise UsageError(f"unknown psi {self.psi!r}; valid: {', '.join(PSI_KINDS)}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise UsageError("steps >= 0, batch_size >= 1 and eval_every >= 1 required")

    @property
    def physio(self) -> obj.PhysioParams:
        return obj.PhysioParams(beta=self.beta, lam=self.lam, mu=self.mu, tau=self.tau)

    def psi_fn(self):
        kind = "linear" if self.objective == "physio-linear" else self.psi
        if kind == "linear":
            return lambda d: obj.linear_psi(d, self.linear_scale)
        if kind == "const1":
            return obj.const_one
        return None


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def kl_to_ref(policy: PolicyModel, ref: PolicyModel, mode: str = "exact", n: int = 10000,
              rng: np.random.Generator | None = None) -> float:
    """KL(pi_theta || pi_ref), by enumeration or as a sample mean under pi_theta."""
    if mode == "exact":
        if policy.alphabet.size ** policy.L > MAX_ENUMERATION:
            raise CapabilityError("exact KL needs an enumerable sequence space")
        tokens = all_sequences(policy.alphabet.size, policy.L)
        lp = policy.log_probs(tokens)
        p = np.exp(lp)
        # zero-probability sequences contribute nothing (0 * log 0 = 0)
        with np.errstate(invalid="ignore"):
            return float(np.sum(np.where(p > 0, p * (lp - ref.log_probs(tokens)), 0.0)))
    if mode == "monte_carlo":
        rng = rng if rng is not None else np.random.default_rng(0)
        tokens = policy.sample(n, rng)
        return float(np.mean(policy.log_probs(tokens) - ref.log_probs(tokens)))
    raise UsageError(f"unknown KL mode {mode!r}")


def kl_mc_stderr(policy: PolicyModel, ref: PolicyModel, n: int, rng) -> tuple[float, float]:
    tokens = policy.sample(n, rng)
    d = policy.log_probs(tokens) - ref.log_probs(tokens)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n))


def enumerable(policy: PolicyModel) -> bool:
    return policy.alphabet.size ** policy.L <= MAX_ENUMERATION


def sample_metrics(policy: PolicyModel, oracle: EnergyOracle, n: int, rng, g_max: int = 4):
    """(mean energy per residue, foldability fraction) over fresh samples."""
    tokens = policy.sample(n, rng)
    e, g = oracle.score_tokens(tokens, policy.alphabet)
    fold = (g <= g_max) & (e <= default_e_thresh(policy.L))
    return float(e.mean() / policy.L), float(fold.mean())


def train_reference(config: PolicyConfig, corpus_size: int = 20000, steps: int = 3000,
                    batch_size: int = 256, lr: float = 3e-3, seed: int | None = None) -> PolicyModel:
    """Maximum-likelihood fit to a hydrophobic/polar block corpus, then frozen."""
    if config.alphabet != "HP2":
        raise UsageError("the block-process corpus is defined over HP2")
    seed = config.seed if seed is None else seed
    corpus = block_process(corpus_size, config.L, seeded_rng(seed, 0xC0))
    model = PolicyModel(config)
    rng = seeded_rng(seed, 0xC1)
    opt = AdamState(lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, corpus_size, size=batch_size)
        _, g = obj.sft_loss(model, corpus[idx])
        adam_step(model.params, g, opt)
    return model.frozen_copy()


def pairs_to_tokens(policy: PolicyModel, pairs: list[PreferencePair]):
    if not pairs:
        raise UsageError("no training pairs")
    w = policy.encode([p.yw for p in pairs])
    l = policy.encode([p.yl for p in pairs])
    d = np.array([p.delta_e for p in pairs], dtype=np.float64)
    return w, l, d


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)

    def append(self, row: dict):
        if self.path:
            # reopen per row so a crash leaves every finished row on disk
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in LOG_HEADER])


def _fmt(v):
    return v if isinstance(v, int) else repr(float(v))


def train(config: TrainConfig, ref: PolicyModel, pairs: list[PreferencePair], oracle: EnergyOracle,
          policy: PolicyModel | None = None, log_path=None, kl_cap: float | None = None):
    """Run ``config.steps`` updates of the chosen objective; returns (policy, TrainLog).

    The trainable policy starts as a copy of ``ref`` unless one is passed.
    Evaluation rows use a sample stream that depends only on the seed and
    the step, so curves are comparable across objectives.
    """
    policy = policy if policy is not None else ref.clone()
    seed = config.seed
    batch_rng = seeded_rng(seed, STREAM_BATCHES)
    opt = AdamState(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    w, l, d = pairs_to_tokens(policy, pairs)
    full = obj.PairBatch(w, l, d, ref.log_probs(w), ref.log_probs(l))
    physio = config.physio
    psi_fn = config.psi_fn()

    rm = pg_state = pg_rng = None
    if config.objective == "pg":
        rm = obj.RewardModel(ref.config, seed=seed)
        obj.bt_reward_train(w, l, rm, config.rm_steps, seeded_rng(seed, STREAM_RM))
        pg_state = obj.PGState()
        pg_rng = seeded_rng(seed, STREAM_PG)

    csv_log = _CsvLog(log_path)
    tlog = TrainLog()
    start = time.perf_counter()
    n = len(full)
    for step in range(1, config.steps + 1):
        if config.objective == "pg":
            batch = obj.pg_collect(policy, ref, rm, config.pg_samples, config.kl_coef, pg_rng, pg_state)
            for _ in range(config.pg_epochs):
                grads, diag = obj.pg_grad(policy, batch, config.clip_eps)
                adam_step(policy.params, grads, opt)
            loss = diag["loss"]
        else:
            idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
            mb = full.subset(idx)
            if config.objective in ("physio", "physio-linear"):
                loss, grads = obj.physio_loss(policy, mb, physio, psi_fn)
            elif config.objective == "dpo":
                loss, grads = obj.dpo_loss(policy, mb, config.beta)
            elif config.objective == "ipo":
                loss, grads = obj.ipo_loss(policy, mb, config.tau_ipo)
            elif config.objective == "kto":
                loss, grads = obj.kto_loss(policy, mb, config.beta, config.kto_lambda_w, config.kto_lambda_l)
            else:
                loss, grads = obj.sft_loss(policy, mb.w)
            if not np.isfinite(loss):
                raise NumericAbort(step, loss)
            adam_step(policy.params, grads, opt)
        if not np.isfinite(loss):
            raise NumericAbort(step, loss)
        if step % config.eval_every == 0 or step == config.steps:
            row = _eval_row(policy, ref, oracle, config, step, loss)
            row["seconds"] = time.perf_counter() - start if config.wall_clock else 0.0
            if kl_cap is not None and row["kl"] > kl_cap:
                log.warning("step %d: KL %.3f exceeds cap %.3f", step, row["kl"], kl_cap)
            tlog.rows.append(row)
            csv_log.append(row)
    return policy, tlog


def _eval_row(policy, ref, oracle, config, step, loss):
    erng = seeded_rng(config.seed, STREAM_EVAL, step)
    epr, fold = sample_metrics(policy, oracle, config.eval_samples, erng, config.g_max)
    if enumerable(policy):
        kl = kl_to_ref(policy, ref, "exact")
    else:
        kl = kl_to_ref(policy, ref, "monte_carlo", config.eval_samples, erng)
    for v in (loss, epr, kl, fold):
        if not np.isfinite(v):
            raise NumericAbort(step, v)
    return {"step": step, "loss": float(loss), "energy_per_res": epr, "kl": kl, "foldability": fold}
