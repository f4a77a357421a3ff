"""Final-model metrics, the energy/confidence plane and the Boltzmann test."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .oracle import EnergyOracle, default_e_thresh
from .policy import PolicyModel, all_sequences
from .seqcore import UsageError
from .trainer import enumerable, kl_to_ref

RESULTS_HEADER = ["method", "seed", "energy_per_res", "foldability", "ppl", "max_id", "kl", "spearman"]
PLANE_HEADER = ["seq", "energy_per_res", "confidence", "quadrant"]
QUADRANTS = ("high_conf_high_energy", "high_conf_low_energy", "low_conf_high_energy", "low_conf_low_energy")


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties; 0.0 when either side is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise UsageError("spearman inputs must have equal length")
    if xs.size < 2:
        raise UsageError("spearman needs at least two points")
    rx = rankdata(xs) - (xs.size + 1) / 2.0
    ry = rankdata(ys) - (ys.size + 1) / 2.0
    denom = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


@dataclass
class EvalReport:
    energy_per_res: float
    foldability: float
    ppl: float
    identity_mean: float  # mean over samples of the max identity to any training sequence
    identity_max: float   # largest of those per-sample maxima
    kl: float
    spearman_energy: float
    n: int
    seed: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _train_tokens(policy: PolicyModel, train_set) -> np.ndarray | None:
    if train_set is None:
        return None
    if isinstance(train_set, np.ndarray):
        return train_set
    seqs = sorted(set(train_set))
    return policy.encode(seqs) if seqs else None


def max_identity_rows(samples: np.ndarray, refs: np.ndarray, block: int = 512) -> np.ndarray:
    """Per-sample max identity against a reference token array."""
    out = np.empty(len(samples))
    for s in range(0, len(samples), block):
        chunk = samples[s:s + block]
        matches = np.zeros((len(chunk), len(refs)), dtype=np.int16)
        for j in range(samples.shape[1]):
            matches += chunk[:, j, None] == refs[None, :, j]
        out[s:s + block] = matches.max(axis=1) / samples.shape[1]
    return out


def evaluate(policy: PolicyModel, ref: PolicyModel, oracle: EnergyOracle, train_set, n: int,
             rng: np.random.Generator, g_max: int = 4, seed: int | None = None) -> EvalReport:
    """Metrics from one shared sample batch of size ``n`` drawn from ``policy``.

    KL is exact when the sequence space is enumerable and otherwise the
    sample mean of the log-ratio over the same batch.
    """
    if n < 1:
        raise UsageError("need at least one evaluation sample")
    tokens = policy.sample(n, rng)
    e, g = oracle.score_tokens(tokens, policy.alphabet)
    fold = (g <= g_max) & (e <= default_e_thresh(policy.L))
    lp = policy.log_probs(tokens)
    ref_tok = ref.token_log_probs(tokens)
    ppl = float(np.exp(-ref_tok.mean()))
    refs = _train_tokens(policy, train_set)
    if refs is None or len(refs) == 0:
        id_mean = id_max = float("nan")
    else:
        ids = max_identity_rows(tokens, refs)
        id_mean, id_max = float(ids.mean()), float(ids.max())
    if enumerable(policy):
        kl = kl_to_ref(policy, ref, "exact")
    else:
        kl = float(np.mean(lp - ref_tok.sum(axis=1)))
    rho = spearman(lp, -e) if n >= 2 else 0.0
    return EvalReport(float(e.mean() / policy.L), float(fold.mean()), ppl, id_mean, id_max, kl, rho, n, seed)


def append_results(path, method: str, seed: int, rep: EvalReport) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULTS_HEADER)
        w.writerow([method, seed, repr(rep.energy_per_res), repr(rep.foldability), repr(rep.ppl),
                    repr(rep.identity_mean), repr(rep.kl), repr(rep.spearman_energy)])


def format_report(method: str, rep: EvalReport) -> str:
    return (f"{method}: energy/res {rep.energy_per_res:.4f}  foldability {rep.foldability:.3f}  "
            f"ppl {rep.ppl:.4f}  identity mean/max {rep.identity_mean:.3f}/{rep.identity_max:.3f}  "
            f"KL {rep.kl:.4f}  spearman {rep.spearman_energy:.4f}  (n={rep.n})")


# -- hallucination plane ----------------------------------------------------

@dataclass(frozen=True)
class PlaneAxes:
    energy: float
    confidence: float


def quadrant(energy_per_res: float, confidence: float, axes: PlaneAxes) -> str:
    conf = "high_conf" if confidence > axes.confidence else "low_conf"
    en = "high_energy" if energy_per_res > axes.energy else "low_energy"
    return f"{conf}_{en}"


def energy_confidence_plane(policy: PolicyModel, oracle: EnergyOracle, n: int, rng: np.random.Generator,
                            axes: PlaneAxes | None = None):
    """Rows (seq, energy/res, confidence, quadrant), quadrant counts and the axes used.

    Confidence is the mean per-token log-likelihood under ``policy``.  Without
    ``axes`` the medians of this plane are used, which is how the reference
    model's axes are fixed before other methods are placed on them.
    """
    if n < 4:
        raise UsageError("the plane needs at least 4 samples")
    tokens = policy.sample(n, rng)
    e, _ = oracle.score_tokens(tokens, policy.alphabet)
    epr = e / policy.L
    conf = policy.log_probs(tokens) / policy.L
    if axes is None:
        axes = PlaneAxes(float(np.median(epr)), float(np.median(conf)))
    rows, counts = [], dict.fromkeys(QUADRANTS, 0)
    for t, x, c in zip(tokens, epr, conf):
        q = quadrant(x, c, axes)
        counts[q] += 1
        rows.append((policy.alphabet.decode(t), float(x), float(c), q))
    return rows, counts, axes


def write_plane(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLANE_HEADER)
        for seq, x, c, q in rows:
            w.writerow([seq, repr(x), repr(c), q])


# -- Boltzmann alignment ----------------------------------------------------

def boltzmann_stats(logp: np.ndarray, energies: np.ndarray, T: float) -> tuple[float, float]:
    """KL(pi || p_B) with p_B proportional to exp(-E/T), and spearman(log pi, -E)."""
    if not T > 0:
        raise UsageError("temperature must be > 0")
    logp = np.asarray(logp, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    log_pb = -energies / T
    log_pb = log_pb - logsumexp(log_pb)
    p = np.exp(logp)
    kl = float(np.sum(np.where(p > 0, p * (logp - log_pb), 0.0)))
    return kl, spearman(logp, -energies)


def boltzmann_fit(policy: PolicyModel, oracle: EnergyOracle, T: float = 0.5) -> tuple[float, float]:
    if not enumerable(policy):
        raise UsageError("Boltzmann fit needs an enumerable sequence space")
    tokens = all_sequences(policy.alphabet.size, policy.L)
    e, _ = oracle.score_tokens(tokens, policy.alphabet)
    return boltzmann_stats(policy.log_probs(tokens), e, T)
