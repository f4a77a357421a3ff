"""Autoregressive categorical policies over fixed-length sequences.

Two architectures share one interface:

* ``ngram`` - embeddings of the previous k tokens plus a position embedding,
  one tanh hidden layer, then logits.
* ``attn1`` - one causal multi-head self-attention block with a tanh MLP,
  both residual, then logits.

Position 0 conditions only on a learned BOS row in the token embedding.
All gradients are hand-derived; the one public entry point is
``grad_weighted(tokens, w) = sum_n w[n] * d log pi(tokens[n]) / d theta``,
which is all any sequence-level objective needs.
"""

from __future__ import annotations

import io
import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ParameterSet, log_softmax, param_count
from .seqcore import Alphabet, CapabilityError, Sequence, UsageError, get_alphabet

CHECKPOINT_MAGIC = b"PHYSIOPREF-CKPT"
CHECKPOINT_VERSION = 1
MAX_ENUMERATION = 65536


@dataclass(frozen=True)
class PolicyConfig:
    alphabet: str = "HP2"
    L: int = 12
    arch: str = "ngram"
    k: int = 4
    hidden: int = 32
    embed: int = 8
    d_model: int = 32
    heads: int = 2
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("ngram", "attn1"):
            raise UsageError(f"unknown architecture {self.arch!r}")
        if self.k < 1 or self.hidden < 1 or self.embed < 1 or self.d_model < 1 or self.heads < 1:
            raise UsageError("architecture sizes must be >= 1")
        if self.L < 2:
            raise UsageError("L must be >= 2")
        if self.arch == "attn1" and self.d_model % self.heads:
            raise UsageError("d_model must be divisible by heads")
        get_alphabet(self.alphabet)


def _windows(tokens: np.ndarray, k: int, bos: int, include_current: bool) -> np.ndarray:
    """(N, L, k) context windows; the last column is the most recent token."""
    n, L = tokens.shape
    lead = k - 1 if include_current else k
    padded = np.concatenate([np.full((n, lead), bos, dtype=np.int64), tokens], axis=1)
    idx = np.arange(L)[:, None] + np.arange(k)[None, :]
    return padded[:, idx]


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``rows`` into an (n_rows, d) table by index (one-hot product, fixed order)."""
    onehot = np.zeros((n_rows, len(idx)))
    onehot[idx, np.arange(len(idx))] = 1.0
    return onehot @ rows


class NGramNet:
    def __init__(self, vocab: int, out_dim: int, L: int, k: int, embed: int, hidden: int,
                 include_current: bool = False):
        self.vocab, self.out_dim, self.L, self.k = vocab, out_dim, L, k
        self.embed, self.hidden = embed, hidden
        self.include_current = include_current

    def init_params(self, rng: np.random.Generator | None, scale: float) -> ParameterSet:
        E, H, k = self.embed, self.hidden, self.k
        shapes = {
            "emb": (self.vocab + 1, E),
            "pos": (self.L, E),
            "W1": ((k + 1) * E, H),
            "b1": (H,),
            "W2": (H, self.out_dim),
            "b2": (self.out_dim,),
        }
        if rng is None:
            return {n: np.zeros(s) for n, s in shapes.items()}
        p = {
            "emb": rng.normal(0.0, 1.0, shapes["emb"]),
            "pos": rng.normal(0.0, 1.0, shapes["pos"]),
            "W1": rng.normal(0.0, 1.0 / np.sqrt((k + 1) * E), shapes["W1"]),
            "b1": np.zeros(H),
            "W2": rng.normal(0.0, scale, shapes["W2"]),
            "b2": np.zeros(self.out_dim),
        }
        return p

    def forward(self, p: ParameterSet, tokens: np.ndarray):
        n, L = tokens.shape
        ctx = _windows(tokens, self.k, self.vocab, self.include_current)
        feats = p["emb"][ctx].reshape(n, L, self.k * self.embed)
        X = np.concatenate([feats, np.broadcast_to(p["pos"][:L], (n, L, self.embed))], axis=2)
        Hs = np.tanh(X @ p["W1"] + p["b1"])
        out = Hs @ p["W2"] + p["b2"]
        return out, (ctx, X, Hs)

    def backward(self, p: ParameterSet, cache, dout: np.ndarray) -> ParameterSet:
        ctx, X, Hs = cache
        n, L, _ = dout.shape
        D = dout.reshape(n * L, -1)
        H2 = Hs.reshape(n * L, -1)
        g = {"W2": H2.T @ D, "b2": D.sum(axis=0)}
        dpre = (D @ p["W2"].T) * (1.0 - H2 * H2)
        g["W1"] = X.reshape(n * L, -1).T @ dpre
        g["b1"] = dpre.sum(axis=0)
        dX = (dpre @ p["W1"].T).reshape(n, L, -1)
        kE = self.k * self.embed
        g["pos"] = np.zeros_like(p["pos"])
        g["pos"][:L] = dX[:, :, kE:].sum(axis=0)
        g["emb"] = _scatter_rows(ctx.reshape(-1), dX[:, :, :kE].reshape(-1, self.embed), p["emb"].shape[0])
        return g


class Attn1Net:
    def __init__(self, vocab: int, out_dim: int, L: int, d_model: int, heads: int, hidden: int):
        self.vocab, self.out_dim, self.L = vocab, out_dim, L
        self.D, self.h, self.F = d_model, heads, hidden
        self.mask = np.tril(np.ones((L, L), dtype=bool))

    def init_params(self, rng: np.random.Generator | None, scale: float) -> ParameterSet:
        D, F = self.D, self.F
        shapes = {
            "tok": (self.vocab + 1, D), "pos": (self.L, D),
            "Wq": (D, D), "Wk": (D, D), "Wv": (D, D), "Wo": (D, D),
            "W1": (D, F), "b1": (F,), "W2": (F, D), "b2": (D,),
            "Wout": (D, self.out_dim), "bout": (self.out_dim,),
        }
        if rng is None:
            return {n: np.zeros(s) for n, s in shapes.items()}
        p = {}
        for n, s in shapes.items():
            if n.startswith("b"):
                p[n] = np.zeros(s)
            elif n in ("tok", "pos"):
                p[n] = rng.normal(0.0, 0.5, s)
            elif n == "Wout":
                p[n] = rng.normal(0.0, scale, s)
            else:
                p[n] = rng.normal(0.0, 1.0 / np.sqrt(s[0]), s)
        return p

    def forward(self, p: ParameterSet, tokens: np.ndarray):
        n, L = tokens.shape
        xin = np.concatenate([np.full((n, 1), self.vocab, dtype=np.int64), tokens[:, :-1]], axis=1)
        X = p["tok"][xin] + p["pos"][:L]
        dh = self.D // self.h
        scale = 1.0 / np.sqrt(dh)

        def heads(M):
            return M.reshape(n, L, self.h, dh).transpose(0, 2, 1, 3)

        Q, K, V = heads(X @ p["Wq"]), heads(X @ p["Wk"]), heads(X @ p["Wv"])
        S = np.einsum("nhid,nhjd->nhij", Q, K) * scale
        S = np.where(self.mask[:L, :L], S, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=-1, keepdims=True)
        O = np.einsum("nhij,nhjd->nhid", P, V).transpose(0, 2, 1, 3).reshape(n, L, self.D)
        H1 = X + O @ p["Wo"]
        U = np.tanh(H1 @ p["W1"] + p["b1"])
        Z = H1 + U @ p["W2"] + p["b2"]
        out = Z @ p["Wout"] + p["bout"]
        return out, (xin, X, Q, K, V, P, O, H1, U, Z)

    def backward(self, p: ParameterSet, cache, dout: np.ndarray) -> ParameterSet:
        xin, X, Q, K, V, P, O, H1, U, Z = cache
        n, L, _ = dout.shape
        dh = self.D // self.h
        scale = 1.0 / np.sqrt(dh)

        def flat(M):
            return M.reshape(n * L, -1)

        g = {"Wout": flat(Z).T @ flat(dout), "bout": flat(dout).sum(axis=0)}
        dZ = dout @ p["Wout"].T
        g["W2"] = flat(U).T @ flat(dZ)
        g["b2"] = flat(dZ).sum(axis=0)
        dpre = (dZ @ p["W2"].T) * (1.0 - U * U)
        g["W1"] = flat(H1).T @ flat(dpre)
        g["b1"] = flat(dpre).sum(axis=0)
        dH1 = dZ + dpre @ p["W1"].T
        g["Wo"] = flat(O).T @ flat(dH1)
        dO = (dH1 @ p["Wo"].T).reshape(n, L, self.h, dh).transpose(0, 2, 1, 3)
        dP = np.einsum("nhid,nhjd->nhij", dO, V)
        dV = np.einsum("nhij,nhid->nhjd", P, dO)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dQ = np.einsum("nhij,nhjd->nhid", dS, K)
        dK = np.einsum("nhij,nhid->nhjd", dS, Q)

        def merge(M):
            return M.transpose(0, 2, 1, 3).reshape(n, L, self.D)

        dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
        g["Wq"] = flat(X).T @ flat(dQ)
        g["Wk"] = flat(X).T @ flat(dK)
        g["Wv"] = flat(X).T @ flat(dV)
        dX = dH1 + dQ @ p["Wq"].T + dK @ p["Wk"].T + dV @ p["Wv"].T
        g["pos"] = np.zeros_like(p["pos"])
        g["pos"][:L] = dX.sum(axis=0)
        g["tok"] = _scatter_rows(xin.reshape(-1), dX.reshape(n * L, self.D), p["tok"].shape[0])
        return g


def build_net(cfg: PolicyConfig, out_dim: int, include_current: bool = False):
    vocab = get_alphabet(cfg.alphabet).size
    if cfg.arch == "ngram":
        return NGramNet(vocab, out_dim, cfg.L, cfg.k, cfg.embed, cfg.hidden, include_current)
    if include_current:
        raise UsageError("attn1 backbone only supports next-token heads")
    return Attn1Net(vocab, out_dim, cfg.L, cfg.d_model, cfg.heads, cfg.hidden)


class PolicyModel:
    """pi_theta(y | BOS) with exact log-probs, sampling and gradients."""

    def __init__(self, config: PolicyConfig, params: ParameterSet | None = None,
                 frozen: bool = False, init: str = "random"):
        self.config = config
        self.alphabet: Alphabet = get_alphabet(config.alphabet)
        self.net = build_net(config, self.alphabet.size)
        if params is None:
            if init == "zeros":
                params = self.net.init_params(None, config.init_scale)
            else:
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0]))
                params = self.net.init_params(rng, config.init_scale)
        self.params: ParameterSet = params
        self.frozen = frozen
        if frozen:
            for v in self.params.values():
                v.setflags(write=False)

    @property
    def L(self) -> int:
        return self.config.L

    @property
    def n_params(self) -> int:
        return param_count(self.params)

    def clone(self, frozen: bool = False) -> "PolicyModel":
        return PolicyModel(self.config, {k: np.array(v) for k, v in self.params.items()}, frozen=frozen)

    def frozen_copy(self) -> "PolicyModel":
        return self.clone(frozen=True)

    def _check(self, tokens) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.shape[1] != self.L:
            raise UsageError(f"expected length {self.L}, got {tokens.shape[1]}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.alphabet.size):
            raise UsageError("token outside the policy alphabet")
        return tokens

    def encode(self, seqs) -> np.ndarray:
        """Token array from Sequences, strings or an existing array."""
        if isinstance(seqs, np.ndarray):
            return self._check(seqs)
        rows = []
        for s in seqs:
            if isinstance(s, Sequence):
                if s.alphabet != self.alphabet:
                    raise UsageError("sequence alphabet differs from policy alphabet")
                rows.append(s.tokens)
            else:
                rows.append(tuple(self.alphabet.encode(s)))
        return self._check(np.array(rows, dtype=np.int64).reshape(len(rows), self.L))

    def token_log_probs(self, tokens) -> np.ndarray:
        tokens = self._check(tokens)
        logits, _ = self.net.forward(self.params, tokens)
        lp = log_softmax(logits)
        return np.take_along_axis(lp, tokens[:, :, None], axis=2)[:, :, 0]

    def log_probs(self, tokens) -> np.ndarray:
        return self.token_log_probs(tokens).sum(axis=1)

    def log_prob(self, s) -> float:
        return float(self.log_probs(self.encode([s]))[0])

    def grad_weighted(self, tokens, weights) -> ParameterSet:
        if self.frozen:
            raise UsageError("frozen reference model has no trainable gradient")
        tokens = self._check(tokens)
        weights = np.asarray(weights, dtype=np.float64)
        logits, cache = self.net.forward(self.params, tokens)
        probs = np.exp(log_softmax(logits))
        d = -probs
        n, L = tokens.shape
        d[np.arange(n)[:, None], np.arange(L)[None, :], tokens] += 1.0
        d *= weights[:, None, None]
        return self.net.backward(self.params, cache, d)

    def grad_log_prob(self, s) -> ParameterSet:
        return self.grad_weighted(self.encode([s]), np.ones(1))

    def next_token_log_probs(self, prefix_tokens: np.ndarray, t: int) -> np.ndarray:
        """Log-probs of position t given a (N, L) array whose first t columns are set."""
        logits, _ = self.net.forward(self.params, prefix_tokens)
        return log_softmax(logits[:, t, :])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        tokens = np.zeros((n, self.L), dtype=np.int64)
        if n == 0:
            return tokens
        for t in range(self.L):
            p = np.exp(self.next_token_log_probs(tokens, t))
            cdf = np.cumsum(p, axis=1)
            u = rng.random(n)[:, None]
            tokens[:, t] = np.minimum((u >= cdf).sum(axis=1), self.alphabet.size - 1)
        return tokens

    def sample_strings(self, n: int, rng: np.random.Generator) -> list[str]:
        return [self.alphabet.decode(row) for row in self.sample(n, rng)]

    def enumerate_distribution(self) -> tuple[np.ndarray, np.ndarray]:
        tokens = all_sequences(self.alphabet.size, self.L)
        return tokens, np.exp(self.log_probs(tokens))

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "format": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "tensors": [[k, list(v.shape)] for k, v in self.params.items()],
        }
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in self.params.values():
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, frozen: bool = False) -> "PolicyModel":
        magic, _, rest = data.partition(b"\n")
        if not magic.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a physiopref checkpoint")
        head, _, body = rest.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format')}")
        params, off = {}, 0
        for name, shape in header["tensors"]:
            size = int(np.prod(shape)) * 8
            params[name] = np.frombuffer(body[off:off + size], dtype="<f8").reshape(shape).astype(np.float64)
            off += size
        if off != len(body):
            raise ValueError("checkpoint body size does not match its header")
        return cls(PolicyConfig(**header["config"]), params, frozen=frozen)

    @classmethod
    def load(cls, path, frozen: bool = False) -> "PolicyModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), frozen=frozen)


def all_sequences(vocab: int, L: int) -> np.ndarray:
    if vocab ** L > MAX_ENUMERATION:
        raise CapabilityError(f"{vocab}^{L} sequences exceeds the enumeration cap {MAX_ENUMERATION}")
    return np.array(list(itertools.product(range(vocab), repeat=L)), dtype=np.int64).reshape(-1, L)


def block_process(n: int, L: int, rng: np.random.Generator, h_frac: float = 0.5,
                  run_lengths=(1, 2, 3)) -> np.ndarray:
    """HP2 corpus of alternating hydrophobic/polar runs.

    Run lengths are uniform over ``run_lengths`` (mean 2 by default); the
    first run is H with probability ``h_frac``.
    """
    out = np.zeros((n, L), dtype=np.int64)
    runs = np.asarray(run_lengths)
    for i in range(n):
        state = 0 if rng.random() < h_frac else 1
        t = 0
        while t < L:
            r = int(runs[rng.integers(len(runs))])
            out[i, t:t + r] = state
            t += r
            state ^= 1
    return out
