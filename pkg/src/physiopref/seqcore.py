"""Residue alphabets, fixed-length sequences and Hamming identity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called with inconsistent arguments."""


class CapabilityError(RuntimeError):
    """Raised when a request exceeds a configured size limit."""


# Kyte-Doolittle hydropathy; a positive value maps the residue to H.
KYTE_DOOLITTLE = {
    "A": 1.8, "R": -4.5, "N": -3.5, "D": -3.5, "C": 2.5,
    "Q": -3.5, "E": -3.5, "G": -0.4, "H": -3.2, "I": 4.5,
    "L": 3.8, "K": -3.9, "M": 1.9, "F": 2.8, "P": -1.6,
    "S": -0.8, "T": -0.7, "W": -0.9, "Y": -1.3, "V": 4.2,
}


@dataclass(frozen=True)
class Alphabet:
    mode: str
    symbols: tuple[str, ...]
    hp_map: tuple[int, ...] = field(repr=False)  # 1 = hydrophobic

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise UsageError("alphabet symbols must be unique")
        if len(self.hp_map) != len(self.symbols):
            raise UsageError("hp_map must have one entry per symbol")
        expected = {"HP2": 2, "AA20": 20}.get(self.mode)
        if expected is None:
            raise UsageError(f"unknown alphabet mode {self.mode!r}")
        if len(self.symbols) != expected:
            raise UsageError(f"{self.mode} needs {expected} symbols")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, ch: str) -> int:
        try:
            return self.symbols.index(ch)
        except ValueError:
            raise UsageError(f"symbol {ch!r} not in {self.mode} alphabet") from None

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index(c) for c in text], dtype=np.int64)

    def decode(self, tokens: Iterable[int]) -> str:
        return "".join(self.symbols[int(t)] for t in tokens)


HP2 = Alphabet("HP2", ("H", "P"), (1, 0))
_AA = "ACDEFGHIKLMNPQRSTVWY"
AA20 = Alphabet("AA20", tuple(_AA), tuple(int(KYTE_DOOLITTLE[a] > 0) for a in _AA))

ALPHABETS = {"HP2": HP2, "AA20": AA20}


def get_alphabet(mode: str) -> Alphabet:
    try:
        return ALPHABETS[mode]
    except KeyError:
        raise UsageError(f"unknown alphabet {mode!r}; expected one of {sorted(ALPHABETS)}") from None


@dataclass(frozen=True)
class Sequence:
    """A fixed-length residue string stored as alphabet indices."""

    tokens: tuple[int, ...]
    alphabet: Alphabet = HP2

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise UsageError("sequences need at least 2 residues")
        if any(t < 0 or t >= self.alphabet.size for t in self.tokens):
            raise UsageError("token index outside alphabet")

    @classmethod
    def from_string(cls, text: str, alphabet: Alphabet = HP2) -> "Sequence":
        return cls(tuple(int(t) for t in alphabet.encode(text)), alphabet)

    @property
    def L(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return self.alphabet.decode(self.tokens)

    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


def as_sequence(s: "Sequence | str", alphabet: Alphabet = HP2) -> Sequence:
    if isinstance(s, Sequence):
        return s
    return Sequence.from_string(s, alphabet)


def hamming_identity(a: "Sequence | str", b: "Sequence | str") -> float:
    a, b = as_sequence(a), as_sequence(b)
    if a.alphabet != b.alphabet:
        raise UsageError("identity requires sequences over the same alphabet")
    if a.L != b.L:
        raise UsageError(f"length mismatch: {a.L} vs {b.L}")
    same = sum(x == y for x, y in zip(a.tokens, b.tokens))
    return same / a.L


def identity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise identity fractions between rows of two token arrays."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise UsageError("length mismatch")
    out = np.zeros((a.shape[0], b.shape[0]))
    # column loop keeps memory at O(n*m) for long lists
    for j in range(a.shape[1]):
        out += a[:, j, None] == b[None, :, j]
    return out / a.shape[1]


def max_identity_to_set(q: "Sequence | str", refs: Iterable["Sequence | str"]) -> float:
    q = as_sequence(q)
    refs = [as_sequence(r, q.alphabet) for r in refs]
    if not refs:
        raise UsageError("reference set is empty")
    if len({r.L for r in refs}) != 1:
        raise UsageError("reference sequences must share one length")
    return max(hamming_identity(q, r) for r in refs)


def to_hp_pattern(s: "Sequence | str") -> Sequence:
    s = as_sequence(s)
    if s.alphabet.mode == "HP2":
        return s
    hp = s.alphabet.hp_map
    # HP2 index 0 is H, so hydrophobic (1) maps to token 0
    return Sequence(tuple(0 if hp[t] else 1 for t in s.tokens), HP2)


def hp_string(tokens: np.ndarray, alphabet: Alphabet) -> str:
    """HP pattern string for a raw token row; fast path used by the oracles."""
    if alphabet.mode == "HP2":
        return "".join("H" if t == 0 else "P" for t in tokens)
    hp = alphabet.hp_map
    return "".join("H" if hp[t] else "P" for t in tokens)
