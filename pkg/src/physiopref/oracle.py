"""Exact 2D square-lattice HP folding and a cheap string surrogate.

Conformations are self-avoiding walks in canonical orientation: the first
step is +x and the first step that is not +x goes +y.  Every other walk is a
rotation or reflection of exactly one canonical walk, so the raw walk count
is ``8 * n_canonical - 4`` (the straight walk has only four images).

Energy is -1 per pair of non-consecutive H residues on adjacent sites.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .seqcore import CapabilityError, HP2, Alphabet, Sequence, as_sequence, hp_string

STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))
TABLE_MAX_L = 14  # contact tables beyond this get too large to hold


@dataclass(frozen=True)
class FoldReport:
    e_min: int
    g: int
    n_conf: int
    L: int

    @property
    def e_per_res(self) -> float:
        return self.e_min / self.L


def default_e_thresh(L: int) -> int:
    return -(L // 5) - 1


def is_foldable(report: FoldReport, L: int | None = None, g_max: int = 4,
                e_thresh: int | None = None) -> bool:
    L = report.L if L is None else L
    if e_thresh is None:
        e_thresh = default_e_thresh(L)
    return report.g <= g_max and report.e_min <= e_thresh


def contact_pairs(L: int) -> list[tuple[int, int]]:
    """Residue pairs that can ever touch on a square lattice (odd gap >= 3)."""
    return [(i, j) for i in range(L) for j in range(i + 3, L) if (j - i) % 2 == 1]


def _canonical_walks(L: int):
    """Yield (coords, contacts) for every canonical SAW with L sites.

    ``contacts`` lists (i, j) pairs with j - i > 1 on adjacent sites.
    """
    coords = [(0, 0), (1, 0)]
    occupied = {(0, 0): 0, (1, 0): 1}
    contacts: list[tuple[int, int]] = []
    if L == 2:
        yield list(coords), []
        return

    def grow(turned: bool):
        j = len(coords)
        x, y = coords[-1]
        for d, (dx, dy) in enumerate(STEPS):
            if not turned and d == 3:
                continue
            p = (x + dx, y + dy)
            if p in occupied:
                continue
            new = []
            for ex, ey in STEPS:
                i = occupied.get((p[0] + ex, p[1] + ey))
                if i is not None and j - i > 1:
                    new.append((i, j))
            coords.append(p)
            occupied[p] = j
            contacts.extend(new)
            if j + 1 == L:
                yield list(coords), list(contacts)
            else:
                yield from grow(turned or d != 0)
            del contacts[len(contacts) - len(new):]
            del occupied[p]
            coords.pop()

    yield from grow(False)


@lru_cache(maxsize=None)
def _count_canonical(L: int) -> int:
    # counting needs no contact bookkeeping, but reusing the walker keeps one code path
    return sum(1 for _ in _canonical_walks(L))


def enumerate_saws(L: int, l_max: int = TABLE_MAX_L) -> int:
    """Number of canonical self-avoiding walks with ``L`` sites."""
    if L < 2:
        raise ValueError("need at least 2 residues")
    if L > l_max:
        raise CapabilityError(f"L={L} exceeds the enumeration limit l_max={l_max}")
    return _count_canonical(L)


def raw_saw_count(L: int, l_max: int = TABLE_MAX_L) -> int:
    return 8 * enumerate_saws(L, l_max) - 4


@lru_cache(maxsize=None)
def contact_table(L: int) -> np.ndarray:
    """(n_conf, n_pairs) float32 0/1 matrix over ``contact_pairs(L)``."""
    if L > TABLE_MAX_L:
        raise CapabilityError(f"contact table limited to L <= {TABLE_MAX_L}")
    pairs = contact_pairs(L)
    col = {p: k for k, p in enumerate(pairs)}
    rows = []
    for _, cs in _canonical_walks(L):
        row = np.zeros(len(pairs), dtype=np.float32)
        for c in cs:
            row[col[c]] = 1.0
        rows.append(row)
    table = np.array(rows, dtype=np.float32).reshape(len(rows), len(pairs))
    table.setflags(write=False)
    return table


def _hh_matrix(patterns: np.ndarray, L: int) -> np.ndarray:
    """patterns: (B, L) bool H-mask -> (B, n_pairs) float32 HH indicators."""
    pairs = contact_pairs(L)
    if not pairs:
        return np.zeros((patterns.shape[0], 0), dtype=np.float32)
    i = np.array([p[0] for p in pairs])
    j = np.array([p[1] for p in pairs])
    return (patterns[:, i] & patterns[:, j]).astype(np.float32)


def fold_table(hmask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ground-state energy and degeneracy for a batch of H-masks of one length."""
    hmask = np.atleast_2d(np.asarray(hmask, dtype=bool))
    L = hmask.shape[1]
    table = contact_table(L)
    e = np.zeros(hmask.shape[0], dtype=np.int64)
    g = np.zeros(hmask.shape[0], dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, table.shape[0]))
    for s in range(0, hmask.shape[0], chunk):
        hh = _hh_matrix(hmask[s:s + chunk], L)
        counts = table @ hh.T  # (n_conf, B)
        best = counts.max(axis=0)
        e[s:s + chunk] = -best.astype(np.int64)
        g[s:s + chunk] = (counts == best[None, :]).sum(axis=0)
    return e, g


def fold_search(hmask) -> tuple[int, int]:
    """Branch-and-bound ground state for one pattern, walking canonical SAWs.

    A branch is cut when the contacts found so far plus the most contacts
    the unplaced H residues could still add falls strictly below the best
    complete walk; ties are kept so the degeneracy stays exact.
    """
    h = [bool(v) for v in hmask]
    L = len(h)
    if L == 2:
        return 0, 1
    # an unplaced residue adds at most 2 contacts with earlier sites (3 if last)
    tail_bound = [0] * (L + 1)
    for j in range(L - 1, -1, -1):
        cap = 3 if j == L - 1 else 2
        tail_bound[j] = tail_bound[j + 1] + (cap if h[j] else 0)

    coords = [(0, 0), (1, 0)]
    occupied = {(0, 0): 0, (1, 0): 1}
    best = -1
    g = 0

    def grow(turned: bool, score: int):
        nonlocal best, g
        j = len(coords)
        if score + tail_bound[j] < best:
            return
        x, y = coords[-1]
        for d, (dx, dy) in enumerate(STEPS):
            if not turned and d == 3:
                continue
            p = (x + dx, y + dy)
            if p in occupied:
                continue
            add = 0
            if h[j]:
                for ex, ey in STEPS:
                    i = occupied.get((p[0] + ex, p[1] + ey))
                    if i is not None and j - i > 1 and h[i]:
                        add += 1
            if j + 1 == L:
                total = score + add
                if total > best:
                    best, g = total, 1
                elif total == best:
                    g += 1
                continue
            coords.append(p)
            occupied[p] = j
            grow(turned or d != 0, score + add)
            del occupied[p]
            coords.pop()

    grow(False, 0)
    return -best, g


class EnergyOracle:
    """Base class: deterministic ``score`` with a pattern-keyed memo."""

    name = "oracle"

    def __init__(self):
        self._cache: dict[str, FoldReport] = {}
        self._lock = threading.Lock()

    def _compute(self, patterns: list[str]) -> list[FoldReport]:
        raise NotImplementedError

    def score(self, s: "Sequence | str") -> FoldReport:
        s = as_sequence(s)
        return self.score_patterns([hp_string(s.tokens, s.alphabet)])[0]

    def score_patterns(self, patterns: list[str]) -> list[FoldReport]:
        missing = sorted({p for p in patterns if p not in self._cache})
        if missing:
            fresh = self._compute(missing)
            with self._lock:
                for p, r in zip(missing, fresh):
                    self._cache[p] = r
            self._persist(missing, fresh)
        return [self._cache[p] for p in patterns]

    def score_tokens(self, tokens: np.ndarray, alphabet: Alphabet = HP2) -> tuple[np.ndarray, np.ndarray]:
        """Energies and degeneracies for rows of a token array."""
        tokens = np.atleast_2d(tokens)
        reports = self.score_patterns([hp_string(row, alphabet) for row in tokens])
        return (np.array([r.e_min for r in reports], dtype=np.int64),
                np.array([r.g for r in reports], dtype=np.int64))

    def _persist(self, patterns, reports):
        pass

    def clear_cache(self):
        self._cache.clear()


class LatticeOracle(EnergyOracle):
    name = "lattice"

    def __init__(self, l_max: int = 14, cache_path: str | None = None):
        super().__init__()
        self.l_max = l_max
        self.cache_path = cache_path if cache_path is not None else os.environ.get("PHYSIOPREF_CACHE")
        if self.cache_path and os.path.exists(self.cache_path):
            self._load_cache(self.cache_path)

    def _load_cache(self, path):
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    pattern, e, g, nc = line.split(",")
                    self._cache[pattern] = FoldReport(int(e), int(g), int(nc), len(pattern))
                except ValueError:
                    raise ValueError(f"{path}:{n}: malformed cache record {line!r}") from None

    def _persist(self, patterns, reports):
        if not self.cache_path:
            return
        with self._lock, open(self.cache_path, "a") as fh:
            for p, r in zip(patterns, reports):
                fh.write(f"{p},{r.e_min},{r.g},{r.n_conf}\n")

    def _compute(self, patterns):
        out = {}
        by_len: dict[int, list[str]] = {}
        for p in patterns:
            if len(p) > self.l_max:
                raise CapabilityError(f"sequence length {len(p)} exceeds oracle limit l_max={self.l_max}")
            by_len.setdefault(len(p), []).append(p)
        for L, group in by_len.items():
            n_conf = _count_canonical(L)
            if L <= TABLE_MAX_L:
                mask = np.array([[c == "H" for c in p] for p in group], dtype=bool)
                e, g = fold_table(mask)
                for p, ei, gi in zip(group, e, g):
                    out[p] = FoldReport(int(ei), int(gi), n_conf, L)
            else:
                for p in group:
                    e, g = fold_search([c == "H" for c in p])
                    out[p] = FoldReport(e, g, n_conf, L)
        return [out[p] for p in patterns]


class SurrogateOracle(EnergyOracle):
    """O(L) stand-in: -1 per adjacent HH pair in the string."""

    name = "surrogate"

    def _compute(self, patterns):
        return [FoldReport(-sum(a == b == "H" for a, b in zip(p, p[1:])), 1, 1, len(p))
                for p in patterns]


def fold(s: "Sequence | str", oracle: EnergyOracle | None = None) -> FoldReport:
    return (oracle or _default_oracle()).score(s)


def surrogate_score(s: "Sequence | str") -> FoldReport:
    return SurrogateOracle().score(s)


@lru_cache(maxsize=1)
def _default_oracle() -> LatticeOracle:
    return LatticeOracle(cache_path="")


def make_oracle(name: str, l_max: int = 14, cache_path: str | None = None) -> EnergyOracle:
    if name == "lattice":
        return LatticeOracle(l_max=l_max, cache_path=cache_path)
    if name == "surrogate":
        return SurrogateOracle()
    raise ValueError(f"unknown oracle {name!r}; expected 'lattice' or 'surrogate'")
