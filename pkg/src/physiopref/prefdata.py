"""Preference-pair construction: generate, fold, label, mine, pair, split, persist."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .oracle import EnergyOracle, FoldReport, default_e_thresh
from .policy import PolicyModel
from .seqcore import get_alphabet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
STABLE, UNSTABLE, HARD = "stable", "unstable", "hard_negative"

# Two random HP2 sequences already agree on half their sites, and a pool of
# a few thousand length-12 sequences is single-linkage connected at any cut
# below 1.0, so HP2 only controls exact-duplicate leakage by default.
DEFAULT_IDENTITY = {"HP2": 1.0, "AA20": 0.30}


class EmptyDatasetError(ValueError):
    pass


class DegenerateSplitError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class ScoredSequence:
    seq: str
    report: FoldReport
    confidence: float
    foldable: bool
    label: str = UNSTABLE

    @property
    def energy(self) -> int:
        return self.report.e_min


@dataclass(frozen=True)
class PreferencePair:
    yw: str
    yl: str
    ew: int
    el: int
    delta_e: float
    pairing: str = "max_gap"
    split: str | None = None

    def with_split(self, split: str) -> "PreferencePair":
        return PreferencePair(self.yw, self.yl, self.ew, self.el, self.delta_e, self.pairing, split)


@dataclass
class DatasetSplit:
    train: list[PreferencePair]
    val: list[PreferencePair]
    test: list[PreferencePair]
    threshold: float
    meta: dict = field(default_factory=dict)

    def all_pairs(self) -> list[PreferencePair]:
        return self.train + self.val + self.test

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (self.train, self.val, self.test, self.threshold, self.meta) == \
            (other.train, other.val, other.test, other.threshold, other.meta)


def score_pool(seqs: list[str], ref: PolicyModel, oracle: EnergyOracle, g_max: int = 4,
               e_thresh: int | None = None) -> list[ScoredSequence]:
    """Fold and label a list of sequences; confidence is mean per-token ref log-lik."""
    if not seqs:
        return []
    tokens = ref.encode(seqs)
    conf = ref.log_probs(tokens) / ref.L
    reports = oracle.score_patterns([_hp(s, ref) for s in seqs])
    thresh = default_e_thresh(ref.L) if e_thresh is None else e_thresh
    pool = []
    for s, r, c in zip(seqs, reports, conf):
        ok = r.g <= g_max and r.e_min <= thresh
        pool.append(ScoredSequence(s, r, float(c), ok, STABLE if ok else UNSTABLE))
    return pool


def _hp(s: str, ref: PolicyModel) -> str:
    if ref.alphabet.mode == "HP2":
        return s
    hp = ref.alphabet.hp_map
    return "".join("H" if hp[ref.alphabet.index(c)] else "P" for c in s)


def generate_fold_score(ref: PolicyModel, oracle: EnergyOracle, n: int, rng: np.random.Generator,
                        q_conf: float = 0.75, g_max: int = 4, e_thresh: int | None = None,
                        max_draw_factor: int = 50) -> list[ScoredSequence]:
    """Sample up to ``n`` distinct sequences from ``ref``, fold, label and mine them.

    Sampling continues in batches until ``n`` distinct sequences are seen or
    ``max_draw_factor * n`` draws were spent (small spaces can run dry).
    """
    if n < 1:
        raise ValueError("pool size must be >= 1")
    seen: dict[str, None] = {}
    drawn = 0
    while len(seen) < n and drawn < max_draw_factor * n:
        batch = max(n - len(seen), 16)
        for s in ref.sample_strings(batch, rng):
            if len(seen) < n:
                seen.setdefault(s)
        drawn += batch
    pool = score_pool(list(seen), ref, oracle, g_max, e_thresh)
    mine_hard_negatives(pool, q_conf)
    return pool


def mine_hard_negatives(pool: list[ScoredSequence], q_conf: float = 0.75) -> list[ScoredSequence]:
    """Relabel confident-but-unfoldable entries as hard negatives and return them."""
    if not pool:
        return []
    if not 0 < q_conf < 1:
        raise ValueError("q_conf must lie in (0, 1)")
    cut = float(np.quantile([p.confidence for p in pool], q_conf))
    hard = []
    for p in pool:
        if p.confidence >= cut and not p.foldable:
            p.label = HARD
            hard.append(p)
    return hard


def build_pairs(pool: list[ScoredSequence], strategy: str, m: int, rng: np.random.Generator,
                prefer_hard: bool = True, drop_zero_gap: bool = True) -> list[PreferencePair]:
    """Pair stable winners with non-stable losers.

    ``max_gap`` walks the winners (lowest energy first) in rounds; each
    winner takes the unused loser with the largest energy gap, drawing from
    hard negatives before other non-stable entries.  Once every candidate
    of a winner is used the loser pool is recycled, never repeating a pair.
    ``random`` samples m distinct valid (winner, loser) pairs uniformly.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    winners = sorted((p for p in pool if p.label == STABLE), key=lambda p: (p.energy, p.seq))
    losers = sorted((p for p in pool if p.label != STABLE), key=lambda p: p.seq)
    if not winners or not losers:
        raise EmptyDatasetError("pool needs at least one stable and one non-stable sequence")
    ew = np.array([p.energy for p in winners])
    el = np.array([p.energy for p in losers])
    valid = (el[None, :] >= ew[:, None]) if not drop_zero_gap else (el[None, :] > ew[:, None])
    if not valid.any():
        raise EmptyDatasetError("no winner/loser combination has a positive energy gap")

    chosen: list[tuple[int, int]] = []
    if strategy == "random":
        wi, li = np.nonzero(valid)
        k = min(m, len(wi))
        pick = rng.choice(len(wi), size=k, replace=False)
        chosen = [(int(wi[i]), int(li[i])) for i in pick]
    elif strategy == "max_gap":
        hard = np.array([p.label == HARD for p in losers])
        emitted = np.zeros_like(valid)
        used = np.zeros(len(losers), dtype=bool)
        while len(chosen) < m:
            progress = False
            for i in range(len(winners)):
                if len(chosen) == m:
                    break
                open_ = valid[i] & ~emitted[i]
                if not open_.any():
                    continue
                cand = open_ & ~used
                if not cand.any():
                    used[:] = False
                    cand = open_
                if prefer_hard and (cand & hard).any():
                    cand = cand & hard
                # first index wins ties: losers are sorted by sequence
                j = int(np.argmax(np.where(cand, el, np.iinfo(np.int64).min)))
                chosen.append((i, j))
                used[j] = True
                emitted[i, j] = True
                progress = True
            if not progress:
                break
    else:
        raise ValueError(f"unknown pairing strategy {strategy!r}; expected 'max_gap' or 'random'")

    return [PreferencePair(winners[i].seq, losers[j].seq, int(ew[i]), int(el[j]),
                           float(max(0, el[j] - ew[i])), strategy)
            for i, j in chosen]


def _sequence_clusters(seqs: list[str], threshold: float, alphabet) -> np.ndarray:
    """Single-linkage cluster id per sequence, linking identity > threshold."""
    tokens = np.array([alphabet.encode(s) for s in seqs])
    L = tokens.shape[1]
    rows, cols = [], []
    need = int(np.floor(threshold * L + 1e-9)) + 1  # matches strictly above threshold
    if need <= L:
        block = 256
        for s in range(0, len(seqs), block):
            matches = np.zeros((min(block, len(seqs) - s), len(seqs)), dtype=np.int16)
            for j in range(L):
                matches += tokens[s:s + block, j, None] == tokens[None, :, j]
            r, c = np.nonzero(matches >= need)
            rows.extend((r + s).tolist())
            cols.extend(c.tolist())
    n = len(seqs)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def split_by_identity(pairs: list[PreferencePair], threshold: float,
                      fractions=(0.90, 0.05, 0.05), rng: np.random.Generator | None = None,
                      alphabet: str = "HP2") -> DatasetSplit:
    """Leakage-free train/val/test split.

    Sequences are clustered by single linkage at identity > threshold and
    whole clusters go to the split furthest below its target share
    (largest clusters first, ties in seeded random order).  A pair is kept
    only when its winner and loser land in the same split, so pairs that
    share a sequence never straddle splits.
    """
    if not 0 < threshold <= 1:
        raise ValueError("identity threshold must lie in (0, 1]")
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    if not pairs:
        return DatasetSplit([], [], [], threshold)
    rng = rng or np.random.default_rng(0)
    seqs = sorted({s for p in pairs for s in (p.yw, p.yl)})
    comp = _sequence_clusters(seqs, threshold, get_alphabet(alphabet))
    clusters: dict[int, list[int]] = {}
    for i, c in enumerate(comp):
        clusters.setdefault(int(c), []).append(i)
    order = list(clusters.values())
    perm = rng.permutation(len(order))
    order = sorted((order[i] for i in perm), key=len, reverse=True)
    targets = fractions * len(seqs)
    counts = np.zeros(3)
    where = np.zeros(len(seqs), dtype=np.int64)
    for members in order:
        k = int(np.argmax(targets - counts))
        where[members] = k
        counts[k] += len(members)
    index = {s: i for i, s in enumerate(seqs)}
    parts: list[list[PreferencePair]] = [[], [], []]
    for p in pairs:
        kw, kl = where[index[p.yw]], where[index[p.yl]]
        if kw == kl:
            parts[kw].append(p.with_split(SPLITS[kw]))
    if len(order[0]) > fractions.max() * len(seqs):
        raise DegenerateSplitError(
            f"identity threshold {threshold} is below what the data allows: the largest cluster "
            f"holds {len(order[0])} of {len(seqs)} sequences")
    for k in range(3):
        if fractions[k] > 0 and not parts[k]:
            log.warning("split %r received no pairs (%d sequences in total)", SPLITS[k], len(seqs))
    dropped = len(pairs) - sum(len(x) for x in parts)
    return DatasetSplit(*parts, threshold=threshold, meta={"dropped_straddling": dropped})


def leakage_violations(split: DatasetSplit, alphabet: str = "HP2") -> int:
    """Count test sequences whose identity to any training sequence exceeds the threshold."""
    train = sorted({s for p in split.train for s in (p.yw, p.yl)})
    test = sorted({s for p in split.test for s in (p.yw, p.yl)})
    if not train or not test:
        return 0
    a = get_alphabet(alphabet)
    tr = np.array([a.encode(s) for s in train])
    te = np.array([a.encode(s) for s in test])
    bad = 0
    for t in te:
        ident = (tr == t[None, :]).mean(axis=1)
        bad += int(ident.max() > split.threshold)
    return bad


# -- persistence ------------------------------------------------------------

def save_dataset(split: DatasetSplit, path) -> None:
    header = {"format": FORMAT_VERSION, **split.meta, "identity_threshold": split.threshold}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for name in SPLITS:
            for p in getattr(split, name):
                rec = {"yw": p.yw, "yl": p.yl, "ew": p.ew, "el": p.el,
                       "delta_e": p.delta_e, "pairing": p.pairing, "split": name}
                fh.write(json.dumps(rec) + "\n")


def _parse_record(line: str, n: int, alphabet, L) -> PreferencePair:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {n}: invalid JSON ({exc.msg})") from None
    keys = {"yw", "yl", "ew", "el", "delta_e", "pairing", "split"}
    if not isinstance(rec, dict) or set(rec) != keys:
        raise DatasetFormatError(f"line {n}: expected fields {sorted(keys)}")
    for k in ("ew", "el"):
        if not isinstance(rec[k], int) or isinstance(rec[k], bool):
            raise DatasetFormatError(f"line {n}: {k} must be an integer")
    if not isinstance(rec["delta_e"], (int, float)):
        raise DatasetFormatError(f"line {n}: delta_e must be a number")
    if rec["delta_e"] != max(0, rec["el"] - rec["ew"]):
        raise DatasetFormatError(f"line {n}: delta_e {rec['delta_e']} != max(0, el - ew)")
    if rec["split"] not in SPLITS:
        raise DatasetFormatError(f"line {n}: unknown split {rec['split']!r}")
    for k in ("yw", "yl"):
        s = rec[k]
        if not isinstance(s, str) or (L is not None and len(s) != L) or \
                (alphabet is not None and any(c not in alphabet.symbols for c in s)):
            raise DatasetFormatError(f"line {n}: malformed sequence in {k}")
    return PreferencePair(rec["yw"], rec["yl"], rec["ew"], rec["el"], float(rec["delta_e"]),
                          rec["pairing"], rec["split"])


def load_dataset(path) -> DatasetSplit:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DatasetFormatError("line 1: header is not valid JSON") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_VERSION:
        raise DatasetFormatError("line 1: unsupported or missing format version")
    alphabet = get_alphabet(header["alphabet"]) if "alphabet" in header else None
    L = header.get("L")
    parts = {k: [] for k in SPLITS}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        p = _parse_record(line, n, alphabet, L)
        parts[p.split].append(p)
    meta = {k: v for k, v in header.items() if k not in ("format", "identity_threshold")}
    return DatasetSplit(parts["train"], parts["val"], parts["test"],
                        float(header.get("identity_threshold", 1.0)), meta)


def revalidate(split: DatasetSplit, oracle: EnergyOracle, alphabet: str = "HP2") -> list[str]:
    """Problems found when re-folding every persisted pair (empty list = clean)."""
    a = get_alphabet(alphabet)
    problems = []
    for p in split.all_pairs():
        ew = oracle.score(_to_hp(p.yw, a)).e_min
        el = oracle.score(_to_hp(p.yl, a)).e_min
        if (ew, el) != (p.ew, p.el) or p.delta_e != max(0, el - ew):
            problems.append(f"{p.yw}/{p.yl}: stored ({p.ew}, {p.el}, {p.delta_e}) vs oracle ({ew}, {el})")
    return problems


def _to_hp(s: str, a) -> str:
    if a.mode == "HP2":
        return s
    return "".join("H" if a.hp_map[a.index(c)] else "P" for c in s)
