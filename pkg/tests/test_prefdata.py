import json

import numpy as np
import pytest

from physiopref.oracle import FoldReport
from physiopref.prefdata import (DatasetFormatError, DatasetSplit, DegenerateSplitError, EmptyDatasetError,
                                 PreferencePair, ScoredSequence, build_pairs, generate_fold_score,
                                 leakage_violations, load_dataset, mine_hard_negatives, revalidate,
                                 save_dataset, score_pool, split_by_identity)
from physiopref.seqcore import max_identity_to_set
from physiopref.trainer import train_reference
from physiopref.policy import PolicyConfig


def entry(seq, e, label, conf=0.0, g=1):
    return ScoredSequence(seq, FoldReport(e, g, 10, len(seq)), conf, label == "stable", label)


@pytest.fixture(scope="module")
def ref12():
    return train_reference(PolicyConfig(L=12, seed=0), corpus_size=4000, steps=300)


@pytest.fixture(scope="module")
def pool(ref12, oracle):
    return generate_fold_score(ref12, oracle, 1000, np.random.default_rng(0))


def test_single_pair_example():
    pool = [entry("HHHH", -3, "stable"), entry("PPPP", 0, "hard_negative")]
    pairs = build_pairs(pool, "max_gap", 5, np.random.default_rng(0))
    assert [(p.yw, p.yl, p.delta_e) for p in pairs] == [("HHHH", "PPPP", 3.0)]


def test_max_gap_takes_the_largest_gap():
    pool = [entry("HHHH", -3, "stable"), entry("PPPP", 0, "unstable"), entry("HPPP", -1, "unstable")]
    pairs = build_pairs(pool, "max_gap", 1, np.random.default_rng(0))
    assert pairs[0].yl == "PPPP" and pairs[0].delta_e == 3.0


def test_hard_negatives_first_then_backfill():
    pool = [entry("HHHH", -3, "stable"), entry("PPPP", 0, "unstable"), entry("HPPP", -1, "hard_negative")]
    pairs = build_pairs(pool, "max_gap", 2, np.random.default_rng(0))
    assert [p.yl for p in pairs] == ["HPPP", "PPPP"]
    plain = build_pairs(pool, "max_gap", 1, np.random.default_rng(0), prefer_hard=False)
    assert plain[0].yl == "PPPP"


def test_ties_broken_by_sequence_order():
    pool = [entry("HHHH", -3, "stable"), entry("PPPH", 0, "unstable"), entry("PPPP", 0, "unstable")]
    assert build_pairs(pool, "max_gap", 1, np.random.default_rng(0))[0].yl == "PPPH"


def test_no_valid_pair():
    pool = [entry("HHHH", -2, "stable"), entry("PPPP", -2, "unstable")]
    with pytest.raises(EmptyDatasetError):
        build_pairs(pool, "max_gap", 3, np.random.default_rng(0))
    with pytest.raises(EmptyDatasetError):
        build_pairs([entry("HHHH", -2, "stable")], "random", 3, np.random.default_rng(0))


def test_labels_partition_and_invariants(pool):
    assert len(pool) == 1000
    assert len({p.seq for p in pool}) == 1000
    cut = np.quantile([p.confidence for p in pool], 0.75)
    for p in pool:
        assert p.label in ("stable", "unstable", "hard_negative")
        if p.label == "stable":
            assert p.foldable
        if p.label == "hard_negative":
            assert p.confidence >= cut and not p.foldable
    # independent filter: unfoldable and in the top confidence quartile
    expected = {p.seq for p in pool if not p.foldable and p.confidence >= cut}
    assert {p.seq for p in pool if p.label == "hard_negative"} == expected


def test_mine_hard_negatives_examples():
    assert mine_hard_negatives([entry("HHHH", -3, "stable", conf=1.0)]) == []
    a, b = entry("PPPP", 0, "unstable", conf=0.9), entry("PPPH", 0, "unstable", conf=0.1)
    assert mine_hard_negatives([a, b], 0.5) == [a]


def test_all_p_sequence_is_unstable(ref12, oracle):
    [s] = score_pool(["P" * 12], ref12, oracle)
    assert s.report.e_min == 0 and s.label == "unstable"


def test_generation_is_deterministic(ref12, oracle):
    a = generate_fold_score(ref12, oracle, 1, np.random.default_rng(5))
    b = generate_fold_score(ref12, oracle, 1, np.random.default_rng(5))
    assert a == b


def test_pair_invariants_and_gap_ordering(pool, oracle):
    mg = build_pairs(pool, "max_gap", 2000, np.random.default_rng(1))
    rnd = build_pairs(pool, "random", 2000, np.random.default_rng(1))
    for p in mg + rnd:
        assert p.ew < p.el and p.delta_e == p.el - p.ew
        assert oracle.score(p.yw).e_min == p.ew and oracle.score(p.yl).e_min == p.el
    assert len(set((p.yw, p.yl) for p in mg)) == len(mg)
    assert np.mean([p.delta_e for p in mg]) >= np.mean([p.delta_e for p in rnd])


def test_random_pairing_reproducible(pool):
    a = build_pairs(pool, "random", 300, np.random.default_rng(3))
    b = build_pairs(pool, "random", 300, np.random.default_rng(3))
    assert a == b


def _pairs(pool, m=2000):
    return build_pairs(pool, "max_gap", m, np.random.default_rng(2))


def test_split_threshold_one_is_duplicate_safe(pool):
    split = split_by_identity(_pairs(pool), 1.0, (0.9, 0.05, 0.05), np.random.default_rng(0))
    where = {}
    for name in ("train", "val", "test"):
        for p in getattr(split, name):
            for s in (p.yw, p.yl):
                assert where.setdefault(s, name) == name
    assert leakage_violations(split) == 0
    assert len(split.train) > len(split.val) > 0


def test_split_exhaustive_scan_at_lower_threshold(pool):
    pairs = build_pairs(pool[:150], "max_gap", 100, np.random.default_rng(2))
    split = split_by_identity(pairs, 0.9, (0.8, 0.1, 0.1), np.random.default_rng(0))
    train = {s for p in split.train for s in (p.yw, p.yl)}
    for p in split.test + split.val:
        for s in (p.yw, p.yl):
            assert max_identity_to_set(s, train) <= 0.9


def test_split_degenerate_threshold(pool):
    with pytest.raises(DegenerateSplitError, match="largest cluster"):
        split_by_identity(_pairs(pool), 0.5, (0.9, 0.05, 0.05), np.random.default_rng(0))


def test_roundtrip(tmp_path, pool):
    split = split_by_identity(_pairs(pool, 100), 1.0, rng=np.random.default_rng(0))
    split.meta = {"alphabet": "HP2", "L": 12, "oracle": "lattice", "seed": 0}
    path = tmp_path / "d.jsonl"
    save_dataset(split, path)
    assert load_dataset(path) == split


def test_empty_sections_roundtrip(tmp_path):
    split = DatasetSplit([PreferencePair("HHPP", "PPPP", -1, 0, 1.0, "max_gap", "train")], [], [], 1.0,
                         {"alphabet": "HP2", "L": 4})
    save_dataset(split, tmp_path / "e.jsonl")
    back = load_dataset(tmp_path / "e.jsonl")
    assert back.val == [] and back.test == [] and back == split


def test_tampered_energy_is_rejected(tmp_path, pool):
    split = split_by_identity(_pairs(pool, 50), 1.0, rng=np.random.default_rng(0))
    path = tmp_path / "t.jsonl"
    save_dataset(split, path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[3])
    rec["ew"] -= 1
    lines[3] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 4"):
        load_dataset(path)


def test_malformed_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"format": 1}\n{"yw": \n')
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_dataset(path)


def test_revalidate_catches_wrong_energy(oracle):
    good = PreferencePair("HPPH", "PPPP", -1, 0, 1.0, "max_gap", "train")
    bad = PreferencePair("HPPH", "PPPP", -2, 0, 2.0, "max_gap", "train")
    assert revalidate(DatasetSplit([good], [], [], 1.0), oracle) == []
    assert len(revalidate(DatasetSplit([bad], [], [], 1.0), oracle)) == 1
