import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from physiopref.evaluation import (PLANE_HEADER, RESULTS_HEADER, PlaneAxes, append_results, boltzmann_stats,
                                   energy_confidence_plane, evaluate, quadrant, spearman, write_plane)
from physiopref.policy import PolicyConfig, PolicyModel
from physiopref.seqcore import HP2


class OneSequence(PolicyModel):
    """Degenerate policy that always emits one fixed sequence."""

    def __init__(self, seq):
        super().__init__(PolicyConfig(L=len(seq)), init="zeros")
        self.fixed = HP2.encode(seq)

    def sample(self, n, rng):
        return np.tile(self.fixed, (n, 1))

    def log_probs(self, tokens):
        tokens = self._check(tokens)
        return np.where((tokens == self.fixed).all(axis=1), 0.0, -np.inf)


@settings(max_examples=60)
@given(st.lists(st.integers(-5, 5), min_size=3, max_size=20), st.data())
def test_spearman_matches_scipy(xs, data):
    ys = data.draw(st.lists(st.integers(-5, 5), min_size=len(xs), max_size=len(xs)))
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        assert spearman(xs, ys) == 0.0
    else:
        assert spearman(xs, ys) == pytest.approx(spearmanr(xs, ys).statistic, abs=1e-12)


def test_spearman_perfect():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0


def test_degenerate_policy_report(oracle):
    seq = "HPPHHPPHHPPH"
    pol = OneSequence(seq)
    ref = PolicyModel(PolicyConfig(L=12), init="zeros")
    r = oracle.score(seq)
    rep = evaluate(pol, ref, oracle, [seq, "PPPPPPPPPPPP"], 50, np.random.default_rng(0))
    assert rep.energy_per_res == r.e_min / 12
    assert rep.foldability == float(r.g <= 4 and r.e_min <= -3)
    assert rep.identity_mean == rep.identity_max == 1.0
    assert rep.ppl == pytest.approx(2.0)
    assert rep.kl == pytest.approx(12 * np.log(2))


def test_report_invariants(oracle):
    pol = PolicyModel(PolicyConfig(L=10, init_scale=0.5, seed=3))
    rep = evaluate(pol, pol.frozen_copy(), oracle, ["HHHHHPPPPP"], 300, np.random.default_rng(1))
    assert 0 <= rep.foldability <= 1 and rep.ppl >= 1 and -1 <= rep.spearman_energy <= 1
    assert rep.kl == pytest.approx(0.0, abs=1e-12)


def test_results_csv(tmp_path, oracle):
    pol = PolicyModel(PolicyConfig(L=6), init="zeros")
    rep = evaluate(pol, pol, oracle, None, 20, np.random.default_rng(0))
    path = tmp_path / "results.csv"
    append_results(path, "reference", 0, rep)
    append_results(path, "reference", 0, rep)
    rows = list(csv.reader(open(path)))
    assert rows[0] == RESULTS_HEADER and len(rows) == 3 and rows[1] == rows[2]


def test_quadrants():
    ax = PlaneAxes(energy=-0.3, confidence=-0.6)
    assert quadrant(-0.2, -0.5, ax) == "high_conf_high_energy"
    assert quadrant(-0.4, -0.7, ax) == "low_conf_low_energy"
    # a point on the median counts as low
    assert quadrant(-0.3, -0.6, ax) == "low_conf_low_energy"


def test_plane_uses_given_axes(tmp_path, oracle):
    pol = PolicyModel(PolicyConfig(L=8, init_scale=0.5, seed=2))
    rows, counts, axes = energy_confidence_plane(pol, oracle, 200, np.random.default_rng(0))
    assert sum(counts.values()) == 200
    _, _, same = energy_confidence_plane(pol, oracle, 200, np.random.default_rng(5), axes)
    assert same == axes
    write_plane(tmp_path / "p.csv", rows)
    assert open(tmp_path / "p.csv").readline().strip() == ",".join(PLANE_HEADER)


def test_boltzmann_stats_exact_match():
    e = np.array([-3.0, -1.0, 0.0, 0.0])
    T = 0.5
    logp = -e / T - np.log(np.exp(-e / T).sum())
    kl, rho = boltzmann_stats(logp, e, T)
    assert kl == pytest.approx(0.0, abs=1e-12)
    assert rho == 1.0
    kl_u, _ = boltzmann_stats(np.full(4, -np.log(4)), e, T)
    p_b = np.exp(logp)
    assert kl_u == pytest.approx(np.sum(0.25 * (np.log(0.25) - np.log(p_b))))
