import numpy as np
import pytest
from scipy.stats import chisquare

from physiopref.numerics import grad_check
from physiopref.policy import PolicyConfig, PolicyModel, all_sequences, block_process
from physiopref.seqcore import CapabilityError, UsageError

from conftest import tiny_policy


@pytest.mark.parametrize("arch", ["ngram", "attn1"])
def test_distribution_normalised(arch):
    pol = tiny_policy(L=6, arch=arch)
    _, p = pol.enumerate_distribution()
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_init_is_uniform():
    pol = PolicyModel(PolicyConfig(L=7), init="zeros")
    lp = pol.log_probs(all_sequences(2, 7))
    np.testing.assert_allclose(lp, -7 * np.log(2), atol=1e-12)


@pytest.mark.parametrize("arch", ["ngram", "attn1"])
def test_chain_rule_matches_stepwise_conditionals(arch):
    pol = tiny_policy(L=5, arch=arch, seed=3)
    toks = np.random.default_rng(0).integers(0, 2, (6, 5))
    total = np.zeros(6)
    for t in range(5):
        total += pol.next_token_log_probs(toks, t)[np.arange(6), toks[:, t]]
    np.testing.assert_allclose(total, pol.log_probs(toks), atol=1e-12)


def test_future_tokens_do_not_leak():
    pol = tiny_policy(L=6, arch="attn1", seed=2)
    a = np.array([[0, 1, 0, 0, 0, 0]])
    b = np.array([[0, 1, 0, 1, 1, 1]])
    np.testing.assert_allclose(pol.token_log_probs(a)[0, :3], pol.token_log_probs(b)[0, :3], atol=1e-14)


def test_sampling_matches_probabilities():
    pol = tiny_policy(L=4, seed=1, scale=1.0)
    toks, p = pol.enumerate_distribution()
    s = pol.sample(40000, np.random.default_rng(9))
    idx = (s * (2 ** np.arange(3, -1, -1))).sum(axis=1)
    counts = np.bincount(idx, minlength=16)
    assert chisquare(counts, p * 40000).pvalue > 1e-3


@pytest.mark.parametrize("arch", ["ngram", "attn1"])
def test_grad_weighted_finite_differences(arch):
    pol = tiny_policy(L=5, arch=arch, seed=4)
    r = np.random.default_rng(2)
    toks = r.integers(0, 2, (8, 5))
    w = r.normal(size=8)
    g = pol.grad_weighted(toks, w)
    err = grad_check(lambda _: float(w @ pol.log_probs(toks)), g, pol.params, n_samples=None)
    assert err < 1e-6


def test_frozen_reference():
    ref = tiny_policy().frozen_copy()
    with pytest.raises(UsageError):
        ref.grad_weighted(np.zeros((1, 5), dtype=int), np.ones(1))
    with pytest.raises(ValueError):
        ref.params["b2"][0] = 1.0


def test_clone_is_independent():
    a = tiny_policy()
    b = a.clone()
    b.params["b2"] += 1.0
    assert not np.array_equal(a.params["b2"], b.params["b2"])


@pytest.mark.parametrize("arch", ["ngram", "attn1"])
def test_checkpoint_roundtrip_is_lossless(tmp_path, arch):
    pol = tiny_policy(arch=arch, seed=6)
    path = tmp_path / "m.ckpt"
    pol.save(path)
    back = PolicyModel.load(path)
    assert back.config == pol.config
    for k in pol.params:
        assert np.array_equal(back.params[k], pol.params[k])
    assert back.to_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        PolicyModel.from_bytes(b"not a checkpoint\n{}\n")
    data = tiny_policy().to_bytes()
    with pytest.raises(ValueError):
        PolicyModel.from_bytes(data[:-8])


def test_wrong_length_and_alphabet():
    pol = tiny_policy(L=5)
    with pytest.raises(UsageError):
        pol.log_probs(np.zeros((1, 4), dtype=int))
    with pytest.raises(UsageError):
        pol.log_probs(np.full((1, 5), 2))


def test_enumeration_cap():
    with pytest.raises(CapabilityError):
        all_sequences(20, 4)


def test_block_process_runs():
    x = block_process(500, 12, np.random.default_rng(0))
    for row in x:
        runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, row, -1]) != 0))
        assert runs[:-1].max(initial=1) <= 3  # the final run may be cut short
    assert 0.4 < (x == 0).mean() < 0.6
