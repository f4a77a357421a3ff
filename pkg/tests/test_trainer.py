import numpy as np
import pytest

from physiopref.policy import PolicyConfig
from physiopref.prefdata import build_pairs, generate_fold_score
from physiopref.trainer import (LOG_HEADER, NumericAbort, TrainConfig, kl_mc_stderr, kl_to_ref, train,
                                train_reference)
from physiopref.seqcore import UsageError


@pytest.fixture(scope="module")
def setup(oracle):
    ref = train_reference(PolicyConfig(L=8, k=3, hidden=12, embed=4, seed=1), corpus_size=2000, steps=200)
    pool = generate_fold_score(ref, oracle, 150, np.random.default_rng(0))
    return ref, build_pairs(pool, "max_gap", 300, np.random.default_rng(0))


def quick(objective, **kw):
    base = dict(objective=objective, steps=30, eval_every=10, eval_samples=64, lr=3e-3, rm_steps=50,
                pg_samples=16)
    base.update(kw)
    return TrainConfig(**base)


def test_reference_learns_block_statistics():
    ref = train_reference(PolicyConfig(L=8, seed=0), corpus_size=2000, steps=300)
    # runs longer than 3 are absent from the corpus, so HHHHHHHH must be unlikely
    assert ref.log_prob("HHHHHHHH") < ref.log_prob("HHPPHHPP") - 2
    assert ref.frozen


@pytest.mark.parametrize("objective", ["sft", "dpo", "ipo", "kto", "physio", "physio-linear", "pg"])
def test_every_objective_runs_and_logs(tmp_path, setup, oracle, objective):
    ref, pairs = setup
    log = tmp_path / "log.csv"
    pol, tl = train(quick(objective), ref, pairs, oracle, log_path=log)
    rows = log.read_text().splitlines()
    assert rows[0] == ",".join(LOG_HEADER)
    assert [r["step"] for r in tl.rows] == [10, 20, 30]
    assert len(rows) == 4
    assert all(np.isfinite(r["loss"]) for r in tl.rows)
    assert not np.array_equal(pol.params["b2"], ref.params["b2"])


def test_const_weight_reduces_to_dpo(setup, oracle, tmp_path):
    ref, pairs = setup
    _, a = train(quick("dpo"), ref, pairs, oracle, log_path=tmp_path / "a.csv")
    _, b = train(quick("physio", psi="const1"), ref, pairs, oracle, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_training_is_deterministic(setup, oracle):
    ref, pairs = setup
    p1, l1 = train(quick("physio"), ref, pairs, oracle)
    p2, l2 = train(quick("physio"), ref, pairs, oracle)
    assert l1.rows == l2.rows
    assert all(np.array_equal(p1.params[k], p2.params[k]) for k in p1.params)


def test_physio_lowers_energy(setup, oracle):
    ref, pairs = setup
    _, tl = train(quick("physio", steps=300, eval_every=300, eval_samples=512, lr=1e-2), ref, pairs, oracle)
    from physiopref.trainer import sample_metrics
    from physiopref.numerics import seeded_rng
    e_ref, _ = sample_metrics(ref, oracle, 512, seeded_rng(0, 2, 300))
    assert tl.rows[-1]["energy_per_res"] < e_ref


def test_numeric_abort(setup, oracle, monkeypatch):
    ref, pairs = setup
    import physiopref.objectives as obj
    monkeypatch.setattr(obj, "dpo_loss", lambda *a, **k: (float("nan"), None))
    with pytest.raises(NumericAbort) as exc:
        train(quick("dpo"), ref, pairs, oracle)
    assert exc.value.step == 1


def test_kl_modes_agree(setup):
    ref, _ = setup
    pol = ref.clone()
    assert kl_to_ref(pol, ref) == 0.0
    pol.params["b2"][0] += 1.0
    exact = kl_to_ref(pol, ref, "exact")
    mc, se = kl_mc_stderr(pol, ref, 20000, np.random.default_rng(0))
    assert exact > 0 and abs(mc - exact) < 4 * se


def test_bad_config():
    with pytest.raises(UsageError, match="physio-linear"):
        TrainConfig(objective="ppo")
    with pytest.raises(UsageError):
        TrainConfig(psi="cubic")
