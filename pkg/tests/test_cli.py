import csv

import pytest

from physiopref.cli import main

TINY = """
model: {L: 8}
reference: {corpus_size: 2000, steps: 150}
data: {pool_size: 60, pairs: 80}
optimizer: {steps: 20, lr: 0.003}
logging: {eval_every: 10, eval_samples: 32}
eval: {n: 100}
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def run(*args):
    return main([str(a) for a in args])


def test_oracle_command(capsys):
    assert run("oracle", "--seq", "HPPH") == 0
    assert capsys.readouterr().out.strip() == "HPPH,-1,1,5,-0.25"


def test_oracle_length_limit():
    assert run("oracle", "--seq", "H" * 20) == 2


def test_pipeline_and_flags(tmp_path, tiny, capsys):
    out = tmp_path / "run"
    assert run("gen-data", "--config", tiny, "--out", out, "--threads", 1) == 0
    assert "pool 60" in capsys.readouterr().out
    assert (out / "manifest-gen-data.json").exists()
    assert run("gen-data", "--config", tiny, "--out", out) == 2
    assert run("gen-data", "--config", tiny, "--out", out, "--force") == 0

    assert run("train", "--config", tiny, "--out", out, "--objective", "dpo") == 0
    assert run("train", "--config", tiny, "--out", out, "--objective", "nope") == 2
    assert run("eval", "--config", tiny, "--out", out, "--checkpoint", out / "dpo.ckpt",
               "--plane", out / "plane.csv") == 0
    rows = list(csv.reader(open(out / "results.csv")))
    assert rows[1][0] == "dpo"
    assert (out / "plane.csv").exists()
    assert run("eval", "--config", tiny, "--out", out, "--checkpoint", out / "missing.ckpt") == 3


def test_psi_flag_reduction(tmp_path, tiny):
    out = tmp_path / "r"
    run("gen-data", "--config", tiny, "--out", out)
    run("train", "--config", tiny, "--out", out, "--objective", "dpo")
    run("train", "--config", tiny, "--out", out / "c", "--data", out, "--objective", "physio", "--psi", "const1")
    assert (out / "dpo_log.csv").read_bytes() == (out / "c" / "physio_log.csv").read_bytes()


def test_sweep(tmp_path, tiny):
    out = tmp_path / "s"
    run("gen-data", "--config", tiny, "--out", out)
    assert run("sweep", "--config", tiny, "--out", out, "--param", "beta", "--grid", "0.05,0.5") == 0
    rows = list(csv.reader(open(out / "sweep.csv")))
    assert rows[0] == ["param", "value", "energy_per_res", "foldability", "ppl", "kl"]
    assert [r[1] for r in rows[1:]] == ["0.05", "0.5"]
    assert run("sweep", "--config", tiny, "--out", out, "--param", "beta", "--grid", "") == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("objective: {beta: -1}\n")
    assert run("gen-data", "--config", p, "--out", tmp_path) == 2


def test_corrupt_dataset_exit_code(tmp_path, tiny):
    out = tmp_path / "c"
    run("gen-data", "--config", tiny, "--out", out)
    (out / "dataset.jsonl").write_text('{"format": 1}\nnot json\n')
    assert run("train", "--config", tiny, "--out", out, "--objective", "dpo") == 3
