"""End-to-end steps shared by the CLI and the acceptance harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import train_config
from .evaluation import EvalReport, evaluate
from .numerics import seeded_rng
from .oracle import EnergyOracle, make_oracle
from .policy import PolicyConfig, PolicyModel
from .prefdata import (DatasetSplit, ScoredSequence, build_pairs, generate_fold_score,
                       split_by_identity)
from .trainer import TrainLog, train, train_reference

# child-stream ids under the run seed
STREAM_POOL, STREAM_PAIRS, STREAM_SPLIT, STREAM_EVAL = 11, 12, 13, 14


def policy_config(cfg: dict) -> PolicyConfig:
    m = cfg["model"]
    return PolicyConfig(alphabet=m["alphabet"], L=m["L"], arch=m["arch"], k=m["k"], hidden=m["hidden"],
                        embed=m["embed"], d_model=m["d_model"], heads=m["heads"],
                        init_scale=m["init_scale"], seed=cfg["seed"])


def oracle_from(cfg: dict, cache_path: str | None = None) -> EnergyOracle:
    return make_oracle(cfg["oracle"]["name"], cfg["oracle"]["l_max"], cache_path)


def build_reference(cfg: dict) -> PolicyModel:
    r = cfg["reference"]
    return train_reference(policy_config(cfg), r["corpus_size"], r["steps"], r["batch_size"], r["lr"])


@dataclass
class DatasetBuild:
    ref: PolicyModel
    pool: list[ScoredSequence]
    split: DatasetSplit


def build_dataset(cfg: dict, oracle: EnergyOracle, ref: PolicyModel | None = None) -> DatasetBuild:
    """Reference model -> pool -> pairs -> identity split, all from ``cfg['seed']``."""
    seed = cfg["seed"]
    d = cfg["data"]
    ref = ref if ref is not None else build_reference(cfg)
    pool = generate_fold_score(ref, oracle, d["pool_size"], seeded_rng(seed, STREAM_POOL),
                               q_conf=d["q_conf"], g_max=cfg["oracle"]["g_max"],
                               e_thresh=cfg["oracle"]["e_thresh"])
    pairs = build_pairs(pool, d["strategy"], d["pairs"], seeded_rng(seed, STREAM_PAIRS),
                        prefer_hard=d["prefer_hard"], drop_zero_gap=d["drop_zero_gap"])
    split = split_by_identity(pairs, d["identity_threshold"], d["fractions"],
                              seeded_rng(seed, STREAM_SPLIT), cfg["model"]["alphabet"])
    split.meta = {"alphabet": cfg["model"]["alphabet"], "L": cfg["model"]["L"],
                  "oracle": oracle.name, "seed": seed, **split.meta}
    return DatasetBuild(ref, pool, split)


def run_training(cfg: dict, ref: PolicyModel, split: DatasetSplit, oracle: EnergyOracle,
                 log_path=None) -> tuple[PolicyModel, TrainLog]:
    return train(train_config(cfg), ref, split.train, oracle, log_path=log_path,
                 kl_cap=cfg["logging"]["kl_cap"])


def train_sequences(split: DatasetSplit) -> list[str]:
    return sorted({s for p in split.train for s in (p.yw, p.yl)})


def run_eval(cfg: dict, policy: PolicyModel, ref: PolicyModel, split: DatasetSplit,
             oracle: EnergyOracle) -> EvalReport:
    rng = seeded_rng(cfg["seed"], STREAM_EVAL)
    return evaluate(policy, ref, oracle, train_sequences(split), cfg["eval"]["n"], rng,
                    g_max=cfg["oracle"]["g_max"], seed=cfg["seed"])


def summary_counts(build: DatasetBuild) -> dict:
    labels = [p.label for p in build.pool]
    return {
        "pool": len(build.pool),
        "stable": labels.count("stable"),
        "unstable": labels.count("unstable"),
        "hard_negative": labels.count("hard_negative"),
        "train": len(build.split.train),
        "val": len(build.split.val),
        "test": len(build.split.test),
        "mean_delta_e": float(np.mean([p.delta_e for p in build.split.all_pairs()] or [0.0])),
    }
