"""Run configuration: YAML file + dotted-key overrides on top of defaults."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .objectives import LATTICE_PSI, REU_PSI, ConfigError
from .prefdata import DEFAULT_IDENTITY
from .trainer import OBJECTIVES, PSI_KINDS, TrainConfig


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "model": {
        "alphabet": "HP2", "L": 12, "arch": "ngram", "k": 4, "hidden": 32, "embed": 8,
        "d_model": 32, "heads": 2, "init_scale": 0.1,
    },
    "reference": {"corpus_size": 20000, "steps": 2000, "batch_size": 256, "lr": 0.003},
    "oracle": {"name": "lattice", "l_max": 14, "g_max": 4, "e_thresh": None},
    "data": {
        "pool_size": 3000, "pairs": 5000, "strategy": "max_gap", "q_conf": 0.75,
        "prefer_hard": True, "drop_zero_gap": True, "identity_threshold": None,
        "fractions": [0.90, 0.05, 0.05],
    },
    "objective": {
        "name": "physio", "psi": "sigmoid", "beta": 0.1, "lambda": 1.0, "mu": None, "tau": None,
        "linear_scale": 0.25, "tau_ipo": 0.1, "kto_lambda_w": 1.0, "kto_lambda_l": 1.0,
        "kl_coef": 0.05, "clip_eps": 0.2, "pg_samples": 64, "pg_epochs": 2, "rm_steps": 1000,
    },
    "optimizer": {"lr": 1e-5, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": 64, "steps": 5000},
    "logging": {"eval_every": 250, "eval_samples": 256, "wall_clock": False, "kl_cap": 5.0},
    "eval": {"n": 2000, "temperature": 0.5},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a section")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, user)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_key(cfg, k, v)
    resolve(cfg)
    validate(cfg)
    return cfg


def resolve(cfg: dict) -> None:
    """Fill oracle- and alphabet-dependent defaults in place."""
    psi = REU_PSI if cfg["oracle"]["name"] == "surrogate" else LATTICE_PSI
    if cfg["objective"]["mu"] is None:
        cfg["objective"]["mu"] = psi.mu
    if cfg["objective"]["tau"] is None:
        cfg["objective"]["tau"] = psi.tau
    if cfg["data"]["identity_threshold"] is None:
        cfg["data"]["identity_threshold"] = DEFAULT_IDENTITY.get(cfg["model"]["alphabet"], 1.0)


def _need(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: dict) -> None:
    m, d, o, opt, lg = cfg["model"], cfg["data"], cfg["objective"], cfg["optimizer"], cfg["logging"]
    _need(m["alphabet"] in ("HP2", "AA20"), "model.alphabet", "must be HP2 or AA20")
    _need(isinstance(m["L"], int) and 2 <= m["L"], "model.L", "must be an integer >= 2")
    _need(m["L"] <= cfg["oracle"]["l_max"], "model.L", f"exceeds oracle.l_max={cfg['oracle']['l_max']}")
    _need(m["arch"] in ("ngram", "attn1"), "model.arch", "must be ngram or attn1")
    _need(cfg["oracle"]["name"] in ("lattice", "surrogate"), "oracle.name", "must be lattice or surrogate")
    _need(d["strategy"] in ("max_gap", "random"), "data.strategy", "must be max_gap or random")
    _need(0 < d["q_conf"] < 1, "data.q_conf", "must lie in (0, 1)")
    _need(d["pool_size"] >= 1 and d["pairs"] >= 1, "data.pool_size", "pool_size and pairs must be >= 1")
    _need(0 < d["identity_threshold"] <= 1, "data.identity_threshold", "must lie in (0, 1]")
    _need(len(d["fractions"]) == 3 and abs(sum(d["fractions"]) - 1) < 1e-9,
          "data.fractions", "must be three numbers summing to 1")
    _need(o["name"] in OBJECTIVES, "objective.name", f"must be one of {', '.join(OBJECTIVES)}")
    _need(o["psi"] in PSI_KINDS, "objective.psi", f"must be one of {', '.join(PSI_KINDS)}")
    _need(o["beta"] > 0, "objective.beta", "must be > 0")
    _need(o["tau"] > 0, "objective.tau", "must be > 0")
    _need(o["lambda"] > 0, "objective.lambda", "must be > 0")
    _need(o["tau_ipo"] > 0, "objective.tau_ipo", "must be > 0")
    _need(o["pg_samples"] >= 2, "objective.pg_samples", "must be >= 2")
    _need(opt["lr"] > 0, "optimizer.lr", "must be > 0")
    _need(opt["batch_size"] >= 1, "optimizer.batch_size", "must be >= 1")
    _need(opt["steps"] >= 0, "optimizer.steps", "must be >= 0")
    _need(lg["eval_every"] >= 1, "logging.eval_every", "must be >= 1")
    _need(lg["eval_samples"] >= 1, "logging.eval_samples", "must be >= 1")
    _need(cfg["eval"]["n"] >= 1, "eval.n", "must be >= 1")
    _need(cfg["eval"]["temperature"] > 0, "eval.temperature", "must be > 0")
    _need(cfg["threads"] >= 1, "threads", "must be >= 1")


def train_config(cfg: dict) -> TrainConfig:
    o, opt, lg = cfg["objective"], cfg["optimizer"], cfg["logging"]
    return TrainConfig(
        objective=o["name"], psi=o["psi"], beta=o["beta"], lam=o["lambda"], mu=o["mu"], tau=o["tau"],
        linear_scale=o["linear_scale"], tau_ipo=o["tau_ipo"], kto_lambda_w=o["kto_lambda_w"],
        kto_lambda_l=o["kto_lambda_l"], kl_coef=o["kl_coef"], clip_eps=o["clip_eps"],
        pg_samples=o["pg_samples"], pg_epochs=o["pg_epochs"], rm_steps=o["rm_steps"],
        lr=opt["lr"], adam_beta1=opt["beta1"], adam_beta2=opt["beta2"], adam_eps=opt["eps"],
        batch_size=opt["batch_size"], steps=opt["steps"], eval_every=lg["eval_every"],
        eval_samples=lg["eval_samples"], g_max=cfg["oracle"]["g_max"], seed=cfg["seed"],
        wall_clock=lg["wall_clock"],
    )


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
