"""``physiopref`` command line: dataset construction, training, evaluation, sweeps."""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, load_config
from .evaluation import (append_results, energy_confidence_plane, format_report, write_plane)
from .numerics import NumericError, seeded_rng
from .oracle import CapabilityError, fold
from .pipeline import (build_dataset, oracle_from, run_eval, run_training, summary_counts)
from .policy import PolicyModel
from .prefdata import (DatasetFormatError, DegenerateSplitError, EmptyDatasetError, load_dataset,
                       save_dataset)
from .seqcore import UsageError
from .trainer import OBJECTIVES, PSI_KINDS

log = logging.getLogger("physiopref")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_HEADER = ["param", "value", "energy_per_res", "foldability", "ppl", "kl"]
DATASET_FILE, REFERENCE_FILE = "dataset.jsonl", "reference.ckpt"
STREAM_PLANE = 21


class RefusedError(UsageError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run record, written before work starts and completed when it ends."""

    def __init__(self, out: Path, command: str, cfg: dict):
        self.path = out / f"manifest-{command}.json"
        self.data = {"command": command, "version": __version__, "seed": cfg["seed"], "config": cfg,
                     "artifacts": [], "started": _now(), "finished": None}
        self._write()

    def add(self, *paths) -> None:
        self.data["artifacts"].extend(str(p) for p in paths)

    def finish(self) -> None:
        self.data["finished"] = _now()
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _guard(force: bool, *paths: Path) -> None:
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise RefusedError(f"refusing to overwrite {', '.join(taken)} (pass --force)")
    for p in paths:
        if p.exists():
            p.unlink()


def _resolve(args) -> dict:
    over = {
        "seed": args.seed,
        "threads": args.threads,
        "objective.name": getattr(args, "objective", None),
        "objective.psi": getattr(args, "psi", None),
        "oracle.name": getattr(args, "oracle", None),
    }
    return load_config(args.config, over)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(data_dir: Path):
    ds, rf = data_dir / DATASET_FILE, data_dir / REFERENCE_FILE
    for p in (ds, rf):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}; run gen-data first")
    return load_dataset(ds), PolicyModel.load(rf, frozen=True)


# -- commands ------------------------------------------------------------------

def cmd_oracle(args) -> int:
    cfg = _resolve(args)
    oracle = oracle_from(cfg, os.environ.get("PHYSIOPREF_CACHE"))
    r = fold(args.seq, oracle)
    print(f"{args.seq},{r.e_min},{r.g},{r.n_conf},{r.e_per_res!r}")
    return EXIT_OK


def gen_data(cfg: dict, out: Path, force: bool = False) -> dict:
    ds, rf = out / DATASET_FILE, out / REFERENCE_FILE
    _guard(force, ds, rf)
    man = Manifest(out, "gen-data", cfg)
    oracle = oracle_from(cfg, os.environ.get("PHYSIOPREF_CACHE"))
    build = build_dataset(cfg, oracle)
    build.ref.save(rf)
    save_dataset(build.split, ds)
    man.add(ds, rf)
    man.finish()
    counts = summary_counts(build)
    print("pool {pool}: stable {stable}, unstable {unstable}, hard_negative {hard_negative}; "
          "pairs train {train}, val {val}, test {test}; mean delta_e {mean_delta_e:.3f}".format(**counts))
    return counts


def cmd_gen_data(args) -> int:
    gen_data(_resolve(args), _out(args), args.force)
    return EXIT_OK


def train_one(cfg: dict, out: Path, data_dir: Path, force: bool = False, tag: str | None = None):
    name = tag or cfg["objective"]["name"]
    ck, lg = out / f"{name}.ckpt", out / f"{name}_log.csv"
    _guard(force, ck, lg)
    split, ref = _load_inputs(data_dir)
    man = Manifest(out, f"train-{name}", cfg)
    oracle = oracle_from(cfg, os.environ.get("PHYSIOPREF_CACHE"))
    policy, tlog = run_training(cfg, ref, split, oracle, log_path=lg)
    policy.save(ck)
    man.add(ck, lg)
    man.finish()
    last = tlog.rows[-1] if tlog.rows else None
    if last:
        print(f"{name}: step {last['step']} loss {last['loss']:.4f} energy/res {last['energy_per_res']:.4f} "
              f"KL {last['kl']:.4f} foldability {last['foldability']:.3f}")
    return policy, ref, split


def cmd_train(args) -> int:
    out = _out(args)
    train_one(_resolve(args), out, Path(args.data or out), args.force)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    split, ref = _load_inputs(Path(args.data or out))
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    policy = PolicyModel.load(ck, frozen=True)
    method = args.method or ck.stem
    oracle = oracle_from(cfg, os.environ.get("PHYSIOPREF_CACHE"))
    rep = run_eval(cfg, policy, ref, split, oracle)
    print(format_report(method, rep))
    append_results(out / "results.csv", method, cfg["seed"], rep)
    if args.plane:
        # axes always come from the reference so planes of different methods line up
        _, _, axes = energy_confidence_plane(ref, oracle, cfg["eval"]["n"], seeded_rng(cfg["seed"], STREAM_PLANE))
        rows, counts, _ = energy_confidence_plane(policy, oracle, cfg["eval"]["n"],
                                                  seeded_rng(cfg["seed"], STREAM_PLANE), axes)
        write_plane(args.plane, rows)
        print("plane " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _grid(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError("--grid is empty")
    return vals


def cmd_sweep(args) -> int:
    base = _resolve(args)
    out = _out(args)
    data_dir = Path(args.data or out)
    path = out / "sweep.csv"
    _guard(args.force, path)
    grid = _grid(args.grid)
    split, ref = _load_inputs(data_dir)
    man = Manifest(out, f"sweep-{args.param}", base)
    key = {"beta": "beta", "mu": "mu"}[args.param]
    oracle = oracle_from(base, os.environ.get("PHYSIOPREF_CACHE"))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for v in grid:
            cfg = copy.deepcopy(base)
            cfg["objective"][key] = v
            try:
                policy, _ = run_training(cfg, ref, split, oracle)
                rep = run_eval(cfg, policy, ref, split, oracle)
            except (NumericError, UsageError) as exc:
                log.error("sweep point %s=%r failed: %s", args.param, v, exc)
                w.writerow([args.param, repr(v), "nan", "nan", "nan", "nan"])
                continue
            w.writerow([args.param, repr(v), repr(rep.energy_per_res), repr(rep.foldability),
                        repr(rep.ppl), repr(rep.kl)])
            fh.flush()
            print(f"{args.param}={v}: energy/res {rep.energy_per_res:.4f} foldability {rep.foldability:.3f} "
                  f"ppl {rep.ppl:.4f} KL {rep.kl:.4f}")
    man.add(path)
    man.finish()
    return EXIT_OK


TABLE1_ROWS = ("sft", "dpo", "ipo", "kto", "pg", "physio", "physio-linear")


def cmd_repro_table1(args) -> int:
    base = _resolve(args)
    out = _out(args)
    results = out / "results.csv"
    _guard(args.force, results)
    gen_data(base, out, args.force)
    split, ref = _load_inputs(out)
    oracle = oracle_from(base, os.environ.get("PHYSIOPREF_CACHE"))
    rep = run_eval(base, ref, ref, split, oracle)
    append_results(results, "reference", base["seed"], rep)
    lines = [format_report("reference", rep)]
    for name in TABLE1_ROWS:
        cfg = copy.deepcopy(base)
        cfg["objective"]["name"] = name
        policy, _, _ = train_one(cfg, out, out, args.force)
        rep = run_eval(cfg, policy, ref, split, oracle)
        append_results(results, name, cfg["seed"], rep)
        lines.append(format_report(name, rep))
    print("\n".join(lines))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives bit-reproducible runs")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--oracle", choices=("lattice", "surrogate"))
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--objective", help=f"one of {', '.join(OBJECTIVES)}")
    train_opts.add_argument("--psi", help=f"one of {', '.join(PSI_KINDS)}")
    train_opts.add_argument("--data", help="directory holding dataset.jsonl and reference.ckpt (default: --out)")

    p = argparse.ArgumentParser(prog="physiopref", description=__doc__)
    p.add_argument("--version", action="version", version=f"physiopref {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("oracle", parents=[common], help="fold one sequence exactly")
    s.add_argument("--seq", required=True)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("gen-data", parents=[common], help="build the preference dataset")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common, train_opts], help="train one objective")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, train_opts], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--method", help="row label in results.csv (default: checkpoint name)")
    s.add_argument("--plane", help="also write the energy/confidence plane to this CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, train_opts], help="sweep beta or mu")
    s.add_argument("--param", choices=("beta", "mu"), required=True)
    s.add_argument("--grid", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("repro-table1", parents=[common, train_opts],
                       help="dataset, every objective and a comparison table in one go")
    s.set_defaults(func=cmd_repro_table1)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else None
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigError, UsageError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, EmptyDatasetError, DegenerateSplitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
