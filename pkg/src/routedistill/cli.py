"""``routedistill`` command line.

Every subcommand reads an optional flat TOML file (``--config``), lets
``--seed`` and ``--out`` override it, rejects unknown keys and writes the
effective configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli

from . import __version__
from .bench import GapReport, evaluate, load_benchmark, write_gap_table, PUBLISHED_OPTIMA, _write_rows
from .distill import ABLATIONS, DistillConfig, ablation_config, distill
from .instancegen import ALL_KINDS, DistributionKind, DistributionSpec, InstanceRecord, make_dataset, read_instances, write_instances
from .policy import ArchSpec, DECODE_MODES, load_checkpoint
from .problems import ProblemKind, Tour
from .solvers import ReferenceCache, solve_reference
from .training import TrainConfig, train_teacher

log = logging.getLogger("routedistill")

OUT_ENV = "ROUTEDISTILL_OUT"

DEFAULTS = {
    "generate": {
        "problem": "tsp",
        "distribution": "uniform",
        "n": 20,
        "count": 100,
        "seed": 0,
        "out_dir": "out/generate",
    },
    "solve": {
        "instances": "out/generate/instances.jsonl",
        "cache": "out/references.jsonl",
        "seed": 0,
        "out_dir": "out/solve",
    },
    "train-teacher": {
        "problem": "tsp",
        "distribution": "uniform",
        "n": 20,
        "embed_dim": 32,
        "n_heads": 4,
        "n_encoder_layers": 2,
        "epochs": 10,
        "steps_per_epoch": 20,
        "batch_size": 64,
        "learning_rate": 1e-4,
        "baseline_mode": "shared_multistart",
        "seed": 0,
        "out_dir": "out/teacher",
    },
    "distill": {
        "problem": "tsp",
        "n": 20,
        "exemplars": ["uniform", "cluster", "mixed"],
        "teachers": [],
        "student_dim": 0,
        "alpha": 0.5,
        "epochs": 10,
        "adaptive_start": 1,
        "steps_per_epoch": 20,
        "batch_size": 64,
        "learning_rate": 1e-4,
        "validation_size": 1000,
        "validation_seed": 12345,
        "validation_decode": "greedy_aug8",
        "trajectory_source": "on_policy",
        "teacher_mode": "single_selected",
        "freeze_probs": False,
        "cache": "",
        "seed": 0,
        "out_dir": "out/distill",
    },
    "evaluate": {
        "problem": "tsp",
        "checkpoints": [],
        "labels": [],
        "distributions": [k.value for k in ALL_KINDS],
        "n": 20,
        "count": 100,
        "data_seed": 999,
        "instances": "",
        "benchmarks": [],
        "decode": "greedy_aug8",
        "samples": 1280,
        "cache": "",
        "seed": 0,
        "out_dir": "out/evaluate",
    },
    "parse-bench": {
        "path": "",
        "seed": 0,
        "out_dir": "out/bench",
    },
}
DEFAULTS["ablate"] = dict(DEFAULTS["distill"], switch="no_adaptive", out_dir="out/ablate")


class CliError(Exception):
    pass


def load_config(command: str, path: Optional[str], seed: Optional[int], out: Optional[str]) -> dict:
    cfg = dict(DEFAULTS[command])
    if path:
        with open(path, "rb") as fh:
            user = tomli.load(fh)
        unknown = sorted(set(user) - set(cfg))
        if unknown:
            raise CliError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in user.items():
            if isinstance(cfg[k], bool) != isinstance(v, bool) and cfg[k] is not None:
                raise CliError(f"config key {k} expects {type(cfg[k]).__name__}")
            cfg[k] = v
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        cfg["out_dir"] = env_out
    if out:
        cfg["out_dir"] = out
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "effective_config.json", "w") as fh:
        json.dump({"command": command, "version": __version__, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _sidecar(out: Path, started: float, **extra):
    # timestamps live here so the main outputs stay byte-identical across runs
    meta = {"started": started, "elapsed_s": time.time() - started, **extra}
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg, out: Path) -> dict:
    kind = DistributionKind(cfg["distribution"])
    data = make_dataset(cfg["problem"], DistributionSpec(kind), int(cfg["n"]), int(cfg["count"]), int(cfg["seed"]))
    path = out / "instances.jsonl"
    write_instances(path, (InstanceRecord(inst, kind.value, int(cfg["n"]), int(cfg["seed"]), i) for i, inst in enumerate(data)))
    return {"instances": str(path), "sha256": file_hash(path)}


def cmd_solve(cfg, out: Path) -> dict:
    cache = ReferenceCache(cfg["cache"]) if cfg["cache"] else ReferenceCache()
    if cfg["cache"]:
        Path(cfg["cache"]).parent.mkdir(parents=True, exist_ok=True)
    path = out / "solutions.jsonl"
    n_exact = 0
    with open(path, "w") as fh:
        for rec in read_instances(cfg["instances"]):
            entry = cache.lookup_or_solve(rec.instance, int(cfg["seed"]))
            n_exact += bool(entry["is_exact"])
            tour = Tour(tuple(entry["sequence"]), float(entry["length"]))
            fh.write(tour.to_json({"key": rec.instance.fingerprint(), "index": rec.index}) + "\n")
    return {"solutions": str(path), "sha256": file_hash(path), "exact": n_exact}


def cmd_train_teacher(cfg, out: Path) -> dict:
    problem = ProblemKind(cfg["problem"])
    arch = ArchSpec(
        embed_dim=int(cfg["embed_dim"]),
        n_heads=int(cfg["n_heads"]),
        n_encoder_layers=int(cfg["n_encoder_layers"]),
        problem_kind=problem,
    )
    tc = TrainConfig(
        problem=problem,
        n=int(cfg["n"]),
        distribution=DistributionSpec(DistributionKind(cfg["distribution"])),
        arch=arch,
        epochs=int(cfg["epochs"]),
        steps_per_epoch=int(cfg["steps_per_epoch"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        baseline_mode=cfg["baseline_mode"],
        seed=int(cfg["seed"]),
    )
    train_teacher(tc, out)
    return {"checkpoint": str(out / "final.ckpt"), "sha256": file_hash(out / "final.ckpt")}


def _distill_config(cfg) -> DistillConfig:
    exemplars = [DistributionKind(k) for k in cfg["exemplars"]]
    if len(cfg["teachers"]) != len(exemplars):
        raise CliError("teachers must list one checkpoint per exemplar")
    student_arch = None
    if int(cfg["student_dim"]):
        first = load_checkpoint(cfg["teachers"][0])[0].arch
        student_arch = ArchSpec(
            embed_dim=int(cfg["student_dim"]),
            n_heads=first.n_heads,
            n_encoder_layers=first.n_encoder_layers,
            problem_kind=first.problem_kind,
        )
    return DistillConfig(
        problem=cfg["problem"],
        n=int(cfg["n"]),
        exemplars=tuple(exemplars),
        teachers={k: p for k, p in zip(exemplars, cfg["teachers"])},
        student_arch=student_arch,
        alpha=float(cfg["alpha"]),
        epochs=int(cfg["epochs"]),
        adaptive_start=int(cfg["adaptive_start"]),
        steps_per_epoch=int(cfg["steps_per_epoch"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        validation_size=int(cfg["validation_size"]),
        validation_seed=int(cfg["validation_seed"]),
        validation_decode=cfg["validation_decode"],
        trajectory_source=cfg["trajectory_source"],
        teacher_mode=cfg["teacher_mode"],
        freeze_probs=bool(cfg["freeze_probs"]),
        seed=int(cfg["seed"]),
    )


def cmd_distill(cfg, out: Path) -> dict:
    dc = _distill_config(cfg)
    if "switch" in cfg:
        dc = ablation_config(dc, cfg["switch"])
    cache = ReferenceCache(cfg["cache"]) if cfg["cache"] else None
    distill(dc, out_dir=out, cache=cache)
    return {
        "log": str(out / "distill_log.csv"),
        "sha256": file_hash(out / "distill_log.csv"),
        "checkpoint_sha256": file_hash(out / "student.ckpt"),
    }


def cmd_evaluate(cfg, out: Path) -> dict:
    if not cfg["checkpoints"]:
        raise CliError("evaluate needs at least one checkpoint")
    if cfg["decode"] not in DECODE_MODES:
        raise CliError(f"decode must be one of {', '.join(DECODE_MODES)}")
    labels = cfg["labels"] or [Path(p).stem for p in cfg["checkpoints"]]
    if len(labels) != len(cfg["checkpoints"]):
        raise CliError("labels must match checkpoints")
    cache = ReferenceCache(cfg["cache"]) if cfg["cache"] else None
    sources = {}
    if cfg["benchmarks"]:
        for path in cfg["benchmarks"]:
            b = load_benchmark(path)
            ref = PUBLISHED_OPTIMA.get(b.name)
            sources[b.name] = ([b.to_instance(normalize=False)], [ref], lambda i, seq, b=b: b.rounded_length(seq))
    elif cfg["instances"]:
        recs = list(read_instances(cfg["instances"]))
        by_kind: dict = {}
        for r in recs:
            by_kind.setdefault(r.kind, []).append(r.instance)
        for kind, insts in by_kind.items():
            sources[kind] = (insts, [_reference(cache, i) for i in insts])
    else:
        for k, kind in enumerate(cfg["distributions"]):
            insts = make_dataset(cfg["problem"], DistributionSpec(DistributionKind(kind)), int(cfg["n"]), int(cfg["count"]), int(cfg["data_seed"]) + 1000 * k)
            refs = [(cache.lookup_or_solve(i) if cache else {"length": solve_reference(i).length})["length"] for i in insts]
            sources[kind] = (insts, refs)
    reports: dict[str, GapReport] = {}
    summary = []
    for label, ckpt in zip(labels, cfg["checkpoints"]):
        params = load_checkpoint(ckpt)[0]
        rng = np.random.default_rng([int(cfg["seed"]), 21])
        rep = evaluate(params, sources, cfg["decode"], rng, int(cfg["samples"]), out / f"instances_{label}.csv")
        reports[label] = rep
        for name, g in rep.gaps.items():
            summary.append({"model": label, "source": name, "count": rep.counts[name], "gap": g})
        summary.append({"model": label, "source": "overall", "count": sum(rep.counts.values()), "gap": rep.overall})
    _write_rows(out / "gaps.csv", summary, ["model", "source", "count", "gap"])
    write_gap_table(out / "gap_table.csv", reports)
    return {"gaps": str(out / "gaps.csv"), "sha256": file_hash(out / "gaps.csv")}


def _reference(cache, inst):
    if cache is None:
        return None
    entry = cache.get(inst)
    return None if entry is None else entry["length"]


def cmd_parse_bench(cfg, out: Path) -> dict:
    if not cfg["path"]:
        raise CliError("parse-bench needs path")
    b = load_benchmark(cfg["path"])
    info = {
        "name": b.name,
        "kind": b.kind.value,
        "dimension": b.dimension,
        "capacity": b.capacity,
        "min_routes": b.min_routes,
        "published": PUBLISHED_OPTIMA.get(b.name),
    }
    with open(out / "benchmark.json", "w") as fh:
        json.dump(info, fh, indent=2)
        fh.write("\n")
    return info


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "ablate": cmd_distill,
    "evaluate": cmd_evaluate,
    "parse-bench": cmd_parse_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routedistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat TOML file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (overrides config)")
        if name == "ablate":
            sp.add_argument("--switch", choices=ABLATIONS)
    return p


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.command, args.config, args.seed, args.out)
        if getattr(args, "switch", None):
            cfg["switch"] = args.switch
        out = _prepare_out(cfg, args.command)
        result = COMMANDS[args.command](cfg, out)
        _sidecar(out, started, **result)
    except Exception as exc:  # single machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
