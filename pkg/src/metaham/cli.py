"""Command-line entry point: ``metaham {gen,train,bench,sweep}``.

Every command reads an optional TOML config (the table named after the
command, or the root table when that table is absent), takes ``--seed`` and
``--out``, and writes a ``config_echo.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import bench
from .baselines import BaselineKind, sweep_learning_rates
from .metaopt import load_checkpoint, load_checkpoint_document
from .objective import RNG_NAME, dataset_to_json, derive_seed, dumps, problem_from_seed
from .spin import build_model
from .trainer import TrainConfig, TrainerState, meta_train

log = logging.getLogger("metaham")

SWEEP_STREAM = 4
DEFAULT_SWEEP_RATES = (0.001, 0.003, 0.01, 0.03, 0.1)


class CliError(Exception):
    pass


def read_config(path, section: str) -> dict:
    if path is None:
        return {}
    try:
        doc = tomllib.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    if section in doc:
        return dict(doc[section])
    return {k: v for k, v in doc.items() if not isinstance(v, dict) or k == "metaopt"}


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CliError(f"output directory {out} is not writable: {e}") from e
    return out


def _echo(out: Path, command: str, config: dict, **extra) -> None:
    doc = {"command": command, "config": config, "rng": RNG_NAME} | extra
    (out / "config_echo.json").write_text(dumps(doc))


def _experiment(raw: dict, args) -> bench.ExperimentConfig:
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        raw["n_test_problems"] = args.n
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    if getattr(args, "checkpoint", None) is not None:
        raw["checkpoint"] = args.checkpoint
    return bench.ExperimentConfig.from_dict(raw)


def cmd_gen(args) -> None:
    raw = read_config(args.config, "gen")
    raw.pop("optimizers", None)
    raw.pop("checkpoint", None)
    cfg = _experiment(raw, args)
    out = _prepare_out(args.out)
    problems = bench.make_problems(cfg)
    data_dir = out / "datasets"
    data_dir.mkdir(exist_ok=True)
    width = max(4, len(str(len(problems) - 1)))
    for i, p in enumerate(problems):
        (data_dir / f"instance_{i:0{width}d}.json").write_text(dumps(dataset_to_json(p)))
    (out / "manifest.json").write_text(dumps(bench.manifest(problems)))
    _echo(out, "gen", cfg.to_dict())


def cmd_train(args) -> None:
    raw = read_config(args.config, "train")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    cfg = TrainConfig.from_dict(raw)
    out = _prepare_out(args.out)
    resume = None
    if args.resume:
        doc = load_checkpoint_document(Path(args.resume).read_text())
        if "trainer_state" not in doc:
            raise CliError(f"{args.resume} has no trainer state; pass the last.json of a previous run")
        weights, _ = load_checkpoint(Path(args.resume).read_text())
        resume = TrainerState.from_json(weights, doc["trainer_state"])
    result = meta_train(cfg, resume=resume)
    (out / "checkpoint.json").write_text(json.dumps(result.checkpoint(), indent=1, sort_keys=True))
    (out / "last.json").write_text(json.dumps(result.last_checkpoint(), indent=1, sort_keys=True))
    (out / "train_log.csv").write_text(result.log.to_csv())
    _echo(out, "train", cfg.to_dict())


def _best_rates(paths) -> dict[str, float]:
    rates = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("sweep_*.json")) if p.is_dir() else [p]
        if not files:
            raise CliError(f"no sweep results found in {p}")
        for f in files:
            doc = json.loads(f.read_text())
            rates[BaselineKind(doc["kind"]).value] = float(doc["best_learning_rate"])
    return rates


def cmd_bench(args) -> None:
    raw = read_config(args.config, "bench")
    cfg = _experiment(raw, args)
    if args.use_best_eta:
        rates = _best_rates(args.use_best_eta)
        opts = tuple(replace(o, learning_rate=rates[o.kind]) if o.kind in rates else o for o in cfg.optimizers)
        cfg = replace(cfg, optimizers=opts)
    weights = None
    if cfg.needs_checkpoint:
        if cfg.checkpoint is None:
            raise CliError("the optimizer list contains LSTM but no checkpoint was given")
        try:
            text = Path(cfg.checkpoint).read_text()
        except OSError as e:
            raise CliError(f"cannot read checkpoint {cfg.checkpoint}: {e}") from e
        weights, _ = load_checkpoint(text)
    out = _prepare_out(args.out)
    result = bench.run_bench(cfg, weights)
    stats = bench.eval_stats(result)
    bench.write_bench(result, stats, out)
    _echo(out, "bench", cfg.to_dict())


def cmd_sweep(args) -> None:
    raw = read_config(args.config, "sweep")
    kind = BaselineKind(args.kind or raw.pop("kind", "Adam"))
    raw.pop("kind", None)
    rates = args.learning_rates or raw.pop("learning_rates", list(DEFAULT_SWEEP_RATES))
    raw.pop("learning_rates", None)
    raw.pop("optimizers", None)
    raw.pop("checkpoint", None)
    cfg = _experiment(raw, args)
    out = _prepare_out(args.out)
    spec = build_model(cfg.model_kind, cfg.n_qubits)
    problems = [
        problem_from_seed(spec, derive_seed(cfg.seed, SWEEP_STREAM, i), **cfg.problem_kwargs())
        for i in range(cfg.n_test_problems)
    ]
    rows, best = sweep_learning_rates(kind, rates, problems, cfg.T)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["learning_rate", "mean_final_f", "std_final_f", "median_final_f", "n_diverged", "flagged"])
    for r in rows:
        w.writerow([repr(r.learning_rate), repr(r.mean_final), repr(r.std_final), repr(r.median_final), r.n_diverged, int(r.flagged)])
    (out / f"sweep_{kind.value}.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["learning_rate", "iteration", "mean_f"])
    for r in rows:
        for it, v in enumerate(r.mean_curve):
            w.writerow([repr(r.learning_rate), it, repr(float(v))])
    (out / f"sweep_{kind.value}_curves.csv").write_text(buf.getvalue())

    ranking = [r.learning_rate for r in sorted(rows, key=lambda r: r.mean_final)]
    doc = {"kind": kind.value, "best_learning_rate": best, "ranking": ranking}
    (out / f"sweep_{kind.value}.json").write_text(dumps(doc))
    _echo(out, "sweep", cfg.to_dict() | {"kind": kind.value, "learning_rates": list(rates)})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaham", description="LSTM meta-optimizer for Hamiltonian learning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate datasets and an instance manifest")
    common(p)
    p.add_argument("-n", type=int, help="number of instances")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="meta-train the LSTM optimizer")
    common(p)
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--resume", help="last.json of a previous run to continue")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="benchmark optimizers on shared instances")
    common(p)
    p.add_argument("-n", type=int, help="number of test instances")
    p.add_argument("--checkpoint", help="LSTM checkpoint (overrides the config)")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--use-best-eta", nargs="+", metavar="SWEEP", help="sweep output dirs or sweep_*.json files")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="learning-rate sweep for SGD or Adam")
    common(p)
    p.add_argument("-n", type=int, help="number of sweep instances")
    p.add_argument("--kind", help="SGD or Adam")
    p.add_argument("--learning-rates", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as e:  # reported as JSON for scripting
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
