"""Paired optimizer benchmarks over shared problem instances, and their file outputs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import DIVERGENCE_THRESHOLD, BaselineConfig, BaselineKind, run_baseline
from .metaopt import LstmWeights, unroll_forward
from .objective import (
    DEFAULT_PARAM_RANGE,
    RNG_NAME,
    LossKind,
    ProblemInstance,
    derive_seed,
    dumps,
    make_rng,
    problem_from_seed,
)
from .spin import DEFAULT_INITIAL_STATES, InitialState, ModelKind, build_model
from .stats import curve_band, log_histogram, summarize
from .trainer import TEST_STREAM

LSTM = "LSTM"
BOOTSTRAP_STREAM = 10


@dataclass(frozen=True)
class OptimizerEntry:
    """One optimizer in a benchmark: ``kind`` is ``"LSTM"`` or a baseline kind."""

    kind: str
    learning_rate: float | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind != LSTM:
            object.__setattr__(self, "kind", BaselineKind(self.kind).value)

    def baseline(self) -> BaselineConfig:
        return BaselineConfig(BaselineKind(self.kind), learning_rate=self.learning_rate)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return LSTM if self.kind == LSTM else self.baseline().label


DEFAULT_OPTIMIZERS = (
    OptimizerEntry(LSTM),
    OptimizerEntry("Adam", 0.03),
    OptimizerEntry("SGD", 0.001),
    OptimizerEntry("LBFGS"),
    OptimizerEntry("NelderMead"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    model_kind: str = "TFIM"
    n_qubits: int = 4
    sigma: float = 0.001
    sigma_in: float = 0.1
    param_range: tuple[float, float] = DEFAULT_PARAM_RANGE
    loss_kind: str = "SquaredError"
    initial_states: tuple[str, ...] = tuple(s.value for s in DEFAULT_INITIAL_STATES)
    n_test_problems: int = 300
    T: int = 100
    optimizers: tuple[OptimizerEntry, ...] = DEFAULT_OPTIMIZERS
    checkpoint: str | None = None
    seed: int = 12345
    n_resamples: int = 1000
    workers: int = 1

    def __post_init__(self):
        if self.n_test_problems < 1:
            raise ValueError("n_test_problems must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        ModelKind(self.model_kind)
        LossKind(self.loss_kind)
        opts = tuple(o if isinstance(o, OptimizerEntry) else OptimizerEntry(**o) for o in self.optimizers)
        labels = [o.label for o in opts]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate optimizer labels {labels}")
        object.__setattr__(self, "optimizers", opts)
        object.__setattr__(self, "param_range", tuple(float(x) for x in self.param_range))
        object.__setattr__(self, "initial_states", tuple(InitialState(s).value for s in self.initial_states))

    @property
    def needs_checkpoint(self) -> bool:
        return any(o.kind == LSTM for o in self.optimizers)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["param_range"] = list(self.param_range)
        d["initial_states"] = list(self.initial_states)
        d["optimizers"] = [{k: v for k, v in vars(o).items() if v is not None} for o in self.optimizers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)

    def problem_kwargs(self) -> dict:
        return {
            "sigma": self.sigma,
            "sigma_in": self.sigma_in,
            "param_range": self.param_range,
            "loss_kind": LossKind(self.loss_kind),
            "initial_states": self.initial_states,
        }


def instance_seeds(seed: int, n: int) -> list[int]:
    return [derive_seed(seed, TEST_STREAM, i) for i in range(n)]


def make_problems(cfg: ExperimentConfig) -> list[ProblemInstance]:
    spec = build_model(cfg.model_kind, cfg.n_qubits)
    return [problem_from_seed(spec, s, **cfg.problem_kwargs()) for s in instance_seeds(cfg.seed, cfg.n_test_problems)]


def manifest(problems, model_kind: str | None = None, n_qubits: int | None = None) -> dict:
    """Instance list plus a hash over everything an optimizer sees."""
    entries = []
    h = hashlib.sha256()
    for i, p in enumerate(problems):
        entries.append(
            {
                "index": i,
                "seed": p.rng_seed,
                "theta_true": p.theta_true.tolist(),
                "theta_init": p.theta_init.tolist(),
            }
        )
        for arr in (p.theta_true, p.theta_init, p.dataset.times, p.dataset.observed):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    first = problems[0]
    return {
        "model_kind": model_kind or first.spec.model_kind.value,
        "n_qubits": n_qubits or first.spec.n_qubits,
        "parameter_labels": first.spec.labels(),
        "rng": RNG_NAME,
        "instances": entries,
        "sha256": h.hexdigest(),
    }


def run_optimizer(entry: OptimizerEntry, problem: ProblemInstance, T: int, weights: LstmWeights | None = None):
    """Trajectory of one optimizer on one problem, with the divergence policy applied."""
    objective = problem.objective()
    if entry.kind == LSTM:
        if weights is None:
            raise ValueError("the LSTM optimizer needs checkpoint weights")
        traj = unroll_forward(
            weights, objective, problem.theta_init, T, keep_tape=False, divergence_threshold=DIVERGENCE_THRESHOLD
        )
        traj.meta["n_value_calls"] = objective.n_value
        traj.meta["n_grad_calls"] = objective.n_grad
        return traj
    return run_baseline(entry.baseline(), objective, problem.theta_init, T)


@dataclass
class InstanceResult:
    index: int
    losses: dict[str, np.ndarray]
    final_theta: dict[str, np.ndarray]
    diverged: dict[str, bool]
    n_grad_calls: dict[str, int]
    n_value_calls: dict[str, int]


def _run_instance(args) -> InstanceResult:
    index, problem, optimizers, T, weights = args
    res = InstanceResult(index, {}, {}, {}, {}, {})
    for entry in optimizers:
        traj = run_optimizer(entry, problem, T, weights)
        res.losses[entry.label] = traj.losses
        res.final_theta[entry.label] = traj.thetas[-1]
        res.diverged[entry.label] = bool(traj.meta.get("diverged", False))
        res.n_grad_calls[entry.label] = int(traj.meta.get("n_grad_calls", 0))
        res.n_value_calls[entry.label] = int(traj.meta.get("n_value_calls", 0))
    return res


@dataclass
class BenchResult:
    config: ExperimentConfig
    problems: list[ProblemInstance]
    instances: list[InstanceResult]
    labels: list[str] = field(default_factory=list)

    def curves(self, label: str) -> np.ndarray:
        return np.array([r.losses[label] for r in self.instances])

    def finals(self, label: str) -> np.ndarray:
        return self.curves(label)[:, -1]

    def delta_theta_sq(self, label: str) -> np.ndarray:
        """``|theta_i - theta*_i|^2`` at the final iterate, shape ``(n_instances, n_params)``."""
        return np.array([(r.final_theta[label] - p.theta_true) ** 2 for r, p in zip(self.instances, self.problems)])


def run_bench(cfg: ExperimentConfig, weights: LstmWeights | None = None, problems=None) -> BenchResult:
    if cfg.needs_checkpoint and weights is None:
        raise ValueError("an LSTM entry needs checkpoint weights")
    problems = make_problems(cfg) if problems is None else list(problems)
    jobs = [(i, p, cfg.optimizers, cfg.T, weights) for i, p in enumerate(problems)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_instance, jobs, chunksize=4))
    else:
        results = [_run_instance(j) for j in jobs]
    results.sort(key=lambda r: r.index)
    return BenchResult(cfg, problems, results, [o.label for o in cfg.optimizers])


def eval_stats(result: BenchResult) -> dict:
    """Per-optimizer summary: final-loss statistics, bootstrap CI, histogram, parameter deviations."""
    cfg = result.config
    out = {}
    for k, label in enumerate(result.labels):
        finals = result.finals(label)
        curves = result.curves(label)
        rng = make_rng(derive_seed(cfg.seed, BOOTSTRAP_STREAM, k))
        lo, hi = curve_band(curves, cfg.n_resamples, 0.95, rng) if len(finals) > 1 else (curves[0], curves[0])
        summary = summarize(finals)
        summary["mean_ci95"] = [float(lo[-1]), float(hi[-1])]
        summary["mean_initial"] = float(curves[:, 0].mean())
        summary["n_diverged"] = int(sum(r.diverged[label] for r in result.instances))
        summary["mean_grad_calls"] = float(np.mean([r.n_grad_calls[label] for r in result.instances]))
        summary["mean_value_calls"] = float(np.mean([r.n_value_calls[label] for r in result.instances]))
        summary["delta_theta_sq_mean"] = result.delta_theta_sq(label).mean(axis=0).tolist()
        summary["histogram"] = log_histogram(finals)
        out[label] = {"summary": summary, "curve_ci": (lo, hi)}
    return out


def _fmt(x) -> str:
    return repr(float(x))


def write_bench(result: BenchResult, stats: dict, out_dir) -> dict[str, Path]:
    """Write curves, final losses, parameter deviations, summary and manifest; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["optimizer", "iteration", "mean_f", "ci95_lo", "ci95_hi", "mean_log10_f"])
    for label in result.labels:
        curves = result.curves(label)
        lo, hi = stats[label]["curve_ci"]
        mean = curves.mean(axis=0)
        with np.errstate(divide="ignore"):
            mlog = np.log10(curves).mean(axis=0)
        for it in range(curves.shape[1]):
            w.writerow([label, it, _fmt(mean[it]), _fmt(lo[it]), _fmt(hi[it]), _fmt(mlog[it])])
    paths["curves"] = out / "curves.csv"
    paths["curves"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["optimizer", "instance", "seed", "final_f", "diverged"])
    for label in result.labels:
        for r, p in zip(result.instances, result.problems):
            w.writerow([label, r.index, p.rng_seed, _fmt(r.losses[label][-1]), int(r.diverged[label])])
    paths["final_losses"] = out / "final_losses.csv"
    paths["final_losses"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["optimizer", "param_index", "param_label", "mean_delta_theta_sq"])
    plabels = result.problems[0].spec.labels()
    for label in result.labels:
        for i, v in enumerate(stats[label]["summary"]["delta_theta_sq_mean"]):
            w.writerow([label, i, plabels[i], _fmt(v)])
    paths["delta_theta"] = out / "delta_theta.csv"
    paths["delta_theta"].write_text(buf.getvalue())

    summary = {label: stats[label]["summary"] for label in result.labels}
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(dumps({"optimizers": summary, "labels": result.labels}))

    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(dumps(manifest(result.problems)))
    return paths


def read_final_losses(path) -> dict[str, np.ndarray]:
    """Parse ``final_losses.csv`` back into per-optimizer arrays (instance order)."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["optimizer"], []).append((int(row["instance"]), float(row["final_f"])))
    return {k: np.array([v for _, v in sorted(rs)]) for k, rs in rows.items()}


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
