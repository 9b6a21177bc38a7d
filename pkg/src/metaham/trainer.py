"""Meta-training loop for the LSTM optimizer."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .metaopt import (
    LstmWeights,
    MetaOptConfig,
    NonFiniteError,
    checkpoint_document,
    init_weights,
    unroll_backward,
    unroll_forward,
)
from .objective import (
    DEFAULT_PARAM_RANGE,
    RNG_NAME,
    LossKind,
    ProblemInstance,
    derive_seed,
    make_rng,
    problem_from_seed,
)
from .spin import ModelKind, build_model

log = logging.getLogger(__name__)

# seed streams
TRAIN_STREAM = 0
VALIDATION_STREAM = 1
INIT_STREAM = 2
TEST_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10_000
    T: int = 100
    sigma: float = 0.001
    sigma_in: float = 0.1
    param_range: tuple[float, float] = DEFAULT_PARAM_RANGE
    model_kind: str = "TFIM"
    n_qubits: int = 4
    loss_kind: str = "SquaredError"
    validate_every: int = 100
    n_validation_problems: int = 32
    meta_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    truncation: int | None = None
    seed: int = 0
    metaopt: MetaOptConfig = field(default_factory=MetaOptConfig)

    def __post_init__(self):
        for name in ("epochs", "T", "validate_every", "n_validation_problems"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0 or self.sigma_in < 0:
            raise ValueError("sigma and sigma_in must be >= 0")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError("truncation must be positive")
        if isinstance(self.metaopt, dict):
            object.__setattr__(self, "metaopt", MetaOptConfig.from_dict(self.metaopt))
        object.__setattr__(self, "param_range", tuple(float(x) for x in self.param_range))
        object.__setattr__(self, "betas", tuple(float(x) for x in self.betas))
        ModelKind(self.model_kind)
        LossKind(self.loss_kind)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["param_range"] = list(self.param_range)
        d["betas"] = list(self.betas)
        d["metaopt"] = self.metaopt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def spec(self):
        return build_model(self.model_kind, self.n_qubits)

    def problem_kwargs(self) -> dict:
        return {
            "sigma": self.sigma,
            "sigma_in": self.sigma_in,
            "param_range": self.param_range,
            "loss_kind": LossKind(self.loss_kind),
        }


def training_seed(config: TrainConfig, epoch: int) -> int:
    return derive_seed(config.seed, TRAIN_STREAM, epoch)


def validation_seeds(config: TrainConfig) -> list[int]:
    return [derive_seed(config.seed + 1, VALIDATION_STREAM, i) for i in range(config.n_validation_problems)]


def validation_problems(config: TrainConfig) -> list[ProblemInstance]:
    spec = config.spec()
    return [problem_from_seed(spec, s, **config.problem_kwargs()) for s in validation_seeds(config)]


@dataclass(frozen=True)
class ValidationSummary:
    mean_final: float
    mean_trajectory: float


def validate(weights: LstmWeights, problems, T: int) -> ValidationSummary:
    """Means over problems of ``f(theta_T)`` and of ``sum_{k=1..T} f(theta_k) / T``."""
    problems = list(problems)
    if not problems:
        raise ValueError("validation needs at least one problem")
    finals, avgs = [], []
    for p in problems:
        traj = unroll_forward(weights, p.objective(), p.theta_init, T, keep_tape=False)
        finals.append(traj.final_loss)
        avgs.append(traj.meta_loss() / T)
    return ValidationSummary(float(np.mean(finals)), float(np.mean(avgs)))


@dataclass
class EpochRecord:
    epoch: int
    meta_loss: float
    grad_norm: float
    clipped: bool
    val_mean_final_f: float | None = None
    val_mean_traj_f: float | None = None
    wall_seconds: float = 0.0


CSV_COLUMNS = ["epoch", "meta_loss", "grad_norm", "clipped_flag", "val_mean_final_f", "val_mean_traj_f"]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_validation: ValidationSummary | None = None
    best_epoch: int = 0
    best_score: float = float("inf")
    nonfinite_epochs: list[int] = field(default_factory=list)

    @property
    def n_clipped(self) -> int:
        return sum(r.clipped for r in self.records)

    def validation_scores(self) -> dict[int, float]:
        out = {0: self.initial_validation.mean_final} if self.initial_validation else {}
        out.update({r.epoch: r.val_mean_final_f for r in self.records if r.val_mean_final_f is not None})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        if self.initial_validation is not None:
            v = self.initial_validation
            w.writerow([0, "", "", 0, repr(v.mean_final), repr(v.mean_trajectory)])
        for r in self.records:
            w.writerow(
                [
                    r.epoch,
                    repr(r.meta_loss),
                    repr(r.grad_norm),
                    int(r.clipped),
                    "" if r.val_mean_final_f is None else repr(r.val_mean_final_f),
                    "" if r.val_mean_traj_f is None else repr(r.val_mean_traj_f),
                ]
            )
        return buf.getvalue()


@dataclass
class TrainerState:
    """Everything needed to continue a run exactly where it stopped."""

    weights: LstmWeights
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    epoch: int
    best_weights: LstmWeights
    log: TrainLog

    def to_json(self) -> dict:
        return {
            "adam_m": self.adam_m.tolist(),
            "adam_v": self.adam_v.tolist(),
            "step": self.step,
            "epoch": self.epoch,
            "best_weights": self.best_weights.to_vector().tolist(),
            "log": {
                "records": [asdict(r) | {"wall_seconds": 0.0} for r in self.log.records],
                "initial_validation": asdict(self.log.initial_validation) if self.log.initial_validation else None,
                "best_epoch": self.log.best_epoch,
                "best_score": self.log.best_score,
                "nonfinite_epochs": self.log.nonfinite_epochs,
            },
        }

    @classmethod
    def from_json(cls, weights: LstmWeights, d: dict) -> "TrainerState":
        lg = d["log"]
        tlog = TrainLog(
            [EpochRecord(**r) for r in lg["records"]],
            ValidationSummary(**lg["initial_validation"]) if lg["initial_validation"] else None,
            lg["best_epoch"],
            lg["best_score"],
            list(lg["nonfinite_epochs"]),
        )
        return cls(
            weights,
            np.array(d["adam_m"], dtype=float),
            np.array(d["adam_v"], dtype=float),
            int(d["step"]),
            int(d["epoch"]),
            weights.with_vector(d["best_weights"]),
            tlog,
        )


@dataclass
class TrainResult:
    best_weights: LstmWeights
    log: TrainLog
    state: TrainerState
    config: TrainConfig
    validation_seeds: list[int]
    training_seeds: list[int]

    def metadata(self) -> dict:
        return {
            "seed": self.config.seed,
            "epochs": self.state.epoch,
            "best_epoch": self.log.best_epoch,
            "best_validation_score": self.log.best_score,
            "initial_validation_score": self.log.initial_validation.mean_final,
            "n_clipped_epochs": self.log.n_clipped,
            "nonfinite_epochs": list(self.log.nonfinite_epochs),
            "rng": RNG_NAME,
            "meta_optimizer": "Adam",
            "train_config": self.config.to_dict(),
        }

    def checkpoint(self) -> dict:
        return checkpoint_document(self.best_weights, self.metadata())

    def last_checkpoint(self) -> dict:
        return checkpoint_document(self.state.weights, self.metadata(), {"trainer_state": self.state.to_json()})


def meta_train(config: TrainConfig, resume: TrainerState | None = None, progress=None) -> TrainResult:
    """Train the LSTM optimizer, one freshly sampled problem and one Adam step per epoch.

    Returns the weights with the lowest validation mean final loss (the
    untrained weights, scored as epoch 0, included). ``resume`` continues a
    previous run's state up to ``config.epochs``.
    """
    spec = config.spec()
    val_problems = validation_problems(config)
    val_seeds = validation_seeds(config)
    kwargs = config.problem_kwargs()

    if resume is None:
        weights = init_weights(config.metaopt, make_rng(derive_seed(config.seed, INIT_STREAM, 0)))
        init_val = validate(weights, val_problems, config.T)
        state = TrainerState(
            weights,
            np.zeros(weights.size),
            np.zeros(weights.size),
            0,
            0,
            weights,
            TrainLog(initial_validation=init_val, best_epoch=0, best_score=init_val.mean_final),
        )
        log.info("initial validation mean final f = %.6g", init_val.mean_final)
    else:
        state = resume
        if state.weights.config != config.metaopt:
            raise ValueError("resumed weights do not match the configured network")

    b1, b2 = config.betas
    train_seeds = [training_seed(config, e) for e in range(1, config.epochs + 1)]
    for epoch in range(state.epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        problem = problem_from_seed(spec, train_seeds[epoch - 1], **kwargs)
        try:
            traj = unroll_forward(state.weights, problem.objective(), problem.theta_init, config.T)
            meta_loss = traj.meta_loss()
            if not np.isfinite(meta_loss):
                raise NonFiniteError(f"meta-loss {meta_loss}")
            grad = unroll_backward(state.weights, traj, config.truncation).to_vector()
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError("non-finite meta-gradient")
        except NonFiniteError as exc:
            log.warning("epoch %d skipped: %s", epoch, exc)
            state.log.nonfinite_epochs.append(epoch)
            state.log.records.append(EpochRecord(epoch, float("nan"), float("nan"), False))
            if len(state.log.nonfinite_epochs) > 0.1 * config.epochs:
                raise NonFiniteError(
                    f"{len(state.log.nonfinite_epochs)} of {config.epochs} epochs were non-finite"
                ) from exc
            state.epoch = epoch
            continue

        norm = float(np.linalg.norm(grad))
        clipped = config.clip_norm is not None and norm > config.clip_norm
        if clipped:
            grad = grad * (config.clip_norm / norm)
        state.step += 1
        state.adam_m = b1 * state.adam_m + (1 - b1) * grad
        state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
        m_hat = state.adam_m / (1 - b1**state.step)
        v_hat = state.adam_v / (1 - b2**state.step)
        vec = state.weights.to_vector() - config.meta_lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        state.weights = state.weights.with_vector(vec)
        state.epoch = epoch

        rec = EpochRecord(epoch, meta_loss, norm, clipped)
        if epoch % config.validate_every == 0 or epoch == config.epochs:
            summary = validate(state.weights, val_problems, config.T)
            rec.val_mean_final_f = summary.mean_final
            rec.val_mean_traj_f = summary.mean_trajectory
            if summary.mean_final < state.log.best_score:
                state.log.best_score = summary.mean_final
                state.log.best_epoch = epoch
                state.best_weights = state.weights
            log.info("epoch %d: validation mean final f = %.6g (best %.6g @ %d)",
                     epoch, summary.mean_final, state.log.best_score, state.log.best_epoch)
        rec.wall_seconds = time.perf_counter() - t0
        state.log.records.append(rec)
        if progress is not None:
            progress(rec)

    return TrainResult(state.best_weights, state.log, state, config, val_seeds, train_seeds)
