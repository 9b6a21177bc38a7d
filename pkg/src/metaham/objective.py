"""Noisy quench datasets and the optimizee loss with its exact gradient."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .spin import (
    DEFAULT_INITIAL_STATES,
    InitialState,
    ModelKind,
    ModelSpec,
    build_model,
    diagonalize,
    evolve_amplitudes,
    initial_state,
    propagator_derivative,
)

KL_FLOOR = 1e-12
DEFAULT_SIGMA = 0.001
DEFAULT_SIGMA_IN = 0.1
DEFAULT_PARAM_RANGE = (1.0, 2.0)
POPULATION_SLACK = 1e-12


class LossKind(str, Enum):
    SQUARED_ERROR = "SquaredError"
    KL = "KL"


def default_times(n_times: int = 50, t_max: float = 10.0) -> np.ndarray:
    """Equally spaced grid on ``[0, t_max]``, both endpoints included."""
    return np.linspace(0.0, t_max, n_times)


def make_rng(seed) -> np.random.Generator:
    """The artifact's single generator algorithm (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


RNG_NAME = "numpy.PCG64"


@dataclass(frozen=True, eq=False)
class QuenchDataset:
    times: np.ndarray
    initial_states: tuple[InitialState, ...]
    observed: np.ndarray  # [state j, time t, basis index i]
    noise_sigma: float
    seed: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-d array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        obs = np.asarray(self.observed, dtype=float)
        if obs.ndim != 3 or obs.shape[:2] != (len(self.initial_states), times.size):
            raise ValueError(
                f"observed has shape {obs.shape}, expected ({len(self.initial_states)}, {times.size}, dim)"
            )
        # noiseless data are exact probabilities, which may sit an ulp outside [0, 1]
        if obs.size and (obs.min() < -POPULATION_SLACK or obs.max() > 1.0 + POPULATION_SLACK):
            raise ValueError("observed populations must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "initial_states", tuple(InitialState(s) for s in self.initial_states))

    @property
    def dim(self) -> int:
        return self.observed.shape[2]


def generate_dataset(
    spec: ModelSpec,
    theta_true,
    times=None,
    sigma: float = DEFAULT_SIGMA,
    rng: np.random.Generator | None = None,
    initial_states=DEFAULT_INITIAL_STATES,
    seed: int | None = None,
) -> QuenchDataset:
    """Exact populations under ``theta_true`` plus i.i.d. N(0, sigma^2) noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    times = default_times() if times is None else np.asarray(times, dtype=float)
    states = tuple(InitialState(s) for s in initial_states)
    exact = predict(spec, theta_true, times, states)
    if sigma > 0:
        if rng is None:
            raise ValueError("an rng is required when sigma > 0")
        observed = np.clip(exact + sigma * rng.standard_normal(exact.shape), 0.0, 1.0)
    else:
        observed = exact
    return QuenchDataset(times, states, observed, float(sigma), seed)


def predict(spec: ModelSpec, theta, times, initial_states=DEFAULT_INITIAL_STATES) -> np.ndarray:
    """Model populations, shape ``(n_states, n_times, dim)``."""
    decomp = diagonalize(spec, theta)
    return np.stack(
        [np.abs(evolve_amplitudes(decomp, initial_state(s, spec.n_qubits), times)) ** 2 for s in initial_states]
    )


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    spec: ModelSpec
    theta_true: np.ndarray
    dataset: QuenchDataset
    theta_init: np.ndarray
    loss_kind: LossKind = LossKind.SQUARED_ERROR
    rng_seed: int | None = None

    def __post_init__(self):
        for name in ("theta_true", "theta_init"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.spec.n_params,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({self.spec.n_params},)")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))

    def objective(self) -> "QuenchObjective":
        return QuenchObjective(self.spec, self.dataset, self.loss_kind)


def sample_problem(
    spec: ModelSpec,
    rng: np.random.Generator,
    sigma: float = DEFAULT_SIGMA,
    sigma_in: float = DEFAULT_SIGMA_IN,
    param_range=DEFAULT_PARAM_RANGE,
    times=None,
    loss_kind: LossKind = LossKind.SQUARED_ERROR,
    initial_states=DEFAULT_INITIAL_STATES,
    seed: int | None = None,
) -> ProblemInstance:
    """Draw ``theta* ~ U(lo, hi)``, ``theta0 ~ N(theta*, sigma_in^2 I)`` and a noisy dataset.

    Draw order from ``rng``: theta*, then theta0, then the dataset noise.
    """
    lo, hi = (float(x) for x in param_range)
    if not lo < hi:
        raise ValueError(f"invalid parameter range ({lo}, {hi})")
    if sigma_in < 0:
        raise ValueError("sigma_in must be >= 0")
    theta_true = rng.uniform(lo, hi, spec.n_params)
    theta_init = theta_true + sigma_in * rng.standard_normal(spec.n_params)
    dataset = generate_dataset(spec, theta_true, times, sigma, rng, initial_states, seed)
    return ProblemInstance(spec, theta_true, dataset, theta_init, loss_kind, seed)


def problem_from_seed(spec: ModelSpec, seed: int, **kwargs) -> ProblemInstance:
    return sample_problem(spec, make_rng(seed), seed=seed, **kwargs)


def derive_seed(base: int, stream: int, index: int) -> int:
    """Independent 63-bit instance seed for ``(base, stream, index)``."""
    state = np.random.SeedSequence([int(base), int(stream), int(index)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class LossEvaluation:
    value: float
    gradient: np.ndarray


def _loss_weights(pred: np.ndarray, observed: np.ndarray, loss_kind: LossKind) -> tuple[float, np.ndarray]:
    """Loss value and its partial derivatives with respect to each predicted population."""
    if loss_kind is LossKind.SQUARED_ERROR:
        resid = pred - observed
        return float(np.sum(resid**2)), 2.0 * resid
    totals = observed.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("KL loss needs every observed row to have positive mass")
    p = observed / totals
    q_raw = np.maximum(pred, KL_FLOOR)
    s = q_raw.sum(axis=-1, keepdims=True)
    q = q_raw / s
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    dq = -p / q_raw + 1.0 / s
    return float(terms.sum()), np.where(pred > KL_FLOOR, dq, 0.0)


def _kernel_contraction(lam, times, phases, beta, c) -> np.ndarray:
    """``G[m, n] = sum_{j,t} K_mn(t) beta[j, t, m] c[j, n]`` for the divided-difference kernel K.

    Well-separated pairs use ``K_mn = (E_m - E_n) / (l_m - l_n)``, which turns the
    time sum into one matmul. Pairs with ``|l_m - l_n| t_max < 1e-3`` (always the
    diagonal) would lose digits to cancellation and are evaluated with the
    exact sinc form instead.
    """
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) * np.max(np.abs(times)) < 1e-3
    q = beta.transpose(0, 2, 1) @ phases  # [j, m, n] = sum_t beta[j,t,m] E_n(t)
    qdiag = np.diagonal(q, axis1=1, axis2=2)
    g = np.einsum("jn,jmn->mn", c, qdiag[:, :, None] - q) / np.where(close, 1.0, diff)
    rows, cols = np.nonzero(close)
    mean = 0.5 * (lam[rows] + lam[cols])
    t = times[:, None]
    kern = -1j * t * np.exp(-1j * mean * t) * np.sinc(diff[rows, cols] * t / (2 * np.pi))  # [t, pair]
    g[rows, cols] = np.einsum("tp,jtp,jp->p", kern, beta[:, :, rows], c[:, cols])
    return g


def loss_and_grad(spec: ModelSpec, theta, dataset: QuenchDataset, loss_kind=LossKind.SQUARED_ERROR) -> LossEvaluation:
    """Loss and exact gradient from a single eigendecomposition.

    With ``r = df/dp`` the gradient is ``2 Re sum_{j,t,i} r conj(a_i) (dU/dtheta psi0)_i``.
    Contracting the divided-difference kernel against the eigenbasis weights first
    gives one ``dim x dim`` matrix ``W``; each component is then
    ``2 Re sum_k phase_a[k] W[k, cols_a[k]]`` over the sparse Pauli term.
    """
    loss_kind = LossKind(loss_kind)
    theta = np.asarray(theta, dtype=float)
    decomp = diagonalize(spec, theta)
    v = decomp.eigenvectors
    psi0 = np.stack([initial_state(s, spec.n_qubits) for s in dataset.initial_states])
    c = psi0 @ v.conj()  # [j, m], eigenbasis coefficients
    phases = np.exp(-1j * np.outer(dataset.times, decomp.eigenvalues))  # [t, m]
    amps = (phases[None] * c[:, None, :]) @ v.T  # [j, t, i]
    pred = np.abs(amps) ** 2
    value, r = _loss_weights(pred, dataset.observed, loss_kind)

    beta = (r * amps.conj()) @ v  # [j, t, m]
    g = _kernel_contraction(decomp.eigenvalues, dataset.times, phases, beta, c)
    w = v.conj() @ g @ v.T
    rows = np.arange(spec.dim)
    grad = np.empty(spec.n_params)
    for a, term in enumerate(spec.parameterized_terms):
        cols, ph = term.action
        grad[a] = 2.0 * np.real(np.sum(ph * w[rows, cols]))
    return LossEvaluation(value, grad)


def loss_value(spec: ModelSpec, theta, dataset: QuenchDataset, loss_kind=LossKind.SQUARED_ERROR) -> float:
    pred = predict(spec, theta, dataset.times, dataset.initial_states)
    return _loss_weights(pred, dataset.observed, LossKind(loss_kind))[0]


def population_jacobian(spec: ModelSpec, theta, state0, times) -> np.ndarray:
    """Reference ``d p_i(t) / d theta_a`` via explicit propagator derivatives, shape ``(t, a, i)``.

    Slow; kept as the direct route for cross-checking :func:`loss_and_grad`.
    """
    decomp = diagonalize(spec, theta)
    psi0 = np.asarray(state0, dtype=complex)
    out = np.empty((len(times), spec.n_params, spec.dim))
    for ti, t in enumerate(times):
        amp = decomp.propagator(t) @ psi0
        for a, term in enumerate(spec.parameterized_terms):
            damp = propagator_derivative(decomp, term, t) @ psi0
            out[ti, a] = 2.0 * np.real(damp * amp.conj())
    return out


class QuenchObjective:
    """The loss of one problem as a callable, with evaluation counters."""

    def __init__(self, spec: ModelSpec, dataset: QuenchDataset, loss_kind=LossKind.SQUARED_ERROR):
        self.spec = spec
        self.dataset = dataset
        self.loss_kind = LossKind(loss_kind)
        self.n_value = 0
        self.n_grad = 0

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def value(self, theta) -> float:
        self.n_value += 1
        return loss_value(self.spec, theta, self.dataset, self.loss_kind)

    def value_and_grad(self, theta) -> LossEvaluation:
        self.n_grad += 1
        return loss_and_grad(self.spec, theta, self.dataset, self.loss_kind)


class QuadraticObjective:
    """``f(theta) = ||theta - center||^2``; a test hook with the same interface."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)
        self.n_value = 0
        self.n_grad = 0

    @property
    def n_params(self) -> int:
        return self.center.size

    def value(self, theta) -> float:
        self.n_value += 1
        d = np.asarray(theta, dtype=float) - self.center
        return float(d @ d)

    def value_and_grad(self, theta) -> LossEvaluation:
        self.n_grad += 1
        d = np.asarray(theta, dtype=float) - self.center
        return LossEvaluation(float(d @ d), 2.0 * d)


def finite_diff_grad(objective, theta, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(theta + h e_a) - f(theta - h e_a)) / 2h``."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for a in range(theta.size):
        step = np.zeros_like(theta)
        step[a] = h
        grad[a] = (objective.value(theta + step) - objective.value(theta - step)) / (2 * h)
    return grad


def dataset_to_json(problem: ProblemInstance) -> dict:
    ds = problem.dataset
    return {
        "model_kind": problem.spec.model_kind.value,
        "n_qubits": problem.spec.n_qubits,
        "times": ds.times.tolist(),
        "sigma": ds.noise_sigma,
        "seed": ds.seed,
        "theta_true": problem.theta_true.tolist(),
        "theta_init": problem.theta_init.tolist(),
        "initial_states": [s.value for s in ds.initial_states],
        "observed": ds.observed.tolist(),
    }


def dataset_from_json(doc: dict, loss_kind=LossKind.SQUARED_ERROR) -> ProblemInstance:
    """Rebuild a problem from :func:`dataset_to_json` output (``theta_init`` defaults to ``theta_true``)."""
    missing = {"model_kind", "n_qubits", "times", "sigma", "seed", "theta_true", "observed"} - set(doc)
    if missing:
        raise ValueError(f"dataset document is missing {sorted(missing)}")
    spec = build_model(ModelKind(doc["model_kind"]), doc["n_qubits"])
    states = doc.get("initial_states", [s.value for s in DEFAULT_INITIAL_STATES])
    ds = QuenchDataset(np.array(doc["times"]), tuple(states), np.array(doc["observed"]), doc["sigma"], doc["seed"])
    theta_true = np.array(doc["theta_true"], dtype=float)
    theta_init = np.array(doc.get("theta_init", doc["theta_true"]), dtype=float)
    return ProblemInstance(spec, theta_true, ds, theta_init, loss_kind, doc["seed"])


def dumps(doc) -> str:
    """Canonical JSON text used for every file the toolkit writes."""
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"
