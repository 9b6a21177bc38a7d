"""Coordinate-wise LSTM optimizer with a hand-written backward pass.

Every parameter coordinate is one row of a batch: all coordinates share the
same weights but carry their own hidden and cell state, so the network runs
unchanged on problems of any dimension and is equivariant under permutations
of the coordinates.

Gate layout inside the stacked ``4H`` axis is ``(input, forget, cell, output)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

CHECKPOINT_SCHEMA = "metaham.checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss, gradient or update stopped being finite."""


class CheckpointError(ValueError):
    pass


class Preprocess(str, Enum):
    RAW = "Raw"
    LOG_SIGN = "LogSign"


@dataclass(frozen=True)
class MetaOptConfig:
    hidden_size: int = 20
    n_layers: int = 2
    preprocess: Preprocess = Preprocess.LOG_SIGN
    p: float = 10.0
    output_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "preprocess", Preprocess(self.preprocess))
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not self.p > 0:
            raise ValueError("p must be positive")

    @property
    def input_dim(self) -> int:
        return 1 if self.preprocess is Preprocess.RAW else 2

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "n_layers": self.n_layers,
            "preprocess": self.preprocess.value,
            "p": self.p,
            "output_scale": self.output_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaOptConfig":
        return cls(**d)


def preprocess_gradient(grad, config: MetaOptConfig) -> np.ndarray:
    """Per-coordinate input features, shape ``(n, input_dim)``.

    LogSign maps ``g`` to ``(log|g| / p, sign g)`` when ``|g| >= e^-p`` and to
    ``(-1, e^p g)`` otherwise.
    """
    g = np.atleast_1d(np.asarray(grad, dtype=float))
    if config.preprocess is Preprocess.RAW:
        return g[:, None].copy()
    p = config.p
    big = np.abs(g) >= math.exp(-p)
    with np.errstate(divide="ignore"):
        first = np.where(big, np.log(np.abs(g)) / p, -1.0)
    second = np.where(big, np.sign(g), math.exp(p) * g)
    return np.stack([first, second], axis=1)


@dataclass
class LstmWeights:
    """Shared parameters: per layer ``W (in, 4H)``, ``R (H, 4H)``, ``b (4H,)``; readout ``w_out (H,)``, ``b_out``."""

    config: MetaOptConfig
    W: list[np.ndarray]
    R: list[np.ndarray]
    b: list[np.ndarray]
    w_out: np.ndarray
    b_out: float = 0.0

    def __post_init__(self):
        cfg = self.config
        h = cfg.hidden_size
        if not len(self.W) == len(self.R) == len(self.b) == cfg.n_layers:
            raise ValueError("layer count does not match config")
        for layer, (w, r, b) in enumerate(zip(self.W, self.R, self.b)):
            in_dim = cfg.input_dim if layer == 0 else h
            if w.shape != (in_dim, 4 * h) or r.shape != (h, 4 * h) or b.shape != (4 * h,):
                raise ValueError(f"layer {layer} shapes {w.shape}, {r.shape}, {b.shape} do not match config")
        if np.shape(self.w_out) != (h,):
            raise ValueError(f"readout has shape {np.shape(self.w_out)}, expected ({h},)")
        self.b_out = float(self.b_out)

    def arrays(self) -> list[np.ndarray]:
        """All parameters in canonical order (the order used by :meth:`to_vector`)."""
        out = []
        for w, r, b in zip(self.W, self.R, self.b):
            out += [w, r, b]
        return out + [self.w_out, np.array([self.b_out])]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def with_vector(self, vec) -> "LstmWeights":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"vector has shape {vec.shape}, expected ({self.size},)")
        pieces, pos = [], 0
        for a in self.arrays():
            pieces.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        n = self.config.n_layers
        return LstmWeights(
            self.config,
            pieces[0 : 3 * n : 3],
            pieces[1 : 3 * n : 3],
            pieces[2 : 3 * n : 3],
            pieces[3 * n],
            float(pieces[3 * n + 1][0]),
        )

    def zeros_like(self) -> "LstmWeights":
        return self.with_vector(np.zeros(self.size))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


def init_weights(config: MetaOptConfig, rng: np.random.Generator) -> LstmWeights:
    h = config.hidden_size
    s = 1.0 / math.sqrt(h)
    W, R, b = [], [], []
    for layer in range(config.n_layers):
        in_dim = config.input_dim if layer == 0 else h
        W.append(rng.uniform(-s, s, (in_dim, 4 * h)))
        R.append(rng.uniform(-s, s, (h, 4 * h)))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        b.append(bias)
    w_out = 0.01 * rng.uniform(-s, s, h)
    return LstmWeights(config, W, R, b, w_out, 0.0)


@dataclass
class LstmState:
    h: np.ndarray  # (n_layers, n_coords, H)
    c: np.ndarray

    @classmethod
    def zeros(cls, config: MetaOptConfig, n_coords: int) -> "LstmState":
        shape = (config.n_layers, n_coords, config.hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def n_coords(self) -> int:
        return self.h.shape[1]

    def permuted(self, perm) -> "LstmState":
        return LstmState(self.h[:, perm], self.c[:, perm])


@dataclass
class StepCache:
    """Activations of one step, enough to run that step backwards."""

    x: list[np.ndarray]  # layer inputs
    h_prev: list[np.ndarray]
    c_prev: list[np.ndarray]
    gates: list[np.ndarray]  # activated (i, f, g, o) stacked, (n, 4H)
    tanh_c: list[np.ndarray]
    h_top: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rows(a, m):
    """``a @ m`` computed row by row in a fixed order.

    BLAS kernels may round a row differently depending on its position in the
    batch; einsum's plain loop does not, which keeps the step exactly
    equivariant under permutations of the coordinates.
    """
    return np.einsum("ni,i...->n...", a, m)


def _lstm_step(weights: LstmWeights, state: LstmState, grad) -> tuple[np.ndarray, LstmState, StepCache]:
    cfg = weights.config
    grad = np.asarray(grad, dtype=float)
    if grad.ndim != 1 or grad.size != state.n_coords:
        raise ValueError(f"gradient of shape {grad.shape} does not match state with {state.n_coords} coordinates")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteError(f"non-finite gradient at coordinate {int(bad[0])}: {grad[bad[0]]}")
    H = cfg.hidden_size
    x = preprocess_gradient(grad, cfg)
    new_h, new_c = np.empty_like(state.h), np.empty_like(state.c)
    cache = StepCache([], [], [], [], [], None)
    for layer in range(cfg.n_layers):
        h_prev, c_prev = state.h[layer], state.c[layer]
        a = _rows(x, weights.W[layer]) + _rows(h_prev, weights.R[layer]) + weights.b[layer]
        gates = np.empty_like(a)
        gates[:, : 2 * H] = _sigmoid(a[:, : 2 * H])
        gates[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        gates[:, 3 * H :] = _sigmoid(a[:, 3 * H :])
        i, f, g, o = gates[:, :H], gates[:, H : 2 * H], gates[:, 2 * H : 3 * H], gates[:, 3 * H :]
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.x.append(x)
        cache.h_prev.append(h_prev)
        cache.c_prev.append(c_prev)
        cache.gates.append(gates)
        cache.tanh_c.append(tc)
        new_h[layer], new_c[layer] = h, c
        x = h
    cache.h_top = x
    update = cfg.output_scale * (_rows(x, weights.w_out) + weights.b_out)
    return update, LstmState(new_h, new_c), cache


def lstm_step(weights: LstmWeights, state: LstmState, grad) -> tuple[np.ndarray, LstmState]:
    """One optimizer step: the per-coordinate update ``g_k`` and the next recurrent state."""
    update, new_state, _ = _lstm_step(weights, state, grad)
    return update, new_state


@dataclass
class Trajectory:
    """Iterates ``theta_0..theta_T`` with their losses.

    ``gradients`` holds the ``T`` gradients the optimizer consumed (at
    ``theta_0..theta_{T-1}``); ``final_gradient`` is the gradient at ``theta_T``
    when it was evaluated. ``tape`` is filled only by taped LSTM unrolls.
    """

    thetas: np.ndarray
    losses: np.ndarray
    gradients: np.ndarray
    final_gradient: np.ndarray | None = None
    tape: list[StepCache] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.thetas) - 1

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def meta_loss(self) -> float:
        return float(np.sum(self.losses[1:]))


def _check_loss(value, k):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} at step {k}")


def unroll_forward(
    weights: LstmWeights,
    objective,
    theta0,
    T: int,
    keep_tape: bool = True,
    divergence_threshold: float | None = None,
) -> Trajectory:
    """Run the learned optimizer for ``T`` steps from ``theta0`` with a fresh zero state.

    A non-finite loss raises :class:`NonFiniteError`, unless
    ``divergence_threshold`` is given: then a loss above it (or non-finite)
    ends the run, the remaining steps repeat the last good iterate and
    ``meta["diverged"]`` is set.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    theta = np.array(theta0, dtype=float)
    state = LstmState.zeros(weights.config, theta.size)
    thetas, losses, grads, tape = [theta], [], [], []
    final_grad = None
    diverged_at = None
    for k in range(T + 1):
        ev = objective.value_and_grad(theta)
        if divergence_threshold is not None and not (ev.value <= divergence_threshold):
            diverged_at = k
            break
        _check_loss(ev.value, k)
        losses.append(ev.value)
        if k == T:
            final_grad = ev.gradient
            break
        try:
            update, state, cache = _lstm_step(weights, state, ev.gradient)
        except NonFiniteError:
            if divergence_threshold is None:
                raise
            diverged_at = k
            break
        grads.append(ev.gradient)
        if keep_tape:
            tape.append(cache)
        theta = theta + update
        thetas.append(theta)
    meta = {"diverged": diverged_at is not None}
    if diverged_at is not None:
        if diverged_at == 0:
            raise NonFiniteError("loss at the initial point is already beyond the divergence threshold")
        del thetas[len(losses) :]
        meta["diverged_at"] = diverged_at
        while len(thetas) < T + 1:
            thetas.append(thetas[-1])
            losses.append(losses[-1])
    n = theta.size
    return Trajectory(
        np.array(thetas), np.array(losses), np.array(grads) if grads else np.zeros((0, n)), final_grad, tape, meta
    )


def unroll_backward(weights: LstmWeights, traj: Trajectory, window: int | None = None) -> LstmWeights:
    """Gradient of ``L = sum_{k=1..T} f(theta_k)`` with respect to the weights.

    The optimizer's gradient inputs are treated as constants, so
    ``dL/dtheta_k = grad f(theta_k) + dL/dtheta_{k+1}`` and the update ``g_k`` receives
    ``dL/dtheta_{k+1}``. ``window`` truncates backpropagation: adjoints are reset
    every ``window`` steps, counted from the end of the unroll.
    """
    T = traj.T
    if len(traj.tape) != T or traj.final_gradient is None or len(traj.gradients) != T:
        raise ValueError("trajectory tape is incomplete; unroll with keep_tape=True")
    cfg = weights.config
    H, L = cfg.hidden_size, cfg.n_layers
    scale = cfg.output_scale
    seeds = list(traj.gradients[1:]) + [traj.final_gradient]  # grad f(theta_{k+1}) for k = 0..T-1

    dW = [np.zeros_like(w) for w in weights.W]
    dR = [np.zeros_like(r) for r in weights.R]
    db = [np.zeros_like(b) for b in weights.b]
    dw_out = np.zeros_like(weights.w_out)
    db_out = 0.0
    n = traj.thetas.shape[1]
    dh_next = np.zeros((L, n, H))
    dc_next = np.zeros((L, n, H))
    adj = np.zeros(n)
    for k in reversed(range(T)):
        if window is not None and (T - 1 - k) % window == 0:
            dh_next[:] = 0.0
            dc_next[:] = 0.0
            adj = np.zeros(n)
        adj = adj + seeds[k]
        cache = traj.tape[k]
        du = scale * adj
        dw_out += cache.h_top.T @ du
        db_out += du.sum()
        dh_below = np.outer(du, weights.w_out)
        for layer in reversed(range(L)):
            gates, tc = cache.gates[layer], cache.tanh_c[layer]
            i, f, g, o = gates[:, :H], gates[:, H : 2 * H], gates[:, 2 * H : 3 * H], gates[:, 3 * H :]
            dh = dh_below + dh_next[layer]
            dc = dc_next[layer] + dh * o * (1.0 - tc**2)
            da = np.empty_like(gates)
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H : 2 * H] = dc * cache.c_prev[layer] * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dc * i * (1.0 - g**2)
            da[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dW[layer] += cache.x[layer].T @ da
            dR[layer] += cache.h_prev[layer].T @ da
            db[layer] += da.sum(axis=0)
            dh_next[layer] = da @ weights.R[layer].T
            dc_next[layer] = dc * f
            dh_below = da @ weights.W[layer].T
    return LstmWeights(cfg, dW, dR, db, dw_out, db_out)


def _weights_to_json(weights: LstmWeights) -> dict:
    return {
        "layers": [{"W": w.tolist(), "R": r.tolist(), "b": b.tolist()} for w, r, b in zip(weights.W, weights.R, weights.b)],
        "w_out": weights.w_out.tolist(),
        "b_out": weights.b_out,
    }


def _weights_from_json(doc: dict, config: MetaOptConfig) -> LstmWeights:
    layers = doc["layers"]
    return LstmWeights(
        config,
        [np.array(layer["W"], dtype=float).reshape(-1, 4 * config.hidden_size) for layer in layers],
        [np.array(layer["R"], dtype=float) for layer in layers],
        [np.array(layer["b"], dtype=float) for layer in layers],
        np.array(doc["w_out"], dtype=float),
        float(doc["b_out"]),
    )


def checkpoint_document(weights: LstmWeights, metadata: dict | None = None, extra: dict | None = None) -> dict:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "schema_version": CHECKPOINT_VERSION,
        "config": weights.config.to_dict(),
        "weights": _weights_to_json(weights),
        "metadata": dict(metadata or {}),
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(weights: LstmWeights, metadata: dict | None = None, extra: dict | None = None) -> str:
    """Serialize to JSON text. Floats use the shortest repr that round-trips exactly."""
    return json.dumps(checkpoint_document(weights, metadata, extra), indent=1, sort_keys=True) + "\n"


def load_checkpoint_document(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError("document is not a metaham checkpoint")
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema version {doc.get('schema_version')!r}")
    for key in ("config", "weights", "metadata"):
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing {key!r}")
    return doc


def load_checkpoint(text: str) -> tuple[LstmWeights, MetaOptConfig]:
    doc = load_checkpoint_document(text)
    try:
        config = MetaOptConfig.from_dict(doc["config"])
        weights = _weights_from_json(doc["weights"], config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint weights do not match its config: {exc}") from None
    if not weights.is_finite():
        raise CheckpointError("checkpoint contains non-finite weights")
    return weights, config


def zero_weights(config: MetaOptConfig) -> LstmWeights:
    return init_weights(config, np.random.default_rng(0)).zeros_like()


def with_config(weights: LstmWeights, **changes) -> LstmWeights:
    """Same arrays under a config differing only in fields that leave shapes unchanged."""
    return LstmWeights(replace(weights.config, **changes), weights.W, weights.R, weights.b, weights.w_out, weights.b_out)
