"""Hand-designed optimizers producing :class:`Trajectory` records on the same problems as the LSTM."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .metaopt import Trajectory

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


class BaselineKind(str, Enum):
    SGD = "SGD"
    ADAM = "Adam"
    LBFGS = "LBFGS"
    NELDER_MEAD = "NelderMead"


# tuned on N=4 TFIM with sigma = 0.001
DEFAULT_LEARNING_RATES = {BaselineKind.SGD: 0.001, BaselineKind.ADAM: 0.03}


@dataclass(frozen=True)
class BaselineConfig:
    kind: BaselineKind
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_ls_evals: int = 20
    fallback_lr: float = 1e-3
    nm_coeffs: tuple[float, float, float, float] = (1.0, 2.0, 0.5, 0.5)
    nm_edge: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.kind in DEFAULT_LEARNING_RATES:
            if self.learning_rate is None:
                object.__setattr__(self, "learning_rate", DEFAULT_LEARNING_RATES[self.kind])
            if self.learning_rate < 0:
                raise ValueError("learning rate must be >= 0")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")

    @property
    def label(self) -> str:
        if self.learning_rate is not None and self.kind in DEFAULT_LEARNING_RATES:
            return f"{self.kind.value}(lr={self.learning_rate:g})"
        return self.kind.value


class _Recorder:
    """Collects iterates; after a divergence pads the rest with the last finite point."""

    def __init__(self, T: int, threshold: float = DIVERGENCE_THRESHOLD):
        self.T = T
        self.threshold = threshold
        self.thetas: list[np.ndarray] = []
        self.losses: list[float] = []
        self.grads: list[np.ndarray] = []
        self.diverged_at: int | None = None

    def push(self, theta, value) -> bool:
        """Record iterate; return False (and stop recording) if it diverged."""
        if not np.isfinite(value) or value > self.threshold or not np.all(np.isfinite(theta)):
            self.diverged_at = len(self.thetas)
            return False
        self.thetas.append(np.array(theta, dtype=float))
        self.losses.append(float(value))
        return True

    def finish(self, **meta) -> Trajectory:
        if not self.thetas:
            raise FloatingPointError("initial point already diverged")
        while len(self.thetas) < self.T + 1:
            self.thetas.append(self.thetas[-1])
            self.losses.append(self.losses[-1])
        n = self.thetas[0].size
        grads = np.array(self.grads) if self.grads else np.zeros((0, n))
        meta["diverged"] = self.diverged_at is not None
        if self.diverged_at is not None:
            meta["diverged_at"] = self.diverged_at
        return Trajectory(np.array(self.thetas), np.array(self.losses), grads, meta=meta)


def run_baseline(config: BaselineConfig, objective, theta0, T: int) -> Trajectory:
    """Run ``T`` iterations of a baseline optimizer from ``theta0``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    theta0 = np.array(theta0, dtype=float)
    runner = {
        BaselineKind.SGD: _run_sgd,
        BaselineKind.ADAM: _run_adam,
        BaselineKind.LBFGS: _run_lbfgs,
        BaselineKind.NELDER_MEAD: _run_nelder_mead,
    }[config.kind]
    n_value0, n_grad0 = objective.n_value, objective.n_grad
    traj = runner(config, objective, theta0, T)
    traj.meta["optimizer"] = config.label
    traj.meta["n_value_calls"] = objective.n_value - n_value0
    traj.meta["n_grad_calls"] = objective.n_grad - n_grad0
    return traj


def _run_sgd(cfg, objective, theta, T):
    rec = _Recorder(T)
    for k in range(T):
        ev = objective.value_and_grad(theta)
        if not rec.push(theta, ev.value):
            break
        rec.grads.append(ev.gradient)
        theta = theta - cfg.learning_rate * ev.gradient
    else:
        rec.push(theta, objective.value(theta))
    return rec.finish()


def _run_adam(cfg, objective, theta, T):
    rec = _Recorder(T)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = cfg.beta1, cfg.beta2
    for k in range(1, T + 1):
        ev = objective.value_and_grad(theta)
        if not rec.push(theta, ev.value):
            break
        g = ev.gradient
        rec.grads.append(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**k)
        v_hat = v / (1 - b2**k)
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    else:
        rec.push(theta, objective.value(theta))
    return rec.finish()


def _two_loop(g, pairs) -> np.ndarray:
    """``-H g`` for the L-BFGS inverse-Hessian estimate built from ``(s, y, rho)`` pairs."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if not np.isfinite(disc) or disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def wolfe_line_search(phi, f0, d0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=20):
    """Strong-Wolfe line search (bracketing + zoom).

    ``phi(alpha)`` returns ``(f, grad, slope)`` along the search direction.
    Returns ``(alpha, f, grad, n_evals)``; ``alpha`` is None on failure.
    """
    evals = 0

    def ev(a):
        nonlocal evals
        evals += 1
        f, g, d = phi(a)
        if not np.isfinite(f):
            return np.inf, g, np.nan
        return f, g, d

    def zoom(lo, hi):
        # lo, hi are (alpha, f, slope); lo satisfies sufficient decrease
        while evals < max_evals:
            a_lo, f_lo, d_lo = lo[:3]
            a_hi, f_hi, d_hi = hi[:3]
            width = a_hi - a_lo
            a = None
            if np.isfinite(f_hi) and np.isfinite(d_hi):
                a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            if a is None or not (min(a_lo, a_hi) + 0.1 * abs(width) <= a <= max(a_lo, a_hi) - 0.1 * abs(width)):
                a = a_lo + 0.5 * width
            f, g, d = ev(a)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi = (a, f, d, g)
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * width >= 0:
                    hi = lo
                lo = (a, f, d, g)
        return None, None, None

    prev = (0.0, f0, d0, None)
    a = alpha0
    first = True
    while evals < max_evals:
        f, g, d = ev(a)
        if f > f0 + c1 * a * d0 or (not first and f >= prev[1]):
            res = zoom(prev, (a, f, d, g))
            return (*res, evals)
        if abs(d) <= -c2 * d0:
            return a, f, g, evals
        if d >= 0:
            res = zoom((a, f, d, g), prev)
            return (*res, evals)
        prev = (a, f, d, g)
        a *= 2.0
        first = False
    return None, None, None, evals


def _run_lbfgs(cfg, objective, theta, T):
    rec = _Recorder(T)
    pairs: deque = deque(maxlen=cfg.memory)
    ev = objective.value_and_grad(theta)
    f, g = ev.value, ev.gradient
    n_fallback = 0
    ls_evals = []
    for k in range(T):
        if not rec.push(theta, f):
            break
        rec.grads.append(g)
        d = _two_loop(g, list(pairs))
        slope = g @ d
        if not slope < 0:
            pairs.clear()
            d = -g
            slope = -(g @ g)
        if slope == 0:
            # stationary point: stay put
            ls_evals.append(0)
            continue
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / np.linalg.norm(g))

        def phi(a, theta=theta, d=d):
            e = objective.value_and_grad(theta + a * d)
            return e.value, e.gradient, e.gradient @ d

        alpha, f_new, g_new, n_ev = wolfe_line_search(phi, f, slope, alpha0, cfg.c1, cfg.c2, cfg.max_ls_evals)
        ls_evals.append(n_ev)
        if alpha is None:
            n_fallback += 1
            log.info("L-BFGS line search failed at iteration %d; taking a steepest-descent step", k)
            theta_new = theta - cfg.fallback_lr * g
            e = objective.value_and_grad(theta_new)
            f_new, g_new = e.value, e.gradient
            pairs.clear()
        else:
            theta_new = theta + alpha * d
            s, y = theta_new - theta, g_new - g
            sy = s @ y
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                pairs.append((s, y, 1.0 / sy))
        theta, f, g = theta_new, f_new, g_new
    else:
        rec.push(theta, f)
    return rec.finish(line_search_evals=ls_evals, n_fallback_steps=n_fallback)


def _run_nelder_mead(cfg, objective, theta, T):
    rho, chi, gamma, sigma = cfg.nm_coeffs
    n = theta.size
    rec = _Recorder(T)
    simplex = np.vstack([theta, theta + cfg.nm_edge * np.eye(n)])
    fs = np.array([objective.value(x) for x in simplex])
    rec.push(theta, fs[0])
    ops = []
    for k in range(T):
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + rho * (centroid - worst)
        fr = objective.value(xr)
        if fs[0] <= fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
            ops.append("reflect")
        elif fr < fs[0]:
            xe = centroid + chi * (xr - centroid)
            fe = objective.value(xe)
            if fe < fr:
                simplex[-1], fs[-1] = xe, fe
                ops.append("expand")
            else:
                simplex[-1], fs[-1] = xr, fr
                ops.append("reflect")
        else:
            if fr < fs[-1]:
                xc = centroid + gamma * (xr - centroid)
                fc = objective.value(xc)
                accept = fc <= fr
                ops_name = "contract_outside"
            else:
                xc = centroid + gamma * (worst - centroid)
                fc = objective.value(xc)
                accept = fc < fs[-1]
                ops_name = "contract_inside"
            if accept:
                simplex[-1], fs[-1] = xc, fc
                ops.append(ops_name)
            else:
                simplex[1:] = simplex[0] + sigma * (simplex[1:] - simplex[0])
                fs[1:] = [objective.value(x) for x in simplex[1:]]
                ops.append("shrink")
        best = int(np.argmin(fs))
        if not rec.push(simplex[best], fs[best]):
            break
    return rec.finish(operations=ops)


@dataclass(frozen=True)
class SweepRow:
    learning_rate: float
    mean_final: float
    std_final: float
    median_final: float
    mean_curve: np.ndarray
    n_diverged: int

    @property
    def flagged(self) -> bool:
        return self.n_diverged > 0


def sweep_learning_rates(kind, learning_rates, problems, T: int) -> tuple[list[SweepRow], float]:
    """Mean loss curve and final loss per learning rate; returns ``(rows, best_rate)``.

    A run that diverges makes its rate's mean final loss ``+inf`` and flags the row.
    ``problems`` need ``objective()`` and ``theta_init``.
    """
    kind = BaselineKind(kind)
    learning_rates = list(learning_rates)
    problems = list(problems)
    if not learning_rates or not problems:
        raise ValueError("sweep needs at least one learning rate and one problem")
    rows = []
    for lr in learning_rates:
        cfg = BaselineConfig(kind, learning_rate=lr)
        trajs = [run_baseline(cfg, p.objective(), p.theta_init, T) for p in problems]
        finals = np.array([t.final_loss for t in trajs])
        n_div = sum(t.meta["diverged"] for t in trajs)
        curve = np.mean([t.losses for t in trajs], axis=0)
        mean_final = np.inf if n_div else float(finals.mean())
        rows.append(SweepRow(lr, mean_final, float(finals.std()), float(np.median(finals)), curve, n_div))
    best = min(rows, key=lambda r: r.mean_final).learning_rate
    return rows, best


@dataclass(frozen=True)
class QuadraticProblem:
    """Minimal problem wrapper around :class:`QuadraticObjective` for tests and sweeps."""

    center: np.ndarray
    theta_init: np.ndarray

    def objective(self):
        from .objective import QuadraticObjective

        return QuadraticObjective(self.center)
