"""Summary statistics for optimizer benchmarks."""

from __future__ import annotations

import numpy as np


def bootstrap_means(samples, n_resamples: int, rng: np.random.Generator) -> np.ndarray:
    """Means of ``n_resamples`` with-replacement resamples along axis 0.

    Resampling is done through per-resample multiplicity counts, so curves of
    shape ``(n, T)`` are handled with one matmul.
    """
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    idx = rng.integers(0, n, size=(n_resamples, n))
    counts = np.zeros((n_resamples, n))
    np.add.at(counts, (np.repeat(np.arange(n_resamples), n), idx.ravel()), 1.0)
    return counts @ x.reshape(n, -1) / n


def bootstrap_ci(samples, n_resamples: int = 1000, level: float = 0.95, rng=None) -> tuple[float, float]:
    """Percentile bootstrap confidence interval of the mean."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    if not 0 <= level < 1:
        raise ValueError("level must be in [0, 1)")
    rng = np.random.default_rng() if rng is None else rng
    means = bootstrap_means(x, n_resamples, rng)[:, 0]
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def curve_band(curves, n_resamples: int = 1000, level: float = 0.95, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise bootstrap interval of the mean curve; ``curves`` has shape ``(n, T)``."""
    rng = np.random.default_rng() if rng is None else rng
    means = bootstrap_means(curves, n_resamples, rng)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return lo, hi


def log_histogram(values, n_bins: int = 30) -> dict:
    """Counts over log-spaced bins covering the positive values, padded one decade each side."""
    v = np.asarray(values, dtype=float)
    pos = v[v > 0]
    if pos.size == 0:
        return {"edges": [], "counts": [], "n_nonpositive": int(v.size)}
    lo = np.floor(np.log10(pos.min())) - 1
    hi = np.ceil(np.log10(pos.max())) + 1
    edges = np.logspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(pos, bins=edges)
    return {"edges": edges.tolist(), "counts": counts.tolist(), "n_nonpositive": int(v.size - pos.size)}


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    p25, median, p75 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "median": float(median),
        "p25": float(p25),
        "p75": float(p75),
        "min": float(v.min()),
        "max": float(v.max()),
    }


def first_crossing(curve, target) -> int | None:
    """First iteration at which ``curve <= target``, or None."""
    hits = np.flatnonzero(np.asarray(curve) <= target)
    return int(hits[0]) if hits.size else None
