"""Synthetic Gaussian ensembles and Monte Carlo realization of grouped estimators.

Every analytic variance in the library can be checked against replicated
simulation: draw a correlated sample stream, form each group's per-model
means over that group's index set, combine with the weights, and repeat.
Streams use the counter-based Philox generator keyed per replicate as
``seed ^ replicate`` so results are reproducible regardless of execution
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import ModelEnsembleSpec, SampleDesign
from .weights import WeightSet

__all__ = [
    "GaussianEnsemble",
    "MomentSummary",
    "draw_stream",
    "replicate_rng",
    "realize_gacv",
    "group_mean_vectors",
    "replicate_values",
    "replicate_group_means",
    "empirical_moments",
    "random_problem",
]


@dataclass(frozen=True)
class GaussianEnsemble:
    """Jointly Gaussian model ensemble with a fixed base seed."""

    spec: ModelEnsembleSpec
    rng_seed: int

    def cholesky_lower(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.spec.cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance not positive definite") from exc


def replicate_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    """Counter-based generator for one replicate; keys never collide within a study."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed) ^ np.uint64(replicate)))


def draw_stream(ensemble: GaussianEnsemble, n: int, seed: int | None = None) -> np.ndarray:
    """n-by-(L+1) table of i.i.d. correlated draws, Cholesky based."""
    if n < 1:
        raise ValueError("need at least one sample")
    lower = ensemble.cholesky_lower()
    rng = replicate_rng(ensemble.rng_seed if seed is None else seed)
    z = rng.standard_normal((n, ensemble.spec.num_models))
    return ensemble.spec.means + z @ lower.T


def group_mean_vectors(design: SampleDesign, stream: np.ndarray) -> list[np.ndarray]:
    """Per-group vectors of model sample means over that group's index set."""
    if stream.shape[0] < design.stream_length:
        raise ValueError(
            f"stream has {stream.shape[0]} rows, design needs {design.stream_length}"
        )
    if stream.shape[1] != design.scheme.num_models:
        raise ValueError("stream columns do not match model count")
    means = []
    for mi, idx_set in zip(design.scheme.groups, design.index_sets):
        rows = idx_set.to_indices()
        means.append(stream[np.ix_(rows, list(mi))].mean(axis=0))
    return means


def realize_gacv(design: SampleDesign, weights: WeightSet, stream: np.ndarray) -> float:
    """One realization of the grouped estimator on a fixed sample stream."""
    if tuple(len(b) for b in weights.per_group) != design.scheme.sizes:
        raise ValueError("weight set does not align with design")
    value = 0.0
    for beta, mean in zip(weights.per_group, group_mean_vectors(design, stream)):
        value += float(beta @ mean)
    return value


def _replicate_plan(design: SampleDesign):
    """Precomputed (rows, cols) index pairs per group for fast realization."""
    return [
        (idx_set.to_indices(), np.asarray(mi, dtype=int))
        for mi, idx_set in zip(design.scheme.groups, design.index_sets)
    ]


def replicate_values(
    design: SampleDesign,
    weights: WeightSet,
    ensemble: GaussianEnsemble,
    trials: int,
    seed: int,
) -> np.ndarray:
    """Independent estimator realizations, one per replicate seed."""
    if tuple(len(b) for b in weights.per_group) != design.scheme.sizes:
        raise ValueError("weight set does not align with design")
    plan = _replicate_plan(design)
    lower_t = ensemble.cholesky_lower().T
    means = ensemble.spec.means
    n = design.stream_length
    num_models = ensemble.spec.num_models
    values = np.empty(trials)
    for t in range(trials):
        stream = means + replicate_rng(seed, t).standard_normal((n, num_models)) @ lower_t
        acc = 0.0
        for beta, (rows, cols) in zip(weights.per_group, plan):
            acc += beta @ stream[rows][:, cols].mean(axis=0)
        values[t] = acc
    return values


def replicate_group_means(
    design: SampleDesign, ensemble: GaussianEnsemble, trials: int, seed: int
) -> np.ndarray:
    """(trials, total group size) matrix of stacked group-mean vectors."""
    plan = _replicate_plan(design)
    lower_t = ensemble.cholesky_lower().T
    means = ensemble.spec.means
    n = design.stream_length
    num_models = ensemble.spec.num_models
    out = np.empty((trials, design.scheme.total_size))
    off = design.scheme.offsets
    for t in range(trials):
        stream = means + replicate_rng(seed, t).standard_normal((n, num_models)) @ lower_t
        for k, (rows, cols) in enumerate(plan):
            out[t, off[k]:off[k + 1]] = stream[rows][:, cols].mean(axis=0)
    return out


@dataclass(frozen=True)
class MomentSummary:
    """Replicated-estimate moments with standard errors."""

    mean: float
    variance: float
    se_mean: float
    se_var: float
    trials: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "var": self.variance,
            "se_mean": self.se_mean,
            "se_var": self.se_var,
            "trials": self.trials,
        }


def empirical_moments(
    design: SampleDesign,
    weights: WeightSet,
    ensemble: GaussianEnsemble,
    trials: int,
    seed: int,
) -> MomentSummary:
    """Replicate the estimator and summarize its mean and variance.

    The variance standard error assumes Gaussian estimates,
    ``var * sqrt(2 / (trials - 1))``; estimator values are weighted sums of
    Gaussian sample means, so this is exact here.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials for stable moments")
    values = replicate_values(design, weights, ensemble, trials, seed)
    variance = float(values.var(ddof=1))
    return MomentSummary(
        mean=float(values.mean()),
        variance=variance,
        se_mean=float(np.sqrt(variance / trials)),
        se_var=float(variance * np.sqrt(2.0 / (trials - 1))),
        trials=trials,
    )


def random_problem(
    num_lowfi: int,
    seed: int,
    blend: float = 0.15,
    max_attempts: int = 10_000,
) -> ModelEnsembleSpec:
    """Random well-correlated ensemble with hierarchical cost/correlation order.

    The correlation matrix blends an equicorrelated 0.9 base with a random
    Gram matrix of unit vectors clustered around a common direction,
    ``C = (1 - blend) * base + blend * W``, rejection-sampled until every
    off-diagonal lies in [0.78, 0.995] and the matrix is comfortably
    positive definite.  Columns are then ordered so the correlation with the
    high-fidelity model decreases down the hierarchy.  The high-fidelity
    cost is fixed at 1; low-fidelity costs are i.i.d. log-uniform on
    [0.01, 1], sorted descending.
    """
    if num_lowfi < 1:
        raise ValueError("need at least one low-fidelity model")
    n = num_lowfi + 1
    rng = replicate_rng(seed)
    base = 0.9 * np.ones((n, n)) + 0.1 * np.eye(n)
    for _ in range(max_attempts):
        center = rng.standard_normal(n)
        center /= np.linalg.norm(center)
        vecs = center + 0.6 * rng.standard_normal((n, n))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        W = vecs @ vecs.T
        corr = (1.0 - blend) * base + blend * W
        off = corr[~np.eye(n, dtype=bool)]
        if off.min() < 0.78 or off.max() > 0.995:
            continue
        if np.linalg.eigvalsh(corr)[0] <= 1e-6:
            continue
        # order low-fidelity models by decreasing correlation with model 0
        order = np.concatenate([[0], 1 + np.argsort(-corr[0, 1:])])
        corr = corr[np.ix_(order, order)]
        costs = np.concatenate(
            [[1.0], np.sort(10.0 ** rng.uniform(-2.0, 0.0, size=num_lowfi))[::-1]]
        )
        return ModelEnsembleSpec(cov=corr, costs=costs)
    raise RuntimeError(f"rejection sampling failed after {max_attempts} attempts")
