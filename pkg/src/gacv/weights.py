"""Grouped control-variate weight algebra.

The estimator is a linear combination of per-group, per-model estimators,
``sum_k sum_{l in S^k} beta^k_l Qhat^k_l``.  Its variance is the quadratic
form ``beta' C beta`` over the stacked weights, and it is unbiased for the
high-fidelity mean iff the per-model total weights equal ``e0 = (1,0,..,0)``.
Minimizing the quadratic form under that linear constraint gives the optimal
weights ``C^-1 R' (R C^-1 R')^-1 e0`` with ``R`` the stacked restriction
matrix; specializations for independent groups avoid assembling the full
block matrix.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .covariance import BlockCovariance, ModelEnsembleSpec
from .grouping import GroupScheme, stack_restrictions, zero_fill

__all__ = [
    "WeightSet",
    "AcvDecomposition",
    "DegenerateDesignError",
    "InfeasibleConstraintError",
    "IllConditionedWarning",
    "UNBIASED_ATOL",
    "estimator_variance",
    "check_unbiased",
    "optimal_weights",
    "optimal_variance",
    "independent_optimal_weights",
    "mlblue_optimal_weights",
    "mlblue_gram",
    "acv_decomposition",
    "ensemble_acv_weights",
]

#: Absolute tolerance on the unbiasedness residual.
UNBIASED_ATOL = 1e-10

#: Condition number beyond which operations warn about ill conditioning.
CONDITION_WARN = 1e12


class DegenerateDesignError(ValueError):
    """The estimator covariance is singular (e.g. duplicated estimators)."""


class InfeasibleConstraintError(ValueError):
    """The unbiasedness constraint cannot be met (e.g. an uncovered model)."""


class IllConditionedWarning(UserWarning):
    """The covariance is numerically usable but badly conditioned."""


@dataclass(frozen=True)
class WeightSet:
    """Per-group coefficient vectors aligned to a :class:`GroupScheme`."""

    per_group: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "per_group", tuple(np.asarray(b, dtype=float) for b in self.per_group)
        )

    @classmethod
    def from_stacked(cls, scheme: GroupScheme, stacked: Sequence[float]) -> "WeightSet":
        stacked = np.asarray(stacked, dtype=float)
        if stacked.shape != (scheme.total_size,):
            raise ValueError(f"stacked length {stacked.shape} != {scheme.total_size}")
        off = scheme.offsets
        return cls(tuple(stacked[off[k]:off[k + 1]] for k in range(scheme.num_groups)))

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.per_group)

    def zero_filled(self, scheme: GroupScheme) -> np.ndarray:
        """(K, L+1) matrix of zero-filled per-group weight vectors."""
        if tuple(len(b) for b in self.per_group) != scheme.sizes:
            raise ValueError("weight set does not align with scheme")
        return np.vstack(
            [zero_fill(b, mi, scheme.num_lowfi) for b, mi in zip(self.per_group, scheme.groups)]
        )

    def to_json(self) -> str:
        return json.dumps([b.tolist() for b in self.per_group])

    @classmethod
    def from_json(cls, text: str) -> "WeightSet":
        return cls(tuple(np.asarray(b, dtype=float) for b in json.loads(text)))


def estimator_variance(weights: WeightSet, C: BlockCovariance) -> float:
    """Quadratic form ``beta' C beta`` over the stacked weights."""
    beta = weights.stacked()
    if beta.shape[0] != C.dim:
        raise ValueError(f"stacked weights ({beta.shape[0]}) do not match covariance ({C.dim})")
    return float(beta @ C.matrix @ beta)


def check_unbiased(weights: WeightSet, scheme: GroupScheme) -> np.ndarray:
    """Residual of the unbiasedness constraint, per model.

    Returns ``sum_k zero_fill(beta^k) - e0``; the estimator is unbiased iff
    the max-norm is below :data:`UNBIASED_ATOL`.
    """
    residual = weights.zero_filled(scheme).sum(axis=0)
    residual[0] -= 1.0
    return residual


def _condition_number(eigvals: np.ndarray) -> float:
    lo, hi = abs(eigvals[0]), abs(eigvals[-1])
    return np.inf if lo == 0 else hi / lo


#: Relative eigenvalue level treated as exactly singular.  Deliberately at
#: machine precision rather than the conservative optimizability cutoff so
#: that nearly-duplicated groups still solve (with a warning) while exact
#: duplicates error out.
SINGULAR_RTOL = 1e-14


def _factor_covariance(C: BlockCovariance):
    """Cholesky factor of the block covariance, with degeneracy checks."""
    matrix = C.matrix
    scale = np.abs(matrix).max() or 1.0
    if np.abs(matrix - matrix.T).max() > 1e-12 * scale:
        raise ValueError("covariance is not symmetric")
    eigvals = np.linalg.eigvalsh(matrix)
    cond = _condition_number(eigvals)
    if eigvals[0] <= SINGULAR_RTOL * np.trace(matrix) / matrix.shape[0]:
        raise DegenerateDesignError(
            f"degenerate design: covariance is singular or near-singular "
            f"(min eigenvalue {eigvals[0]:.3e}, condition number {cond:.3e})"
        )
    if cond > CONDITION_WARN:
        warnings.warn(
            f"covariance condition number {cond:.3e} exceeds {CONDITION_WARN:.0e}",
            IllConditionedWarning,
            stacklevel=3,
        )
    try:
        return scipy.linalg.cho_factor(matrix), cond
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateDesignError(
            f"degenerate design: factorization failed (condition number {cond:.3e})"
        ) from exc


def _factor_gram(G: np.ndarray, cond_C: float):
    eigvals = np.linalg.eigvalsh(G)
    if eigvals[0] <= SINGULAR_RTOL * np.trace(G) / G.shape[0]:
        raise InfeasibleConstraintError(
            "infeasible constraint: the unbiasedness system is singular "
            "(a model may appear in no group); covariance condition number "
            f"{cond_C:.3e}"
        )
    return scipy.linalg.cho_factor(G)


def _solve_constrained(C: BlockCovariance, scheme: GroupScheme):
    """Stacked optimal weights and variance via two SPD factorizations."""
    if C.group_sizes != scheme.sizes:
        raise ValueError("covariance blocks do not align with scheme")
    if not scheme.covers_all_models():
        raise InfeasibleConstraintError(
            "infeasible constraint: some model appears in no group"
        )
    cho_C, cond = _factor_covariance(C)
    R = stack_restrictions(scheme)
    X = scipy.linalg.cho_solve(cho_C, R.T)  # C^-1 R'
    G = R @ X
    cho_G = _factor_gram(0.5 * (G + G.T), cond)
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    y = scipy.linalg.cho_solve(cho_G, e0)
    return X @ y, float(y[0])


def optimal_weights(C: BlockCovariance, scheme: GroupScheme) -> WeightSet:
    """Variance-minimizing weights subject to unbiasedness.

    Solves ``min beta' C beta  s.t.  R beta = e0`` through one factorization
    of ``C`` and one of the (L+1)-dimensional Gram matrix ``R C^-1 R'``;
    ``C^-1`` is never formed explicitly.

    Raises
    ------
    DegenerateDesignError
        If ``C`` is singular (duplicated estimators in the design).
    InfeasibleConstraintError
        If the constraint cannot be satisfied (uncovered model).
    """
    beta, _ = _solve_constrained(C, scheme)
    return WeightSet.from_stacked(scheme, beta)


def optimal_variance(C: BlockCovariance, scheme: GroupScheme) -> float:
    """Minimum achievable variance, ``e0' (R C^-1 R')^-1 e0``."""
    _, variance = _solve_constrained(C, scheme)
    return variance


def _accumulate_gram(blocks: Sequence[np.ndarray], scheme: GroupScheme):
    """Per-group solves ``C^k^-1 R^k`` and the Gram sum over groups."""
    num_models = scheme.num_models
    solved = []
    G = np.zeros((num_models, num_models))
    for k, (block, mi) in enumerate(zip(blocks, scheme.groups)):
        Rk = np.zeros((len(mi), num_models))
        Rk[np.arange(len(mi)), list(mi)] = 1.0
        try:
            Xk = scipy.linalg.cho_solve(scipy.linalg.cho_factor(block), Rk)
        except scipy.linalg.LinAlgError as exc:
            raise DegenerateDesignError(
                f"degenerate design: group {k} covariance block is singular"
            ) from exc
        solved.append(Xk)
        G += Rk.T @ Xk
    return solved, G


def _independent_solution(blocks: Sequence[np.ndarray], scheme: GroupScheme):
    solved, G = _accumulate_gram(blocks, scheme)
    eigvals = np.linalg.eigvalsh(G)
    if eigvals[0] <= SINGULAR_RTOL * np.trace(G) / G.shape[0]:
        raise InfeasibleConstraintError(
            "infeasible constraint: the per-group Gram sum is singular"
        )
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(0.5 * (G + G.T)), e0)
    weights = WeightSet(tuple(Xk @ y for Xk in solved))
    return weights, float(y[0])


def independent_optimal_weights(
    spec: ModelEnsembleSpec, scheme: GroupScheme, counts: Sequence[int]
) -> tuple[WeightSet, float]:
    """Optimal weights for independently sampled Monte Carlo groups.

    Uses the per-group blocks ``C^k = cov[S^k] / m^k`` and the group-wise
    closed form ``beta^k = C^k^-1 R^k (sum_k R^k' C^k^-1 R^k)^-1 e0`` without
    assembling the block-diagonal covariance.  Agrees with
    :func:`optimal_weights` on :func:`independent_block_covariance`.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (scheme.num_groups,):
        raise ValueError(f"{counts.shape} counts for {scheme.num_groups} groups")
    if np.any(counts < 1):
        raise ValueError("all group counts must be >= 1")
    blocks = [spec.cov[np.ix_(mi, mi)] / mk for mi, mk in zip(scheme.groups, counts)]
    return _independent_solution(blocks, scheme)


def mlblue_gram(spec: ModelEnsembleSpec, scheme: GroupScheme, counts: Sequence[float]) -> np.ndarray:
    """Information matrix ``sum_k m^k R^k' cov[S^k]^-1 R^k`` of the ML-BLUE.

    Accepts fractional counts; the sample-allocation optimizer relaxes the
    integers.
    """
    counts = np.asarray(counts, dtype=float)
    num_models = scheme.num_models
    G = np.zeros((num_models, num_models))
    for mk, mi in zip(counts, scheme.groups):
        idx = list(mi)
        inv = np.linalg.inv(spec.cov[np.ix_(idx, idx)])
        G[np.ix_(idx, idx)] += mk * inv
    return G


def mlblue_optimal_weights(
    spec: ModelEnsembleSpec, scheme: GroupScheme, counts: Sequence[int]
) -> tuple[WeightSet, float]:
    """Optimal multilevel-BLUE weights and variance.

    Monte Carlo specialization of :func:`independent_optimal_weights`:
    ``beta^k = m^k cov[S^k]^-1 R^k (sum_k m^k R^k' cov[S^k]^-1 R^k)^-1 e0``,
    keeping the sample counts factored out of the per-group inverses.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (scheme.num_groups,):
        raise ValueError(f"{counts.shape} counts for {scheme.num_groups} groups")
    if np.any(counts < 1):
        raise ValueError("all group counts must be >= 1")
    G = mlblue_gram(spec, scheme, counts)
    eigvals = np.linalg.eigvalsh(G)
    if eigvals[0] <= SINGULAR_RTOL * np.trace(G) / G.shape[0]:
        raise InfeasibleConstraintError(
            "infeasible constraint: the ML-BLUE information matrix is singular"
        )
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(0.5 * (G + G.T)), e0)
    per_group = []
    for mk, mi in zip(counts, scheme.groups):
        idx = list(mi)
        per_group.append(mk * np.linalg.solve(spec.cov[np.ix_(idx, idx)], y[idx]))
    return WeightSet(tuple(per_group)), float(y[0])


@dataclass(frozen=True)
class AcvDecomposition:
    """Control-variate form of an unbiased grouped weight set.

    ``alpha[l-1]`` is the control weight of low-fidelity model ``l``;
    ``omega_e[l-1]`` / ``omega_mu[l-1]`` hold the length-K convex weights of
    its correlated-mean and mean-estimate terms (empty when ``alpha`` is
    zero and the model drops out).  ``baseline_weights`` are the per-group
    high-fidelity weights, summing to one.
    """

    baseline_weights: np.ndarray
    alpha: np.ndarray
    omega_e: tuple[np.ndarray, ...]
    omega_mu: tuple[np.ndarray, ...]

    def reconstruct_zero_filled(self, num_groups: int) -> np.ndarray:
        """(K, L+1) zero-filled weights ``alpha_l * (omega_e - omega_mu)``.

        Products are evaluated in extended precision so the round trip
        through the ratio weights reproduces the input bit for bit.
        """
        L = len(self.alpha)
        out = np.zeros((num_groups, L + 1))
        out[:, 0] = self.baseline_weights
        for l in range(1, L + 1):
            we, wm = self.omega_e[l - 1], self.omega_mu[l - 1]
            if we.size == 0:
                continue
            a = np.longdouble(self.alpha[l - 1])
            out[:, l] = (a * np.longdouble(we) - a * np.longdouble(wm)).astype(float)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "baseline_weights": self.baseline_weights.tolist(),
                "alpha": self.alpha.tolist(),
                "omega_e": [w.tolist() for w in self.omega_e],
                "omega_mu": [w.tolist() for w in self.omega_mu],
            }
        )


def acv_decomposition(weights: WeightSet, scheme: GroupScheme) -> AcvDecomposition:
    """Rewrite an unbiased grouped weight set as a control-variate estimator.

    For each low-fidelity model the positive zero-filled weights form the
    correlated-mean side and the negative weights the mean-estimate side;
    ``alpha_l`` is the sum of the positive parts, which equals minus the sum
    of the negative parts precisely because the input is unbiased.  Models
    with ``alpha_l = 0`` carry empty weight lists rather than 0/0 ratios.
    """
    residual = check_unbiased(weights, scheme)
    if np.abs(residual).max() > UNBIASED_ATOL:
        raise ValueError(
            "decomposition requires unbiased weights "
            f"(residual max {np.abs(residual).max():.3e})"
        )
    tilde = weights.zero_filled(scheme)  # (K, L+1)
    baseline = tilde[:, 0].copy()
    L = scheme.num_lowfi
    alpha = np.empty(L)
    omega_e: list[np.ndarray] = []
    omega_mu: list[np.ndarray] = []
    empty = np.empty(0)
    for l in range(1, L + 1):
        col = tilde[:, l]
        pos = np.maximum(col, 0.0)
        a = pos.sum()
        alpha[l - 1] = a
        if a == 0.0:
            omega_e.append(empty)
            omega_mu.append(empty)
        else:
            omega_e.append(pos / a)
            omega_mu.append(-np.minimum(col, 0.0) / a)
    return AcvDecomposition(baseline, alpha, tuple(omega_e), tuple(omega_mu))


def ensemble_acv_weights(alpha: Sequence[float], num_groups: int) -> tuple[GroupScheme, WeightSet]:
    """Equally weighted ensemble of K independent control-variate replicates.

    Builds the 2K-group scheme in which groups 1..K hold every model with
    weights ``(1/K, alpha_1/K, .., alpha_L/K)`` and groups K+1..2K hold the
    low-fidelity models with weights ``-alpha_l/K``; always unbiased.
    """
    alpha = np.asarray(alpha, dtype=float)
    if num_groups < 1:
        raise ValueError("need at least one group")
    L = alpha.shape[0]
    if L < 1:
        raise ValueError("need at least one low-fidelity model")
    e_group = tuple(range(L + 1))
    mu_group = tuple(range(1, L + 1))
    scheme = GroupScheme(L, (e_group,) * num_groups + (mu_group,) * num_groups)
    e_beta = np.concatenate([[1.0], alpha]) / num_groups
    mu_beta = -alpha / num_groups
    weights = WeightSet((e_beta,) * num_groups + (mu_beta,) * num_groups)
    return scheme, weights
