"""Group construction, sample accounting, and budgeted allocation.

The banded grouping limits each group to at most M consecutive models:
group g covers models ``{g, .., min(g+M-1, L)}`` for ``g = 0..L``.  An
independent-group allocation over such a scheme converts into an equivalent
nested-sample design (group g draws the first ``mhat[g]`` samples of one
shared stream) with identical per-model evaluation counts and identical
total cost.

The budgeted allocation minimizes the multilevel-BLUE variance
``phi(m) = e0' (sum_k m^k R^k' cov[S^k]^-1 R^k)^-1 e0`` over continuous
``m >= m_min`` under a linear cost constraint.  ``phi`` is convex (it is the
epigraph objective of the usual semidefinite formulation), so projected
gradient descent with a backtracking line search finds the optimum; the
result is rounded to integers with a greedy budget repair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .covariance import ModelEnsembleSpec, SampleDesign
from .grouping import GroupScheme
from .weights import mlblue_gram

__all__ = [
    "SaobScheme",
    "AllocationResult",
    "saob_groups",
    "model_eval_counts_mlblue",
    "nested_conversion",
    "nested_sample_design",
    "group_costs",
    "total_cost",
    "mlblue_allocation_variance",
    "optimize_mlblue_allocation",
]


@dataclass(frozen=True)
class SaobScheme:
    """Banded grouping with L+1 groups of at most M consecutive models."""

    num_lowfi: int
    max_group_size: int
    scheme: GroupScheme

    @property
    def num_groups(self) -> int:
        return self.scheme.num_groups


def saob_groups(num_lowfi: int, max_group_size: int) -> SaobScheme:
    """Banded grouping: group g covers ``{g, .., min(g + M - 1, L)}``.

    ``M = L + 1`` gives the fully nested hierarchy; ``M = 1`` singletons.
    """
    L, M = num_lowfi, max_group_size
    if not 1 <= M <= L + 1:
        raise ValueError(f"max group size {M} outside 1..{L + 1}")
    groups = tuple(tuple(range(g, min(g + M - 1, L) + 1)) for g in range(L + 1))
    return SaobScheme(L, M, GroupScheme(L, groups))


def model_eval_counts_mlblue(scheme: GroupScheme, counts: Sequence[int]) -> np.ndarray:
    """Per-model evaluation totals for independent groups: n_l = sum of m^k over groups containing l."""
    counts = np.asarray(counts)
    if counts.shape != (scheme.num_groups,):
        raise ValueError(f"{counts.shape} counts for {scheme.num_groups} groups")
    n = np.zeros(scheme.num_models, dtype=counts.dtype)
    for mk, mi in zip(counts, scheme.groups):
        n[list(mi)] += mk
    return n


def nested_conversion(counts: Sequence[int], saob: SaobScheme) -> np.ndarray:
    """Nested-sample group sizes equivalent to an independent-group allocation.

    ``mhat[0] = m[0]`` and ``mhat[l] = sum(m[max(l-M+1, 0) .. l])``; under
    nested accounting (model l's evaluations come from its largest containing
    group, group l) the per-model totals match the independent accounting
    exactly.  ``mhat`` need not be monotone.
    """
    m = np.asarray(counts)
    if m.shape != (saob.num_groups,):
        raise ValueError(f"{m.shape} counts for {saob.num_groups} groups")
    M = saob.max_group_size
    mhat = np.array([m[max(l - M + 1, 0): l + 1].sum() for l in range(saob.num_lowfi + 1)])
    return mhat


def nested_sample_design(mhat: Sequence[int], saob: SaobScheme) -> SampleDesign:
    """Prefix design: group k draws the first ``mhat[k]`` stream samples.

    Set inclusion between any two groups follows their sizes, so every
    pairwise overlap is ``min(mhat[k], mhat[k'])``.
    """
    mhat = np.asarray(mhat)
    if mhat.shape != (saob.num_groups,):
        raise ValueError(f"{mhat.shape} sizes for {saob.num_groups} groups")
    return SampleDesign.nested_prefixes(saob.scheme, mhat)


def group_costs(scheme: GroupScheme, model_costs: Sequence[float]) -> np.ndarray:
    """Cost of one sample of each group: the summed costs of its members."""
    w = np.asarray(model_costs, dtype=float)
    if w.shape != (scheme.num_models,):
        raise ValueError(f"{w.shape} costs for {scheme.num_models} models")
    return np.array([w[list(mi)].sum() for mi in scheme.groups])


def total_cost(scheme: GroupScheme, counts: Sequence[float], model_costs: Sequence[float]) -> float:
    """Total evaluation cost of an independent-group allocation."""
    counts = np.asarray(counts, dtype=float)
    return float(counts @ group_costs(scheme, model_costs))


def mlblue_allocation_variance(
    spec: ModelEnsembleSpec, scheme: GroupScheme, counts: Sequence[float]
) -> float:
    """Optimal multilevel-BLUE variance of a (possibly fractional) allocation."""
    G = mlblue_gram(spec, scheme, counts)
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    return float(e0 @ scipy.linalg.solve(G, e0, assume_a="pos"))


@dataclass(frozen=True)
class AllocationResult:
    """Integer allocation plus its predicted variance and diagnostics."""

    counts: np.ndarray
    variance: float
    counts_continuous: np.ndarray
    variance_continuous: float
    cost: float
    iterations: int
    converged: bool


def _project_budget(m: np.ndarray, c: np.ndarray, budget: float, m_min: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{m >= m_min, c . m <= budget}``.

    The active-budget case is ``max(m_min, m - tau * c)``; the clipped cost
    is piecewise linear and decreasing in ``tau``, so the crossing is found
    exactly by walking the clamp breakpoints.
    """
    m = np.maximum(m, m_min)
    excess = float(m @ c - budget)
    if excess <= 0:
        return m
    # breakpoint where coordinate k clamps to its lower bound
    taus = (m - m_min) / c
    order = np.argsort(taus)
    active_c2 = float(c @ c)  # sum of c_k^2 over unclamped coordinates
    tau_prev = 0.0
    for k in order:
        # on this segment cost(tau) = cost(tau_prev) - (tau - tau_prev) * active_c2
        if active_c2 > 0 and excess <= (taus[k] - tau_prev) * active_c2:
            tau = tau_prev + excess / active_c2
            return np.maximum(m - tau * c, m_min)
        excess -= (taus[k] - tau_prev) * active_c2
        active_c2 -= float(c[k] * c[k])
        tau_prev = float(taus[k])
    # everything clamped: the lower-bound corner is the projection
    return m_min.copy()


def _phi_and_grad(spec, scheme, m, atoms):
    """phi(m) and its gradient -(u' A_k u) with u = M(m)^-1 e0."""
    G = sum(mk * A for mk, A in zip(m, atoms))
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    u = scipy.linalg.solve(G, e0, assume_a="pos")
    phi = float(u[0])
    grad = np.array([-(u @ A @ u) for A in atoms])
    return phi, grad


def optimize_mlblue_allocation(
    spec: ModelEnsembleSpec,
    scheme: GroupScheme,
    budget: float,
    m_min: float | Sequence[float] = 1.0,
    max_iter: int = 100_000,
    rel_tol: float = 1e-10,
    patience: int = 10,
) -> AllocationResult:
    """Budgeted sample allocation minimizing the ML-BLUE variance.

    Runs projected gradient descent on the convex relaxation (continuous
    counts, cost simplex intersected with ``m >= m_min``), then floors the
    solution and greedily spends the remaining budget on whichever group
    buys the largest variance decrease per unit cost.

    Raises
    ------
    ValueError
        If the budget cannot afford ``m_min`` samples in every group.
    """
    if not scheme.covers_all_models():
        raise ValueError("scheme leaves some model uncovered")
    c = group_costs(scheme, spec.costs)
    m_min = np.broadcast_to(np.asarray(m_min, dtype=float), (scheme.num_groups,)).copy()
    min_cost = float(m_min @ c)
    if min_cost > budget * (1 + 1e-12):
        raise ValueError(
            f"budget below minimum allocation: need {min_cost:.6g}, have {budget:.6g}"
        )

    atoms = []
    for mi in scheme.groups:
        idx = list(mi)
        A = np.zeros((scheme.num_models, scheme.num_models))
        A[np.ix_(idx, idx)] = np.linalg.inv(spec.cov[np.ix_(idx, idx)])
        atoms.append(A)

    # start from the uniform feasible point: spend leftover budget equally
    slack = max(budget - min_cost, 0.0)
    m = m_min + slack / (scheme.num_groups * c)
    phi, grad = _phi_and_grad(spec, scheme, m, atoms)
    step = 1.0
    stall = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # backtracking line search on the projected step
        improved = False
        for _ in range(60):
            trial = _project_budget(m - step * grad, c, budget, m_min)
            phi_trial, grad_trial = _phi_and_grad(spec, scheme, trial, atoms)
            if phi_trial <= phi:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        rel_drop = (phi - phi_trial) / phi if phi > 0 else 0.0
        m, phi, grad = trial, phi_trial, grad_trial
        step *= 2.0
        stall = stall + 1 if rel_drop < rel_tol else 0
        if stall >= patience:
            converged = True
            break

    m_cont = m
    phi_cont = phi

    def phi_at(counts: np.ndarray) -> float:
        G = sum(mk * A for mk, A in zip(counts, atoms))
        e0 = np.zeros(scheme.num_models)
        e0[0] = 1.0
        return float(scipy.linalg.solve(G, e0, assume_a="pos")[0])

    # integer rounding with greedy budget repair
    m_int = np.maximum(np.floor(m_cont), np.ceil(m_min - 1e-9)).astype(float)
    remaining = budget - m_int @ c
    phi_int = phi_at(m_int)
    while True:
        best_gain, best_k = 0.0, -1
        for k in range(scheme.num_groups):
            if c[k] > remaining + 1e-12:
                continue
            bumped = m_int.copy()
            bumped[k] += 1
            gain = (phi_int - phi_at(bumped)) / c[k]
            if gain > best_gain:
                best_gain, best_k = gain, k
        if best_k < 0:
            break
        m_int[best_k] += 1
        remaining -= c[best_k]
        phi_int = phi_at(m_int)

    return AllocationResult(
        counts=m_int.astype(int),
        variance=phi_int,
        counts_continuous=m_cont,
        variance_continuous=phi_cont,
        cost=float(m_int @ c),
        iterations=it,
        converged=converged,
    )
