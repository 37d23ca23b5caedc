"""Independent reference implementations used only to check the library.

These deliberately take different numerical routes from the production code:
the constrained minimizer parameterizes the feasible set through a null-space
basis and solves a dense reduced system, and the allocation oracle enumerates
every feasible integer allocation.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.linalg

from gacv.allocation import group_costs, mlblue_allocation_variance
from gacv.grouping import GroupScheme, stack_restrictions


def nullspace_optimal_weights(C: np.ndarray, scheme: GroupScheme) -> tuple[np.ndarray, float]:
    """Minimize beta' C beta subject to R beta = e0 via null-space reduction.

    beta = beta_p + N t with R beta_p = e0 and N spanning null(R); the
    reduced problem solves (N' C N) t = -N' C beta_p.
    """
    R = stack_restrictions(scheme)
    e0 = np.zeros(scheme.num_models)
    e0[0] = 1.0
    beta_p, *_ = np.linalg.lstsq(R, e0, rcond=None)
    N = scipy.linalg.null_space(R)
    if N.shape[1] == 0:
        return beta_p, float(beta_p @ C @ beta_p)
    t = np.linalg.solve(N.T @ C @ N, -N.T @ C @ beta_p)
    beta = beta_p + N @ t
    return beta, float(beta @ C @ beta)


def random_spd_block_covariance(scheme: GroupScheme, rng: np.random.Generator) -> np.ndarray:
    """Random symmetric positive definite matrix sized to the scheme."""
    n = scheme.total_size
    A = rng.standard_normal((n, 2 * n))
    return A @ A.T / (2 * n) + 1e-3 * np.eye(n)


def random_model_covariance(num_models: int, rng: np.random.Generator) -> np.ndarray:
    A = rng.standard_normal((num_models, 2 * num_models))
    cov = A @ A.T / (2 * num_models)
    return cov + 1e-3 * np.eye(num_models)


def exactly_unbiased_weights(scheme: GroupScheme, rng: np.random.Generator):
    """Random weights whose per-model totals cancel bitwise.

    Model 0 puts weight 1 in one group; every low-fidelity model pairs
    consecutive containing groups with values +v / -v (one leftover group
    gets zero), so column sums are exactly zero in sequential summation and
    the positive and negative parts are identical multisets.
    """
    from gacv.weights import WeightSet

    columns = np.zeros((scheme.num_groups, scheme.num_models))
    hosts = [k for k, g in enumerate(scheme.groups) if 0 in g]
    columns[rng.choice(hosts), 0] = 1.0
    for model in range(1, scheme.num_models):
        holders = [k for k, g in enumerate(scheme.groups) if model in g]
        for a, b in zip(holders[0::2], holders[1::2]):
            v = float(rng.standard_normal())
            columns[a, model] = v
            columns[b, model] = -v
    per_group = tuple(
        np.array([columns[k, l] for l in g]) for k, g in enumerate(scheme.groups)
    )
    return WeightSet(per_group)


def exhaustive_allocation_search(spec, scheme, budget, m_min=1):
    """Best integer allocation by full enumeration (desk scale only)."""
    c = group_costs(scheme, spec.costs)
    K = scheme.num_groups
    maxes = [int((budget - m_min * (c.sum() - c[k])) // c[k]) for k in range(K)]
    best_m, best_phi = None, np.inf
    count = 0
    for m in itertools.product(*[range(m_min, mx + 1) for mx in maxes]):
        m = np.array(m, dtype=float)
        if m @ c > budget + 1e-9:
            continue
        count += 1
        phi = mlblue_allocation_variance(spec, scheme, m)
        if phi < best_phi:
            best_phi, best_m = phi, m
    return best_m, best_phi, count
