"""Estimator-level block covariance assembly.

Within a group, Monte Carlo mean estimators share that group's samples;
across groups, sample sets may be disjoint, nested, or partially overlapping.
For groups k and k' drawing ``m_k`` and ``m_k'`` samples with ``o`` shared,
the covariance between their mean estimators of models i and j is
``o / (m_k * m_k') * cov(Q_i, Q_j)``: only shared draws correlate in an
i.i.d. stream.  Nested sets reduce to the familiar ``1 / max(m_k, m_k')``
scaling and disjoint sets to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grouping import GroupScheme

__all__ = [
    "ModelEnsembleSpec",
    "IndexSet",
    "SampleDesign",
    "BlockCovariance",
    "overlap_counts",
    "assemble_block_covariance",
    "independent_block_covariance",
    "spd_check",
    "is_optimizable",
]

#: Scale-invariant cutoff: a design is optimizable iff the smallest eigenvalue
#: of its block covariance exceeds SPD_RTOL * trace(C) / dim(C).
SPD_RTOL = 1e-10


@dataclass(frozen=True)
class ModelEnsembleSpec:
    """Ground truth for a model ensemble.

    Parameters
    ----------
    cov : (L+1, L+1) array
        Symmetric positive definite model covariance.
    costs : (L+1,) array
        Strictly positive cost per evaluation of each model.
    means : (L+1,) array, optional
        Model means; only the simulator uses them.  Defaults to zero.
    """

    cov: np.ndarray
    costs: np.ndarray
    means: np.ndarray = field(default=None)

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        costs = np.array(self.costs, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got {cov.shape}")
        n = cov.shape[0]
        if costs.shape != (n,):
            raise ValueError(f"costs shape {costs.shape} does not match {n} models")
        if np.any(costs <= 0):
            raise ValueError("costs must be strictly positive")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        min_eig = float(np.linalg.eigvalsh(cov)[0])
        if min_eig <= 1e-10 * np.trace(cov):
            raise ValueError(f"covariance not positive definite (min eigenvalue {min_eig:.3e})")
        means = self.means
        means = np.zeros(n) if means is None else np.array(means, dtype=float)
        if means.shape != (n,):
            raise ValueError(f"means shape {means.shape} does not match {n} models")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "means", means)

    @property
    def num_models(self) -> int:
        return self.cov.shape[0]

    @property
    def num_lowfi(self) -> int:
        return self.num_models - 1

    def to_json(self) -> str:
        return json.dumps(
            {"cov": self.cov.tolist(), "costs": self.costs.tolist(), "means": self.means.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelEnsembleSpec":
        data = json.loads(text)
        return cls(
            cov=np.array(data["cov"], dtype=float),
            costs=np.array(data["costs"], dtype=float),
            means=np.array(data["means"], dtype=float) if "means" in data else None,
        )


class IndexSet:
    """Finite set of sample indices stored as disjoint half-open intervals.

    Keeps overlap computations O(number of runs) so prefix designs with very
    large counts stay cheap.
    """

    __slots__ = ("intervals",)

    def __init__(self, intervals: Iterable[tuple[int, int]]):
        merged: list[list[int]] = []
        for lo, hi in sorted((int(lo), int(hi)) for lo, hi in intervals):
            if lo < 0:
                raise ValueError("sample indices must be non-negative")
            if hi <= lo:
                continue
            if merged and lo <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        self.intervals: tuple[tuple[int, int], ...] = tuple((lo, hi) for lo, hi in merged)

    @classmethod
    def from_range(cls, lo: int, hi: int) -> "IndexSet":
        return cls([(lo, hi)])

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "IndexSet":
        return cls([(i, i + 1) for i in indices])

    @property
    def size(self) -> int:
        return sum(hi - lo for lo, hi in self.intervals)

    @property
    def stop(self) -> int:
        """One past the largest index (0 for the empty set)."""
        return self.intervals[-1][1] if self.intervals else 0

    def intersection_size(self, other: "IndexSet") -> int:
        total = 0
        for lo1, hi1 in self.intervals:
            for lo2, hi2 in other.intervals:
                total += max(0, min(hi1, hi2) - max(lo1, lo2))
        return total

    def to_indices(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(lo, hi) for lo, hi in self.intervals] or [np.empty(0, dtype=int)]
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, IndexSet) and self.intervals == other.intervals

    def __hash__(self) -> int:
        return hash(self.intervals)

    def __repr__(self) -> str:
        return f"IndexSet({list(self.intervals)})"


@dataclass(frozen=True)
class SampleDesign:
    """Per-group index sets into one global i.i.d. sample stream.

    Encoding overlaps through a shared stream keeps every pairwise overlap
    mutually consistent; arbitrary overlap matrices need not be realizable.
    """

    scheme: GroupScheme
    index_sets: tuple[IndexSet, ...]

    def __post_init__(self):
        sets = tuple(self.index_sets)
        if len(sets) != self.scheme.num_groups:
            raise ValueError(
                f"{len(sets)} index sets for {self.scheme.num_groups} groups"
            )
        for k, s in enumerate(sets):
            if s.size < 1:
                raise ValueError(f"empty group: group {k} has no samples")
        object.__setattr__(self, "index_sets", sets)

    @property
    def counts(self) -> np.ndarray:
        """Per-group sample counts m^k."""
        return np.array([s.size for s in self.index_sets], dtype=int)

    @property
    def stream_length(self) -> int:
        """Number of stream rows needed to realize the design."""
        return max(s.stop for s in self.index_sets)

    @classmethod
    def from_ranges(cls, scheme: GroupScheme, ranges: Iterable[tuple[int, int]]) -> "SampleDesign":
        return cls(scheme, tuple(IndexSet.from_range(lo, hi) for lo, hi in ranges))

    @classmethod
    def disjoint(cls, scheme: GroupScheme, counts: Sequence[int]) -> "SampleDesign":
        """Consecutive non-overlapping ranges of the given sizes."""
        edges = np.concatenate([[0], np.cumsum(np.asarray(counts, dtype=int))])
        return cls.from_ranges(scheme, [(edges[k], edges[k + 1]) for k in range(len(counts))])

    @classmethod
    def nested_prefixes(cls, scheme: GroupScheme, counts: Sequence[int]) -> "SampleDesign":
        """Group k draws the first ``counts[k]`` stream samples."""
        return cls.from_ranges(scheme, [(0, int(m)) for m in counts])

    def to_json(self) -> str:
        payload = {"groups": [list(g) for g in self.scheme.groups]}
        if all(len(s.intervals) == 1 for s in self.index_sets):
            payload["index_ranges"] = [list(s.intervals[0]) for s in self.index_sets]
        else:
            payload["index_sets"] = [s.to_indices().tolist() for s in self.index_sets]
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str, num_lowfi: int | None = None) -> "SampleDesign":
        data = json.loads(text)
        scheme = GroupScheme.from_subsets(data["groups"], num_lowfi)
        if "index_ranges" in data:
            sets = tuple(IndexSet.from_range(lo, hi) for lo, hi in data["index_ranges"])
        elif "index_sets" in data:
            sets = tuple(IndexSet.from_indices(ix) for ix in data["index_sets"])
        else:
            raise ValueError("design JSON needs 'index_ranges' or 'index_sets'")
        return cls(scheme, sets)


@dataclass(frozen=True)
class BlockCovariance:
    """Covariance of the stacked per-group estimators, with block structure."""

    matrix: np.ndarray
    group_sizes: tuple[int, ...]

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        n = sum(self.group_sizes)
        if matrix.shape != (n, n):
            raise ValueError(f"matrix shape {matrix.shape} does not match group sizes {self.group_sizes}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)])

    def block(self, k: int, kp: int) -> np.ndarray:
        off = self.offsets
        return self.matrix[off[k]:off[k + 1], off[kp]:off[kp + 1]]


def overlap_counts(design: SampleDesign) -> np.ndarray:
    """K x K matrix of pairwise shared-sample counts; diagonal is m^k."""
    K = design.scheme.num_groups
    o = np.zeros((K, K), dtype=int)
    for k in range(K):
        o[k, k] = design.index_sets[k].size
        for kp in range(k + 1, K):
            o[k, kp] = o[kp, k] = design.index_sets[k].intersection_size(design.index_sets[kp])
    return o


def assemble_block_covariance(spec: ModelEnsembleSpec, design: SampleDesign) -> BlockCovariance:
    """Block covariance of the group Monte Carlo mean estimators.

    Block (k, k') entry (i, j) is ``o_kk' / (m_k * m_k') * cov[g_k[i], g_k'[j]]``
    where ``o`` are the shared-sample counts.  Nested designs reproduce the
    ``1/max`` scaling exactly and disjoint designs are block diagonal.
    """
    scheme = design.scheme
    if spec.num_models != scheme.num_models:
        raise ValueError(
            f"spec has {spec.num_models} models, scheme expects {scheme.num_models}"
        )
    o = overlap_counts(design)
    m = design.counts
    off = scheme.offsets
    C = np.zeros((scheme.total_size, scheme.total_size))
    for k, gk in enumerate(scheme.groups):
        for kp, gkp in enumerate(scheme.groups):
            if o[k, kp] == 0:
                continue
            scale = o[k, kp] / (m[k] * m[kp])
            C[off[k]:off[k + 1], off[kp]:off[kp + 1]] = scale * spec.cov[np.ix_(gk, gkp)]
    return BlockCovariance(C, scheme.sizes)


def independent_block_covariance(
    spec: ModelEnsembleSpec, scheme: GroupScheme, counts: Sequence[int]
) -> BlockCovariance:
    """Block-diagonal covariance for independently sampled groups.

    Each diagonal block is the model covariance restricted to the group,
    scaled by ``1/m^k``; equal to :func:`assemble_block_covariance` on any
    pairwise-disjoint design with the same counts.
    """
    counts = np.asarray(counts)
    if counts.shape != (scheme.num_groups,):
        raise ValueError(f"{counts.shape} counts for {scheme.num_groups} groups")
    if np.any(counts < 1):
        raise ValueError("empty group: all counts must be >= 1")
    off = scheme.offsets
    C = np.zeros((scheme.total_size, scheme.total_size))
    for k, gk in enumerate(scheme.groups):
        C[off[k]:off[k + 1], off[k]:off[k + 1]] = spec.cov[np.ix_(gk, gk)] / counts[k]
    return BlockCovariance(C, scheme.sizes)


def spd_check(C: BlockCovariance | np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    The caller decides invertibility against its own tolerance; see
    :func:`is_optimizable` for the default cutoff.
    """
    matrix = C.matrix if isinstance(C, BlockCovariance) else np.asarray(C, dtype=float)
    scale = np.abs(matrix).max() or 1.0
    if np.abs(matrix - matrix.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(matrix)[0])


def is_optimizable(C: BlockCovariance | np.ndarray) -> bool:
    """True when the covariance is safely invertible for weight optimization."""
    matrix = C.matrix if isinstance(C, BlockCovariance) else np.asarray(C, dtype=float)
    return spd_check(matrix) > SPD_RTOL * np.trace(matrix) / matrix.shape[0]
