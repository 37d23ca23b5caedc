"""Model-group index machinery.

A model ensemble has one high-fidelity model (index 0) and ``L`` low-fidelity
models (indices 1..L).  Estimators are organized into groups, where each group
is a non-empty subset of ``{0, .., L}`` whose estimators share one sample set.
Groups are represented by their lexicographic multi-index (the sorted member
tuple); restriction matrices are materialized on demand since every real
operation is a gather or scatter along the multi-index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GroupScheme",
    "lex_multi_index",
    "inverse_index",
    "restriction_matrix",
    "zero_fill",
    "stack_restrictions",
]


def lex_multi_index(members: Iterable[int]) -> tuple[int, ...]:
    """Sorted multi-index of a model subset.  Raises on an empty group."""
    mi = tuple(sorted(set(int(m) for m in members)))
    if not mi:
        raise ValueError("empty group")
    if mi[0] < 0:
        raise ValueError(f"negative model index {mi[0]}")
    return mi


def inverse_index(mi: Sequence[int], model: int) -> int:
    """Position of ``model`` within the multi-index ``mi``."""
    try:
        return tuple(mi).index(model)
    except ValueError:
        raise ValueError(f"model {model} not in group {tuple(mi)}") from None


def restriction_matrix(mi: Sequence[int], num_lowfi: int) -> np.ndarray:
    """Dense binary gather matrix R with shape ``(len(mi), num_lowfi + 1)``.

    Row i holds a single one in column ``mi[i]`` so that ``R @ arange(L+1)``
    reproduces the multi-index.
    """
    mi = tuple(mi)
    if not mi:
        raise ValueError("empty group")
    if max(mi) > num_lowfi:
        raise ValueError(f"model index {max(mi)} exceeds L={num_lowfi}")
    R = np.zeros((len(mi), num_lowfi + 1))
    R[np.arange(len(mi)), mi] = 1.0
    return R


def zero_fill(beta: Sequence[float], mi: Sequence[int], num_lowfi: int) -> np.ndarray:
    """Scatter a per-group weight vector into a length-``L+1`` vector.

    Equivalent to ``restriction_matrix(mi, L).T @ beta``; entries for models
    outside the group are exactly zero.
    """
    beta = np.asarray(beta, dtype=float)
    mi = tuple(mi)
    if beta.shape != (len(mi),):
        raise ValueError(f"weight vector has length {beta.shape}, group has {len(mi)} models")
    if mi and max(mi) > num_lowfi:
        raise ValueError(f"model index {max(mi)} exceeds L={num_lowfi}")
    out = np.zeros(num_lowfi + 1)
    out[list(mi)] = beta
    return out


@dataclass(frozen=True)
class GroupScheme:
    """Ordered collection of model groups over models ``{0, .., L}``.

    Parameters
    ----------
    num_lowfi : int
        Highest model index L (model 0 is the high-fidelity model).
    groups : tuple of tuple of int
        One multi-index per group, in user-supplied order.  Order is
        preserved because weights are reported per group.
    """

    num_lowfi: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.num_lowfi < 0:
            raise ValueError("num_lowfi must be >= 0")
        if not self.groups:
            raise ValueError("empty scheme")
        normalized = tuple(lex_multi_index(g) for g in self.groups)
        for mi in normalized:
            if mi[-1] > self.num_lowfi:
                raise ValueError(f"model index {mi[-1]} exceeds L={self.num_lowfi}")
        object.__setattr__(self, "groups", normalized)

    @classmethod
    def from_subsets(cls, subsets: Iterable[Iterable[int]], num_lowfi: int | None = None) -> "GroupScheme":
        groups = tuple(lex_multi_index(s) for s in subsets)
        if num_lowfi is None:
            num_lowfi = max(mi[-1] for mi in groups)
        return cls(num_lowfi, groups)

    @property
    def num_models(self) -> int:
        return self.num_lowfi + 1

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def offsets(self) -> np.ndarray:
        """Prefix sums of group sizes; ``offsets[k]`` starts group k's block."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def total_size(self) -> int:
        return sum(self.sizes)

    def covers_all_models(self) -> bool:
        seen = set()
        for g in self.groups:
            seen.update(g)
        return seen == set(range(self.num_models))

    def membership_counts(self) -> np.ndarray:
        """Number of groups containing each model."""
        counts = np.zeros(self.num_models, dtype=int)
        for g in self.groups:
            counts[list(g)] += 1
        return counts

    def to_json(self) -> str:
        return json.dumps([list(g) for g in self.groups])

    @classmethod
    def from_json(cls, text: str, num_lowfi: int | None = None) -> "GroupScheme":
        return cls.from_subsets(json.loads(text), num_lowfi)


def stack_restrictions(scheme: GroupScheme) -> np.ndarray:
    """Horizontal concatenation of the transposed restriction matrices.

    Shape is ``(L+1, sum of group sizes)``.  Applied to the stacked per-group
    weight vector it yields the sum of the zero-filled weight vectors, i.e.
    the per-model total weights.
    """
    R = np.zeros((scheme.num_models, scheme.total_size))
    off = 0
    for mi in scheme.groups:
        R[list(mi), np.arange(off, off + len(mi))] = 1.0
        off += len(mi)
    return R
