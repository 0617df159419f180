"""Disjoint partitions of a flat parameter vector into groups."""

import numpy as np

from .numerics import ContractError, as_vector

__all__ = ["GroupPartition", "contiguous", "group_norms", "active_groups"]


class GroupPartition:
    """Ordered partition of the indices ``0..p-1`` into ``J`` nonempty groups.

    Groups are kept as explicit index arrays so strided layouts (e.g. the
    columns of a row-major weight matrix) work the same way as contiguous
    blocks.

    Parameters
    ----------
    groups : sequence of sequences of int
        Pairwise disjoint, nonempty, and jointly covering ``range(p)``.
    """

    def __init__(self, groups):
        groups = [np.asarray(g, dtype=np.intp).ravel() for g in groups]
        if not groups:
            raise ContractError("a partition needs at least one group")
        if any(g.size == 0 for g in groups):
            raise ContractError("groups must be nonempty")
        flat = np.concatenate(groups)
        p = flat.size
        if np.any(flat < 0) or np.any(flat >= p) or np.unique(flat).size != p:
            raise ContractError("groups must be disjoint and cover 0..p-1")
        self.groups = groups
        self.p = p
        self.sizes = np.array([g.size for g in groups], dtype=np.intp)
        labels = np.empty(p, dtype=np.intp)
        for j, g in enumerate(groups):
            labels[g] = j
        self.labels = labels
        self._contiguous = all(
            np.array_equal(g, np.arange(g[0], g[0] + g.size)) for g in groups
        ) and np.array_equal(flat, np.arange(p))

    @property
    def n_groups(self):
        return len(self.groups)

    def __len__(self):
        return len(self.groups)

    def __eq__(self, other):
        if not isinstance(other, GroupPartition):
            return NotImplemented
        return len(self.groups) == len(other.groups) and all(
            np.array_equal(a, b) for a, b in zip(self.groups, other.groups)
        )

    def __repr__(self):
        return f"GroupPartition(J={self.n_groups}, p={self.p})"

    def group_sum(self, values):
        """Per-group sums of a length-``p`` array."""
        return np.bincount(self.labels, weights=values, minlength=self.n_groups)

    def to_json(self):
        if self._contiguous:
            return {"sizes": [int(s) for s in self.sizes]}
        return {"groups": [[int(i) for i in g] for g in self.groups]}

    @classmethod
    def from_json(cls, obj):
        if "sizes" in obj:
            return contiguous(obj["sizes"])
        if "groups" in obj:
            return cls(obj["groups"])
        raise ContractError("partition JSON needs a 'sizes' or 'groups' key")


def contiguous(sizes):
    """Partition into consecutive blocks of the given sizes."""
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ContractError("sizes must be nonempty")
    if any(s < 1 for s in sizes):
        raise ContractError("all group sizes must be >= 1")
    bounds = np.cumsum([0] + sizes)
    return GroupPartition([np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])])


def group_norms(partition, w):
    """Euclidean norm of each group of ``w``."""
    w = as_vector(w, "w")
    if w.size != partition.p:
        raise ContractError(f"expected length {partition.p}, got {w.size}")
    return np.sqrt(partition.group_sum(w * w))


def active_groups(partition, w, eps_tiny=1e-6):
    """Indices of groups whose norm is at least ``eps_tiny``.

    With ``eps_tiny=0`` only exactly-zero groups are excluded.
    """
    if eps_tiny < 0:
        raise ContractError("eps_tiny must be >= 0")
    if eps_tiny == 0:
        # test entries directly: squared norms of tiny groups underflow to 0
        nonzero = partition.group_sum((as_vector(w, "w") != 0).astype(float))
        return [int(j) for j in np.flatnonzero(nonzero > 0)]
    norms = group_norms(partition, w)
    return [int(j) for j in np.flatnonzero(norms >= eps_tiny)]
