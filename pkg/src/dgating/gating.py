"""D-Gating parametrisation, its L2 surrogate penalty, and balance diagnostics.

Each group ``w_j`` of the effective weight is written as ``omega_j`` times the
product of ``D - 1`` scalar gates ``gamma[j, :]``. Factor indices follow a
1-based convention in :func:`imbalance`: index 1 is the vector factor
``omega_j`` and indices ``2..D`` are the gates ``gamma[j, 0..D-2]``.
"""

from dataclasses import dataclass

import numpy as np

from .grouping import GroupPartition, group_norms
from .numerics import ContractError, as_matrix, as_vector

__all__ = [
    "GatedParams",
    "BalanceReport",
    "collapse",
    "gate_products",
    "leave_one_out_products",
    "balanced_from_effective",
    "identity_gated",
    "surrogate_penalty",
    "nonsmooth_penalty",
    "misalignment",
    "squared_factors",
    "imbalance",
    "balance_report",
    "grads_from_effective",
]


@dataclass
class GatedParams:
    """Primary weights ``omega`` (length p) and gates ``gamma`` (J x (D-1))."""

    omega: np.ndarray
    gamma: np.ndarray
    depth: int
    partition: GroupPartition

    def __post_init__(self):
        self.omega = as_vector(self.omega, "omega")
        self.gamma = as_matrix(self.gamma, "gamma")
        self.depth = int(self.depth)
        if self.depth < 2:
            raise ContractError("depth must be >= 2")
        if self.omega.size != self.partition.p:
            raise ContractError(
                f"omega has length {self.omega.size}, partition covers {self.partition.p}"
            )
        if self.gamma.shape != (self.partition.n_groups, self.depth - 1):
            raise ContractError(
                f"gamma must have shape {(self.partition.n_groups, self.depth - 1)}, "
                f"got {self.gamma.shape}"
            )
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.gamma))):
            raise ContractError("gated parameters must be finite")

    def copy(self):
        return GatedParams(self.omega.copy(), self.gamma.copy(), self.depth, self.partition)

    def to_json(self):
        return {
            "depth": self.depth,
            "omega": self.omega.tolist(),
            "gamma": self.gamma.tolist(),
            "partition": self.partition.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        partition = GroupPartition.from_json(obj["partition"])
        depth = int(obj["depth"])
        gamma = np.asarray(obj["gamma"], dtype=np.float64).reshape(partition.n_groups, depth - 1)
        return cls(np.asarray(obj["omega"], dtype=np.float64), gamma, depth, partition)


@dataclass
class BalanceReport:
    per_group_imbalance_max: np.ndarray
    misalignment: float

    @property
    def imbalance_max(self):
        return float(self.per_group_imbalance_max.max())


def gate_products(g):
    """Per-group product of all gates."""
    return g.gamma.prod(axis=1)


def leave_one_out_products(gamma):
    """Matrix whose ``[j, d]`` entry is the product of ``gamma[j, d']`` over ``d' != d``.

    Built by multiplication only, so a zero gate gives well-defined
    (and exact) entries.
    """
    J, k = gamma.shape
    if k == 1:
        return np.ones((J, 1))
    if k == 2:
        return gamma[:, ::-1].copy()
    # prefix[:, d] = prod(gamma[:, :d]), suffix[:, d] = prod(gamma[:, d+1:])
    prefix = np.ones((J, k))
    suffix = np.ones((J, k))
    prefix[:, 1:] = np.cumprod(gamma[:, :-1], axis=1)
    suffix[:, :-1] = np.cumprod(gamma[:, :0:-1], axis=1)[:, ::-1]
    return prefix * suffix


def collapse(g):
    """Effective weight ``w_j = omega_j * prod_d gamma[j, d]``."""
    return g.omega * gate_products(g)[g.partition.labels]


def identity_gated(omega, partition, depth):
    """Gated parameters with all gates set to one, so the collapse equals ``omega``."""
    omega = as_vector(omega, "omega")
    return GatedParams(omega.copy(), np.ones((partition.n_groups, depth - 1)), depth, partition)


def balanced_from_effective(w, partition, depth):
    """Balanced gated representation of ``w``.

    Every gate of group ``j`` is set to ``||w_j||^(1/D)`` and ``omega_j`` to
    ``w_j`` divided by the gate product, so that ``||omega_j||^2`` and every
    squared gate equal ``||w_j||^(2/D)``. Zero groups map to all-zero factors.
    """
    w = as_vector(w, "w")
    if depth < 2:
        raise ContractError("depth must be >= 2")
    norms = group_norms(partition, w)
    r = norms ** (1.0 / depth)
    gamma = np.repeat(r[:, None], depth - 1, axis=1)
    prod = r ** (depth - 1)
    nz = norms > 0
    scale = np.zeros_like(norms)
    scale[nz] = 1.0 / prod[nz]
    omega = w * scale[partition.labels]
    return GatedParams(omega, gamma, depth, partition)


def surrogate_penalty(g):
    """``(||omega||^2 + ||Gamma||_F^2) / D``, without the lambda factor."""
    return float(g.omega @ g.omega + np.sum(g.gamma * g.gamma)) / g.depth


def nonsmooth_penalty(w, partition, depth):
    """``sum_j ||w_j||_2^(2/D)``."""
    if depth < 2:
        raise ContractError("depth must be >= 2")
    return float(np.sum(group_norms(partition, w) ** (2.0 / depth)))


def misalignment(g):
    """Gap between the surrogate penalty and the induced group penalty.

    Non-negative by the AM-GM inequality and zero exactly at balanced
    representations.
    """
    return surrogate_penalty(g) - nonsmooth_penalty(collapse(g), g.partition, g.depth)


def squared_factors(g):
    """``(J, D)`` matrix of ``||omega_j||^2`` followed by the squared gates."""
    om2 = g.partition.group_sum(g.omega * g.omega)
    return np.column_stack([om2, g.gamma * g.gamma])


def imbalance(g, j, d, d2):
    """Signed pair-wise imbalance between factors ``d`` and ``d2`` of group ``j``.

    Factor 1 is ``omega_j`` (contributing ``||omega_j||^2``); factors ``2..D``
    are the gates.
    """
    D = g.depth
    if d == d2:
        raise ContractError("imbalance needs two distinct factors")
    if not (1 <= d <= D and 1 <= d2 <= D):
        raise ContractError(f"factor indices must lie in 1..{D}")
    a = squared_factors(g)[j]
    return float(a[d - 1] - a[d2 - 1])


def balance_report(g):
    a = squared_factors(g)
    return BalanceReport(a.max(axis=1) - a.min(axis=1), misalignment(g))


def grads_from_effective(g, grad_w, lam):
    """Chain rule from ``dL0/dw`` to the gated gradients of the full objective.

    Parameters
    ----------
    g : GatedParams
    grad_w : array_like, shape (p,)
        Gradient of the data loss at ``collapse(g)``.
    lam : float
        Penalty strength; the surrogate contributes ``(2 lam / D)`` times each
        factor.

    Returns
    -------
    grad_omega : ndarray, shape (p,)
    grad_gamma : ndarray, shape (J, D-1)
    """
    grad_w = as_vector(grad_w, "grad_w")
    if grad_w.size != g.partition.p:
        raise ContractError(f"grad_w has length {grad_w.size}, expected {g.partition.p}")
    labels = g.partition.labels
    c = 2.0 * lam / g.depth
    grad_omega = gate_products(g)[labels] * grad_w + c * g.omega
    inner = g.partition.group_sum(g.omega * grad_w)
    grad_gamma = leave_one_out_products(g.gamma) * inner[:, None] + c * g.gamma
    return grad_omega, grad_gamma
