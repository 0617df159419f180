"""Unregularised data losses over effective weights.

Every model exposes ``loss_grad(data, w, v=None, batch=None)`` returning
``(loss, grad_w, grad_v)`` where ``w`` is the penalised (gated) block and ``v``
holds the remaining parameters. Losses are sums over samples unless a model is
built with ``reduction="mean"``.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .grouping import GroupPartition, contiguous
from .numerics import ContractError, Rng, as_matrix, as_vector

__all__ = [
    "Dataset",
    "LinearModel",
    "MlpModel",
    "ToyObjective",
    "linear_loss_grad",
    "mlp_loss_grad",
    "toy_loss_grad",
]

_EMPTY = np.zeros(0)


@dataclass
class Dataset:
    """Design matrix ``X`` (n x p_in) and targets ``y`` (length n).

    For classification ``y`` holds integer class labels.
    """

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.y = np.asarray(self.y)
        if self.y.ndim != 1:
            raise ContractError("y must be one-dimensional")
        if self.X.shape[0] < 1:
            raise ContractError("a dataset needs at least one sample")
        if self.X.shape[0] != self.y.size:
            raise ContractError(f"X has {self.X.shape[0]} rows but y has {self.y.size} entries")

    @property
    def n(self):
        return self.X.shape[0]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx])

    def to_csv(self, path, feature_prefix="x", target="y"):
        header = [f"{feature_prefix}{i}" for i in range(self.X.shape[1])] + [target]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row, target_value in zip(self.X, self.y):
                writer.writerow([repr(float(x)) for x in row] + [_fmt_target(target_value)])

    @classmethod
    def from_csv(cls, path, labels=False):
        """Load a CSV with a header row; the last column is the target."""
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        y = raw[:, -1]
        if labels:
            y = y.astype(np.intp)
        return cls(raw[:, :-1], y)


def _fmt_target(value):
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return repr(float(value))


def _check_batch(batch, n):
    if batch is None:
        return None
    idx = np.asarray(batch, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"batch index out of range for {n} samples")
    return idx


class LinearModel:
    """Linear regression without intercept and with squared loss.

    Parameters
    ----------
    partition : GroupPartition
        Grouping of all input weights.
    reduction : {"sum", "mean"}
        ``"sum"`` gives ``sum_i (y_i - x_i^T w)^2``; ``"mean"`` divides by the
        number of rows evaluated.
    """

    n_ungated = 0

    def __init__(self, partition, reduction="sum"):
        if reduction not in ("sum", "mean"):
            raise ContractError(f"unknown reduction {reduction!r}")
        self.partition = partition
        self.reduction = reduction

    @property
    def p(self):
        return self.partition.p

    def loss_grad(self, data, w, v=None, batch=None):
        loss, grad = linear_loss_grad(self, data, w, batch)
        return loss, grad, _EMPTY

    def predict(self, X, w, v=None):
        return as_matrix(X) @ w

    def init_params(self, rng):
        """``N(0, 1/p)`` primary weights; no ungated parameters."""
        return rng.normal(self.p, scale=1.0 / np.sqrt(self.p)), _EMPTY.copy()


def linear_loss_grad(model, data, w, batch=None):
    """Squared loss and its gradient ``-2 X_B^T (y_B - X_B w)`` (scaled for mean)."""
    w = as_vector(w, "w")
    if w.size != model.p or data.X.shape[1] != model.p:
        raise ContractError(f"expected {model.p} weights and columns")
    idx = _check_batch(batch, data.n)
    X, y = (data.X, data.y) if idx is None else (data.X[idx], data.y[idx])
    r = y - X @ w
    loss = float(r @ r)
    grad = -2.0 * (X.T @ r)
    if model.reduction == "mean":
        m = max(X.shape[0], 1)
        loss /= m
        grad /= m
    return loss, grad


class MlpModel:
    """Fully connected rectifier network with softmax cross-entropy loss.

    The first-layer weight matrix ``W1`` (shape ``sizes[1] x sizes[0]``,
    flattened row-major) is the penalised block ``w``. Its grouping is either
    one group per hidden neuron (rows, ``grouping="neuron"``) or one group per
    input feature (columns, ``grouping="input"``). Biases and deeper layers
    form the ungated vector ``v`` laid out as ``b1, W2, b2, W3, b3, ...``.
    """

    def __init__(self, sizes, grouping="neuron"):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ContractError("sizes needs at least input and output widths >= 1")
        if grouping not in ("neuron", "input"):
            raise ContractError(f"unknown grouping {grouping!r}")
        self.sizes = sizes
        self.grouping = grouping
        n_in, h1 = sizes[0], sizes[1]
        if grouping == "neuron":
            self.partition = contiguous([n_in] * h1)
        else:
            self.partition = GroupPartition([np.arange(i, h1 * n_in, n_in) for i in range(n_in)])
        # (W shape, offset) of every ungated array inside v
        self._v_layout = []
        offset = 0
        self._v_layout.append(("b", (h1,), offset))
        offset += h1
        for a, b in zip(sizes[1:-1], sizes[2:]):
            self._v_layout.append(("W", (b, a), offset))
            offset += a * b
            self._v_layout.append(("b", (b,), offset))
            offset += b
        self.n_ungated = offset

    @property
    def p(self):
        return self.sizes[0] * self.sizes[1]

    def _unpack(self, w, v):
        W1 = w.reshape(self.sizes[1], self.sizes[0])
        arrays = [v[off:off + int(np.prod(shape))].reshape(shape) for _, shape, off in self._v_layout]
        b1 = arrays[0]
        rest = [(arrays[i], arrays[i + 1]) for i in range(1, len(arrays), 2)]
        return [(W1, b1)] + rest

    def init_params(self, rng):
        """Fan-in scaled normal weights and zero biases."""
        w = rng.normal(self.p, scale=np.sqrt(2.0 / self.sizes[0]))
        v = np.zeros(self.n_ungated)
        for kind, shape, off in self._v_layout:
            if kind == "W":
                size = int(np.prod(shape))
                v[off:off + size] = rng.normal(size, scale=np.sqrt(2.0 / shape[1]))
        return w, v

    def forward(self, X, w, v):
        """Logits for the rows of ``X``."""
        h = as_matrix(X)
        layers = self._unpack(w, v)
        for k, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict(self, X, w, v):
        return np.argmax(self.forward(X, w, v), axis=1)

    def loss_grad(self, data, w, v=None, batch=None):
        return mlp_loss_grad(self, data, w, v, batch)


def mlp_loss_grad(model, data, w, v, batch=None):
    """Summed softmax cross-entropy and exact reverse-mode gradients.

    The rectifier derivative at exactly zero is taken as zero.
    """
    w = as_vector(w, "w")
    v = as_vector(v, "v")
    if w.size != model.p or v.size != model.n_ungated:
        raise ContractError("parameter lengths do not match the network")
    if data.X.shape[1] != model.sizes[0]:
        raise ContractError(f"expected {model.sizes[0]} input features")
    idx = _check_batch(batch, data.n)
    X, y = (data.X, data.y) if idx is None else (data.X[idx], data.y[idx])
    y = np.asarray(y, dtype=np.intp)

    layers = model._unpack(w, v)
    acts = [X]
    pre = []
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(h)

    logits = acts[-1]
    shift = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(X.shape[0])
    loss = float(np.sum(logsumexp - shift[rows, y]))
    delta = np.exp(shift - logsumexp[:, None])
    delta[rows, y] -= 1.0

    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads.append((delta.T @ acts[k], delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ W) * (pre[k - 1] > 0)
    grads.reverse()

    grad_w = grads[0][0].ravel()
    parts = [grads[0][1]]
    for gW, gb in grads[1:]:
        parts.extend([gW.ravel(), gb])
    grad_v = np.concatenate(parts) if parts else _EMPTY
    return loss, grad_w, grad_v


@dataclass
class ToyObjective:
    """Two-feature squared loss with the group penalty ``lam * ||w||_2^(2/D)``."""

    x1: float
    x2: float
    y: float
    depth: int
    lam: float

    def as_linear(self):
        """Single-sample linear problem whose data loss equals the toy data term."""
        model = LinearModel(contiguous([2]), reduction="sum")
        return model, Dataset(np.array([[self.x1, self.x2]]), np.array([self.y]))


def toy_loss_grad(obj, w):
    """Value and (sub)gradient of the toy objective.

    The penalty gradient is ``lam (2/D) ||w||^(2/D - 2) w``; at ``w = 0`` the
    penalty contributes zero. The norm in the denominator is floored at 1e-300.
    """
    w = as_vector(w, "w")
    if w.size != 2:
        raise ContractError("toy objective takes two weights")
    x = np.array([obj.x1, obj.x2])
    r = obj.y - x @ w
    norm = float(np.sqrt(w @ w))
    penalty = obj.lam * norm ** (2.0 / obj.depth)
    grad = -2.0 * r * x
    if norm > 0.0:
        grad = grad + obj.lam * (2.0 / obj.depth) * max(norm, 1e-300) ** (2.0 / obj.depth - 2.0) * w
    return float(r * r + penalty), grad
