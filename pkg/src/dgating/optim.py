"""Training engines for gated and ungated objectives.

* :func:`sgd_train` -- mini-batch SGD with momentum on the gated objective.
* :func:`flow_integrate` -- fixed-step RK4 integration of the gradient flow.
* :func:`fista_group_lasso` -- accelerated proximal gradient for D = 2.
* :func:`subgrad_direct` -- plain (sub)gradient descent on the non-smooth penalty.
* :func:`sgd_step_exact` -- one vanilla step, used to study discrete dynamics.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from .gating import (
    GatedParams,
    balance_report,
    collapse,
    grads_from_effective,
    identity_gated,
    leave_one_out_products,
    nonsmooth_penalty,
    surrogate_penalty,
)
from .grouping import active_groups, group_norms
from .numerics import ContractError, DivergenceError, Rng, as_vector, spectral_norm_sq

__all__ = [
    "TrainConfig",
    "TraceRecord",
    "TrainResult",
    "TRACE_COLUMNS",
    "learning_rate",
    "gated_objective",
    "trace_record",
    "write_trace_csv",
    "sgd_train",
    "flow_integrate",
    "block_soft_threshold",
    "group_lasso_objective",
    "fista_group_lasso",
    "subgrad_direct",
    "sgd_step_exact",
]


@dataclass
class TrainConfig:
    """Hyperparameters shared by the iterative engines.

    ``batch_size=None`` means full batch. For summed losses the gradient step
    is divided by the batch size, as in the standard D-Gating training loop;
    for mean-reduced models it is not divided again.
    """

    lam: float = 0.0
    depth: int = 2
    iters: int = 1500
    batch_size: Optional[int] = None
    lr: float = 5e-2
    schedule: str = "cosine"
    momentum: float = 0.9
    nesterov: bool = False
    eps_tiny: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ContractError("iters must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.depth < 2:
            raise ContractError("depth must be >= 2")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**obj)


def learning_rate(config, t):
    if config.schedule == "constant":
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * t / config.iters))


TRACE_COLUMNS = ("t", "loss_gated", "loss_nonsmooth", "misalignment", "imbalance_max", "active_groups")


@dataclass
class TraceRecord:
    t: float
    loss_gated: float
    loss_nonsmooth: float
    misalignment: float
    imbalance_max: float
    active_group_count: int

    def row(self):
        return [
            repr(float(self.t)),
            repr(self.loss_gated),
            repr(self.loss_nonsmooth),
            repr(self.misalignment),
            repr(self.imbalance_max),
            str(self.active_group_count),
        ]


def write_trace_csv(path, records, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(TRACE_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


class TrainResult(NamedTuple):
    params: GatedParams
    trace: list
    v: np.ndarray


def _batch_scale(model, batch_len):
    return 1.0 if getattr(model, "reduction", "sum") == "mean" else 1.0 / batch_len


def gated_objective(model, data, g, v, lam, batch=None):
    """Full gated objective and all gradients.

    Returns ``(loss, data_loss, grad_omega, grad_gamma, grad_v)``.
    """
    w = collapse(g)
    data_loss, grad_w, grad_v = model.loss_grad(data, w, v, batch)
    grad_omega, grad_gamma = grads_from_effective(g, grad_w, lam)
    return data_loss + lam * surrogate_penalty(g), data_loss, grad_omega, grad_gamma, grad_v


def trace_record(model, data, g, v, lam, t, eps_tiny=1e-6):
    """Diagnostics of the current state on the full dataset."""
    w = collapse(g)
    data_loss = model.loss_grad(data, w, v)[0]
    report = balance_report(g)
    return TraceRecord(
        t=t,
        loss_gated=data_loss + lam * surrogate_penalty(g),
        loss_nonsmooth=data_loss + lam * nonsmooth_penalty(w, g.partition, g.depth),
        misalignment=report.misalignment,
        imbalance_max=report.imbalance_max,
        active_group_count=len(active_groups(g.partition, w, eps_tiny)),
    )


def _batches(n, batch_size, rng):
    """Endless stream of index batches, reshuffled every epoch."""
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def sgd_train(model, data, config, init_omega, init_v=None, trace_every=0, init_gamma=None):
    """Train the D-gated model with (momentum) SGD.

    Gates start at one unless ``init_gamma`` is given. Momentum acts on the
    stacked gradient of ``(omega, Gamma, v)``. The ungated ``v`` carries no
    penalty.

    Parameters
    ----------
    model : LinearModel or MlpModel
    data : Dataset
    config : TrainConfig
    init_omega : array_like
        Starting primary weights, e.g. from ``model.init_params``.
    init_v : array_like, optional
        Starting ungated parameters (required when the model has any).
    trace_every : int
        Record a :class:`TraceRecord` every this many steps (and at the first
        and last step). 0 disables tracing.

    Returns
    -------
    TrainResult
        Final gated parameters, trace, and final ungated parameters.

    Raises
    ------
    DivergenceError
        If the loss or state becomes non-finite.
    """
    part = model.partition
    D, lam = config.depth, config.lam
    if init_gamma is None:
        g = identity_gated(init_omega, part, D)
    else:
        g = GatedParams(np.array(init_omega, dtype=float), np.array(init_gamma, dtype=float), D, part)
    v = np.zeros(model.n_ungated) if init_v is None else as_vector(init_v, "v").copy()
    rng = Rng(config.seed)
    batches = _batches(data.n, config.batch_size, rng)
    p, k = part.p, g.gamma.size
    buf = None
    trace = []

    def record(t):
        rec = trace_record(model, data, g, v, lam, t, config.eps_tiny)
        if not np.isfinite(rec.loss_gated):
            raise DivergenceError(t)
        trace.append(rec)

    if trace_every:
        record(0)
    for t in range(config.iters):
        batch = next(batches)
        loss, _, g_om, g_ga, g_v = gated_objective(model, data, g, v, lam, batch)
        if not np.isfinite(loss):
            raise DivergenceError(t)
        grad = np.concatenate([g_om, g_ga.ravel(), g_v]) * _batch_scale(model, len(batch))
        if config.momentum > 0:
            buf = grad.copy() if buf is None else config.momentum * buf + grad
            direction = grad + config.momentum * buf if config.nesterov else buf
        else:
            direction = grad
        eta = learning_rate(config, t)
        omega = g.omega - eta * direction[:p]
        gamma = g.gamma - eta * direction[p:p + k].reshape(g.gamma.shape)
        v = v - eta * direction[p + k:]
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(gamma)) and np.all(np.isfinite(v))):
            raise DivergenceError(t + 1)
        g = GatedParams(omega, gamma, D, part)
        if trace_every and ((t + 1) % trace_every == 0 or t + 1 == config.iters):
            record(t + 1)
    return TrainResult(g, trace, v)


def flow_integrate(model, data, lam, depth, init, t_end, dt, init_v=None, record_every=1,
                   eps_tiny=1e-6, callback=None, trace=True):
    """Integrate the gradient flow of the gated objective with classical RK4.

    Full-batch gradients are used throughout. The state is recorded at
    ``t = 0`` and every ``record_every`` steps thereafter.

    Parameters
    ----------
    init : GatedParams
        Starting point; its depth must equal ``depth``.
    t_end, dt : float
        Horizon and fixed step; ``round(t_end / dt)`` steps are taken.
    callback : callable, optional
        Called as ``callback(t, params, v)`` at every recorded time.
    trace : bool
        With ``False`` no diagnostics are computed and the returned trace is
        empty; the callback still fires.

    Returns
    -------
    TrainResult
    """
    if dt <= 0 or t_end < dt:
        raise ContractError("need dt > 0 and t_end >= dt")
    if init.depth != depth:
        raise ContractError("init depth does not match depth")
    part = model.partition
    p = part.p
    shape = init.gamma.shape
    k = init.gamma.size
    v0 = np.zeros(model.n_ungated) if init_v is None else as_vector(init_v, "v")

    labels = part.labels
    c = 2.0 * lam / depth

    def rhs(x):
        # same chain rule as grads_from_effective, with the gate products shared
        omega, gamma, v = x[:p], x[p:p + k].reshape(shape), x[p + k:]
        gates = gamma.prod(axis=1)[labels]
        _, grad_w, grad_v = model.loss_grad(data, omega * gates, v)
        g_om = gates * grad_w + c * omega
        g_ga = leave_one_out_products(gamma) * part.group_sum(omega * grad_w)[:, None] + c * gamma
        return -np.concatenate([g_om, g_ga.ravel(), grad_v])

    x = np.concatenate([init.omega, init.gamma.ravel(), v0])
    n_steps = int(round(t_end / dt))
    records = []

    def record(step):
        t = step * dt
        g = _raw_params(x[:p].copy(), x[p:p + k].reshape(shape).copy(), depth, part)
        v = x[p + k:].copy()
        if trace:
            records.append(trace_record(model, data, g, v, lam, t, eps_tiny))
        if callback is not None:
            callback(t, g, v)

    record(0)
    for step in range(1, n_steps + 1):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(step)
        if step % record_every == 0 or step == n_steps:
            record(step)
    final = GatedParams(x[:p].copy(), x[p:p + k].reshape(shape).copy(), depth, part)
    return TrainResult(final, records, x[p + k:].copy())


def _raw_params(omega, gamma, depth, partition):
    # skips validation on the hot path of the integrator
    g = object.__new__(GatedParams)
    g.omega, g.gamma, g.depth, g.partition = omega, gamma, depth, partition
    return g


def block_soft_threshold(v, partition, threshold):
    """Group-wise shrinkage ``max(0, 1 - threshold / ||v_j||) v_j``.

    Groups with ``||v_j|| <= threshold`` become exactly zero.
    """
    v = as_vector(v, "v")
    norms = group_norms(partition, v)
    shrink = np.zeros_like(norms)
    keep = norms > threshold
    shrink[keep] = 1.0 - threshold / norms[keep]
    return v * shrink[partition.labels]


def _ls_scale(data, reduction):
    return 1.0 / data.n if reduction == "mean" else 1.0


def group_lasso_objective(data, partition, lam, w, reduction="sum"):
    r = data.y - data.X @ w
    return float(r @ r) * _ls_scale(data, reduction) + lam * float(np.sum(group_norms(partition, w)))


def fista_group_lasso(data, partition, lam, iters=5000, tol=1e-10, reduction="sum", w0=None,
                      power_iters=500, seed=0, return_history=False):
    """Solve ``min ||y - X w||^2 + lam * sum_j ||w_j||_2`` by accelerated proximal gradient.

    The step size is ``1 / L`` with ``L = 2 * sigma_max(X)^2`` (divided by
    ``n`` when ``reduction="mean"``). Momentum is reset whenever the objective
    increases. Iteration stops when the relative objective change drops below
    ``tol``.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    X, y = data.X, data.y
    scale = _ls_scale(data, reduction)
    L = 2.0 * scale * spectral_norm_sq(X, power_iters, seed)
    w = np.zeros(X.shape[1]) if w0 is None else as_vector(w0, "w0").copy()
    if L == 0.0:
        return (w, []) if return_history else w
    step = 1.0 / L

    def objective(u):
        return group_lasso_objective(data, partition, lam, u, reduction)

    z = w.copy()
    theta = 1.0
    f_old = objective(w)
    history = [f_old]
    for _ in range(iters):
        grad = -2.0 * scale * (X.T @ (y - X @ z))
        w_new = block_soft_threshold(z - step * grad, partition, step * lam)
        f_new = objective(w_new)
        if f_new > f_old:
            # restart from the last accepted iterate with a plain prox step
            theta = 1.0
            grad = -2.0 * scale * (X.T @ (y - X @ w))
            w_new = block_soft_threshold(w - step * grad, partition, step * lam)
            f_new = objective(w_new)
            z = w_new.copy()
        else:
            theta_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            z = w_new + ((theta - 1.0) / theta_new) * (w_new - w)
            theta = theta_new
        w = w_new
        history.append(f_new)
        change = abs(f_old - f_new) / max(abs(f_old), 1e-300)
        f_old = f_new
        if change < tol:
            break
    return (w, history) if return_history else w


def subgrad_direct(model, data, lam, depth, config, init_w, trace_every=0):
    """(Sub)gradient descent on ``L0(w) + lam * sum_j ||w_j||^(2/D)``.

    Uses the penalty subgradient ``lam (2/D) ||w_j||^(2/D - 2) w_j`` with zero
    at ``w_j = 0``. Iterates do not become exactly sparse.

    Returns
    -------
    (w, trace)
    """
    part = model.partition
    w = as_vector(init_w, "init_w").copy()
    v = np.zeros(model.n_ungated)
    rng = Rng(config.seed)
    batches = _batches(data.n, config.batch_size, rng)
    buf = None
    trace = []

    def record(t):
        loss = model.loss_grad(data, w, v)[0] + lam * nonsmooth_penalty(w, part, depth)
        trace.append(TraceRecord(t, loss, loss, 0.0, 0.0, len(active_groups(part, w, config.eps_tiny))))

    if trace_every:
        record(0)
    for t in range(config.iters):
        batch = next(batches)
        loss, grad, _ = model.loss_grad(data, w, v, batch)
        if not np.isfinite(loss):
            raise DivergenceError(t)
        grad = (grad + _penalty_subgradient(w, part, lam, depth)) * _batch_scale(model, len(batch))
        if config.momentum > 0:
            buf = grad.copy() if buf is None else config.momentum * buf + grad
            direction = grad + config.momentum * buf if config.nesterov else buf
        else:
            direction = grad
        w = w - learning_rate(config, t) * direction
        if not np.all(np.isfinite(w)):
            raise DivergenceError(t + 1)
        if trace_every and ((t + 1) % trace_every == 0 or t + 1 == config.iters):
            record(t + 1)
    return w, trace


def _penalty_subgradient(w, partition, lam, depth):
    norms = group_norms(partition, w)
    coef = np.zeros_like(norms)
    nz = norms > 0
    coef[nz] = lam * (2.0 / depth) * norms[nz] ** (2.0 / depth - 2.0)
    return coef[partition.labels] * w


def sgd_step_exact(g, grad_w, lam, eta):
    """One vanilla gradient step on the gated objective given ``dL0/dw``."""
    if eta <= 0:
        raise ContractError("eta must be > 0")
    g_om, g_ga = grads_from_effective(g, grad_w, lam)
    return GatedParams(g.omega - eta * g_om, g.gamma - eta * g_ga, g.depth, g.partition)
