"""Synthetic data and experiment drivers.

Covers the group-sparse regression benchmark and its regularisation paths,
imbalance/loss-gap decay studies on linear and MLP models, and the
two-feature toy comparison of direct (sub)gradient descent with D-Gating.
"""

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .gating import collapse, identity_gated, misalignment, nonsmooth_penalty
from .grouping import active_groups, contiguous
from .models import Dataset, LinearModel, MlpModel, ToyObjective, toy_loss_grad
from .numerics import ContractError, DivergenceError, Rng
from .optim import (
    TrainConfig,
    fista_group_lasso,
    flow_integrate,
    group_lasso_objective,
    sgd_step_exact,
    sgd_train,
    subgrad_direct,
)

__all__ = [
    "METHODS",
    "GroupSparseDgp",
    "GroupSparseData",
    "PathRecord",
    "PATH_COLUMNS",
    "lambda_grid",
    "generate_group_sparse",
    "run_path",
    "fit_decay_slope",
    "DecayResult",
    "decay_problem",
    "run_decay",
    "ToyRun",
    "run_toy",
    "oscillation_count",
]

METHODS = ("dgating", "fista", "subgrad", "oracle-ls")


@dataclass
class GroupSparseDgp:
    """Gaussian design with a few informative groups and Gaussian noise."""

    n_train: int = 200
    n_test: int = 2000
    n_groups: int = 40
    group_size: int = 5
    n_informative: int = 7
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_test", "n_groups", "group_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not 0 <= self.n_informative <= self.n_groups:
            raise ContractError("n_informative must lie in 0..n_groups")
        if self.noise_sd < 0:
            raise ContractError("noise_sd must be >= 0")


class GroupSparseData(NamedTuple):
    train: Dataset
    test: Dataset
    true_support: list
    true_weights: np.ndarray
    partition: object


def generate_group_sparse(dgp):
    """Draw train/test sets; the informative groups are the first ``n_informative``."""
    rng = Rng(dgp.seed)
    p = dgp.n_groups * dgp.group_size
    k = dgp.n_informative * dgp.group_size
    beta = np.zeros(p)
    beta[:k] = rng.normal(k)
    X_train = rng.normal((dgp.n_train, p))
    y_train = X_train @ beta + dgp.noise_sd * rng.normal(dgp.n_train)
    X_test = rng.normal((dgp.n_test, p))
    y_test = X_test @ beta + dgp.noise_sd * rng.normal(dgp.n_test)
    return GroupSparseData(
        Dataset(X_train, y_train),
        Dataset(X_test, y_test),
        list(range(dgp.n_informative)),
        beta,
        contiguous([dgp.group_size] * dgp.n_groups),
    )


def lambda_grid(lo=1e-5, hi=15.0, num=30):
    """Logarithmically spaced penalty strengths, ascending."""
    return np.geomspace(lo, hi, num)


PATH_COLUMNS = (
    "lambda", "depth", "method", "train_objective", "test_rmse",
    "active_groups", "support", "misalignment", "diverged",
)


@dataclass
class PathRecord:
    lam: float
    depth: Optional[int]
    method: str
    train_objective: float
    test_rmse: float
    active_group_count: int
    support: list = field(default_factory=list)
    misalignment: float = 0.0
    diverged: bool = False

    def row(self):
        return [
            repr(float(self.lam)),
            "" if self.depth is None else str(self.depth),
            self.method,
            repr(float(self.train_objective)),
            repr(float(self.test_rmse)),
            str(self.active_group_count),
            " ".join(str(j) for j in self.support),
            repr(float(self.misalignment)),
            str(int(self.diverged)),
        ]


def _rmse(data, w):
    r = data.y - data.X @ w
    return float(np.sqrt(np.mean(r * r)))


def _zero_small_groups(w, partition, eps):
    # Alg. 1 post-processing: groups below eps_tiny become exact zeros
    keep = np.zeros(partition.n_groups, dtype=bool)
    keep[active_groups(partition, w, eps)] = True
    return np.where(keep[partition.labels], w, 0.0)


def _lw_objective(model, data, w, lam, depth):
    return model.loss_grad(data, w)[0] + lam * nonsmooth_penalty(w, model.partition, depth)


def run_path(train, test, partition, methods, depths, lambdas, base_config, true_support=None,
             reduction="mean", init_seed=None, fista_iters=20000, fista_tol=1e-13):
    """Regularisation path for each requested method.

    ``dgating`` and ``subgrad`` run once per depth in ``depths``; ``fista`` is
    the D = 2 group lasso and ``oracle-ls`` is least squares restricted to
    ``true_support`` (identical for every lambda). Runs that diverge produce a
    record with ``diverged=True`` instead of aborting the sweep.

    Returns
    -------
    list of PathRecord
    """
    methods = list(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ContractError(f"unknown methods: {sorted(unknown)}")
    lambdas = [float(lam) for lam in lambdas]
    if not lambdas:
        raise ContractError("lambda grid must be nonempty")
    model = LinearModel(partition, reduction=reduction)
    # the DGP draws from Rng(seed) itself; the init uses a derived stream
    init_rng = Rng(base_config.seed).derive(1) if init_seed is None else Rng(init_seed)
    init = init_rng.normal(partition.p, scale=1.0 / np.sqrt(partition.p))
    eps = base_config.eps_tiny
    records = []

    def failed(lam, depth, method):
        return PathRecord(lam, depth, method, float("nan"), float("nan"), 0, [], float("nan"), True)

    for method in methods:
        if method == "oracle-ls":
            if true_support is None:
                raise ContractError("oracle-ls needs the true support")
            cols = np.concatenate([partition.groups[j] for j in true_support]) if true_support else []
            w = np.zeros(partition.p)
            if len(cols):
                w[cols] = np.linalg.lstsq(train.X[:, cols], train.y, rcond=None)[0]
            train_obj = model.loss_grad(train, w)[0]
            for lam in lambdas:
                records.append(PathRecord(lam, None, method, train_obj, _rmse(test, w),
                                          len(true_support), sorted(true_support)))
            continue
        if method == "fista":
            w_prev = None
            by_lam = {}
            for lam in sorted(lambdas, reverse=True):
                w = fista_group_lasso(train, partition, lam, iters=fista_iters, tol=fista_tol,
                                      reduction=reduction, w0=w_prev)
                w_prev = w
                support = active_groups(partition, w, eps)
                w_hat = _zero_small_groups(w, partition, eps)
                by_lam[lam] = PathRecord(
                    lam, 2, method, group_lasso_objective(train, partition, lam, w_hat, reduction),
                    _rmse(test, w_hat), len(support), support)
            records.extend(by_lam[lam] for lam in lambdas)
            continue
        for depth in depths:
            for lam in lambdas:
                config = base_config.replace(lam=lam, depth=depth)
                try:
                    # overflow on the way to divergence is expected; it is flagged below
                    with np.errstate(over="ignore", invalid="ignore"):
                        w, mis = _fit_gated_or_direct(method, model, train, lam, depth, config, init)
                except DivergenceError:
                    records.append(failed(lam, depth, method))
                    continue
                support = active_groups(partition, w, eps)
                w_hat = _zero_small_groups(w, partition, eps)
                records.append(PathRecord(
                    lam, depth, method, _lw_objective(model, train, w_hat, lam, depth),
                    _rmse(test, w_hat), len(support), support, mis))
    return records


def _fit_gated_or_direct(method, model, train, lam, depth, config, init):
    if method == "dgating":
        res = sgd_train(model, train, config, init)
        return collapse(res.params), misalignment(res.params)
    w, _ = subgrad_direct(model, train, lam, depth, config, init)
    return w, 0.0


def fit_decay_slope(t, values, discard=0.05, floor=0.0):
    """Least-squares slope of ``log(values)`` against ``t``.

    The first ``discard`` fraction of samples is dropped, as are values not
    exceeding ``floor``. Returns ``nan`` when fewer than two points remain.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    start = int(np.floor(discard * t.size))
    t, values = t[start:], values[start:]
    ok = values > floor
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(t[ok], np.log(values[ok]), 1)[0])


@dataclass
class DecayResult:
    depth: int
    lam: float
    engine: str
    trace: list
    slope_imbalance: float
    slope_gap: float

    @property
    def theory_slope(self):
        return -4.0 * self.lam / self.depth


def decay_problem(kind="linear", seed=0, n=None):
    """Small problem used by the decay studies.

    ``"linear"``: 40 samples, 6 groups of 3 features, mean squared loss.
    ``"mlp"``: a (20, 32, 16, 3) network with neuron-wise gating on 3-class
    data labelled by a random teacher network.

    Returns ``(model, data, init_omega, init_v)``.
    """
    rng = Rng(seed)
    if kind == "linear":
        n = n or 40
        part = contiguous([3] * 6)
        X = rng.normal((n, part.p))
        beta = rng.normal(part.p)
        beta[9:] = 0.0
        y = X @ beta + 0.5 * rng.normal(n)
        model = LinearModel(part, reduction="mean")
        omega, v = model.init_params(rng)
        return model, Dataset(X, y), omega, v
    if kind == "mlp":
        n = n or 96
        model = MlpModel((20, 32, 16, 3), grouping="neuron")
        X = rng.normal((n, 20))
        teacher = MlpModel((20, 8, 3))
        tw, tv = teacher.init_params(rng)
        y = teacher.predict(X, tw, tv)
        omega, v = model.init_params(rng)
        return model, Dataset(X, y), omega, v
    raise ContractError(f"unknown decay problem {kind!r}")


def run_decay(model, data, depths, lambdas, engine="flow", init_omega=None, init_v=None,
              t_end=10.0, dt=0.01, config=None, record_every=10, discard=0.05, gap_floor=1e-13):
    """Decay of imbalance and loss gap for every ``(depth, lambda)`` pair.

    All runs start from ``init_omega`` with unit gates. With ``engine="flow"``
    the gradient flow is integrated up to ``t_end``; with ``engine="sgd"``
    :func:`sgd_train` runs with ``config`` (constant schedule recommended) and
    the trace time is converted to ``step * lr * batch_scale`` so slopes share
    the flow's time axis.

    Returns
    -------
    dict mapping ``(depth, lam)`` to :class:`DecayResult`.
    """
    if not depths or not lambdas:
        raise ContractError("depth and lambda grids must be nonempty")
    if engine not in ("flow", "sgd"):
        raise ContractError(f"unknown engine {engine!r}")
    if init_omega is None:
        init_omega, init_v = model.init_params(Rng(0))
    out = {}
    for depth in depths:
        for lam in lambdas:
            lam = float(lam)
            if engine == "flow":
                init = identity_gated(init_omega, model.partition, depth)
                res = flow_integrate(model, data, lam, depth, init, t_end, dt, init_v=init_v,
                                     record_every=record_every)
                trace = res.trace
            else:
                if config is None:
                    raise ContractError("the sgd engine needs a TrainConfig")
                cfg = config.replace(lam=lam, depth=depth)
                res = sgd_train(model, data, cfg, init_omega, init_v=init_v, trace_every=record_every)
                batch = data.n if cfg.batch_size is None else min(cfg.batch_size, data.n)
                scale = 1.0 if getattr(model, "reduction", "sum") == "mean" else 1.0 / batch
                trace = res.trace
                for rec in trace:
                    rec.t = rec.t * cfg.lr * scale
            t = [r.t for r in trace]
            slope_i = fit_decay_slope(t, [r.imbalance_max for r in trace], discard)
            gaps = [r.loss_gated - r.loss_nonsmooth for r in trace]
            slope_g = fit_decay_slope(t, gaps, discard, floor=gap_floor)
            out[(depth, lam)] = DecayResult(depth, lam, engine, trace, slope_i, slope_g)
    return out


class ToyRun(NamedTuple):
    depth: int
    direct: np.ndarray
    gated: np.ndarray


def run_toy(depths, lam, steps, lr, x1=1.0, x2=0.5, y=0.2, start=(1.0, 0.6)):
    """Paired trajectories of direct GD and D-gated GD on the toy objective.

    Both runs start from the same effective weight; the gated run uses unit
    gates and plain gradient steps on the gated objective.

    Returns
    -------
    list of ToyRun, one per depth; each trajectory has shape ``(steps + 1, 2)``.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    runs = []
    for depth in depths:
        obj = ToyObjective(x1, x2, y, depth, lam)
        model, data = obj.as_linear()
        w = np.array(start, dtype=float)
        direct = [w.copy()]
        for step in range(steps):
            _, grad = toy_loss_grad(obj, w)
            w = w - lr * grad
            if not np.all(np.isfinite(w)):
                raise DivergenceError(step + 1)
            direct.append(w.copy())
        g = identity_gated(np.array(start, dtype=float), model.partition, depth)
        gated = [collapse(g)]
        for step in range(steps):
            _, grad_w, _ = model.loss_grad(data, collapse(g))
            g = sgd_step_exact(g, grad_w, lam, lr)
            gated.append(collapse(g))
        runs.append(ToyRun(depth, np.array(direct), np.array(gated)))
    return runs


def oscillation_count(trajectory, tail=0.25):
    """Sign changes of successive ``||w||`` differences over the final ``tail`` fraction."""
    norms = np.linalg.norm(np.asarray(trajectory), axis=1)
    seg = norms[int((1.0 - tail) * norms.size):]
    diffs = np.diff(seg)
    diffs = diffs[diffs != 0]
    return int(np.sum(np.sign(diffs[1:]) != np.sign(diffs[:-1])))
