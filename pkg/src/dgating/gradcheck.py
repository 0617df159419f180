"""Central finite-difference checks of the gated objective gradients."""

from dataclasses import dataclass

import numpy as np

from .gating import GatedParams, collapse, grads_from_effective, surrogate_penalty
from .grouping import contiguous
from .models import Dataset, LinearModel, MlpModel, ToyObjective, toy_loss_grad
from .numerics import Rng

__all__ = ["CheckResult", "central_difference", "relative_error", "check_gated", "check_toy_direct",
           "gradcheck_models", "run_gradcheck"]


@dataclass
class CheckResult:
    model: str
    depth: int
    rel_error: float
    coordinate: int
    block: str


def central_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)`` with the index of the worst entry."""
    diff = np.abs(analytic - numeric)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    i = int(np.argmax(diff))
    return float(diff[i] / scale), i


def _split(model, g, x):
    p, k = model.partition.p, g.gamma.size
    omega = x[:p]
    gamma = x[p:p + k].reshape(g.gamma.shape)
    return GatedParams(omega, gamma, g.depth, g.partition), x[p + k:]


def check_gated(model, data, g, v, lam, eps=1e-6, inject_fault=False):
    """Compare analytic gradients of the full gated objective with finite differences.

    ``inject_fault`` flips the sign of the surrogate-penalty term in the
    analytic gradient; used to confirm that the check detects wiring errors.

    Returns ``(rel_error, coordinate)`` over the stacked ``(omega, Gamma, v)``.
    """
    def objective(x):
        gx, vx = _split(model, g, x)
        return model.loss_grad(data, collapse(gx), vx)[0] + lam * surrogate_penalty(gx)

    _, grad_w, grad_v = model.loss_grad(data, collapse(g), v)
    g_om, g_ga = grads_from_effective(g, grad_w, lam)
    if inject_fault:
        c = 2.0 * lam / g.depth
        g_om = g_om - 2.0 * c * g.omega
        g_ga = g_ga - 2.0 * c * g.gamma
    analytic = np.concatenate([g_om, g_ga.ravel(), grad_v])
    x0 = np.concatenate([g.omega, g.gamma.ravel(), v])
    return relative_error(analytic, central_difference(objective, x0, eps))


def check_toy_direct(obj, w, eps=1e-6):
    """Finite-difference check of the direct toy (sub)gradient away from zero."""
    _, grad = toy_loss_grad(obj, w)
    return relative_error(grad, central_difference(lambda u: toy_loss_grad(obj, u)[0], w, eps))


def gradcheck_models(seed=0):
    """Small problems covered by the check: name -> (model, data)."""
    rng = Rng(seed)
    out = {}
    part = contiguous([2, 3, 1, 4])
    X = rng.normal((7, part.p))
    out["linear"] = (LinearModel(part), Dataset(X, rng.normal(7)))
    for grouping in ("neuron", "input"):
        net = MlpModel((4, 8, 8, 3), grouping=grouping)
        Xm = rng.normal((16, 4))
        ym = (rng.uniform(16) * 3).astype(np.intp)
        out[f"mlp-{grouping}"] = (net, Dataset(Xm, ym))
    toy = ToyObjective(1.0, 0.5, 0.2, 2, 0.5)
    out["toy"] = toy.as_linear()
    return out


def _random_gated(model, depth, rng):
    omega = rng.normal(model.partition.p)
    gamma = 0.5 + rng.uniform((model.partition.n_groups, depth - 1))
    gamma *= np.where(rng.uniform(gamma.shape) < 0.5, -1.0, 1.0)
    g = GatedParams(omega, gamma, depth, model.partition)
    v = rng.normal(model.n_ungated) * 0.5
    return g, v


def run_gradcheck(eps=1e-6, seed=0, points=3, depths=(2, 3, 4), lam=0.37, inject_fault=False):
    """Worst relative error per (model, depth) over ``points`` random states."""
    rng = Rng(seed)
    results = []
    for name, (model, data) in gradcheck_models(seed).items():
        for depth in depths:
            worst = CheckResult(name, depth, 0.0, -1, "gated")
            for _ in range(points):
                g, v = _random_gated(model, depth, rng)
                err, i = check_gated(model, data, g, v, lam, eps, inject_fault)
                if err > worst.rel_error:
                    worst = CheckResult(name, depth, err, i, "gated")
            results.append(worst)
    for depth in depths:
        obj = ToyObjective(1.0, 0.5, 0.2, depth, lam)
        worst = CheckResult("toy-direct", depth, 0.0, -1, "w")
        for _ in range(points):
            w = rng.normal(2) + np.array([0.5, 0.5])
            err, i = check_toy_direct(obj, w, eps)
            if err > worst.rel_error:
                worst = CheckResult("toy-direct", depth, err, i, "w")
        results.append(worst)
    return results
