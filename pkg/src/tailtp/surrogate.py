"""Toy-task oracle for the first-order alignment surrogate.

For k mini-batch losses L_1..L_k the surrogate objective is

    sum_i [ L_i(theta) - 1/2 * alpha * sum_{j<i} grad L_i(theta) . grad L_j(theta) ]

averaged over every ordering of the k batches.  Its gradient is what the
expected k-step inner / 1-step outer update approximates, after dividing the
update by ``alpha * beta``.

Tasks here are quadratics ``1/2 (theta - c)^T A (theta - c)`` (A defaults to
the identity), optionally with a quartic term ``q/4 * sum(theta^4)`` so the
Taylor remainder is non-zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParamSet
from .trainer import outer_step, sgd_step


@dataclass(frozen=True)
class QuadTask:
    center: np.ndarray
    curvature: np.ndarray = field(default=None)
    quartic: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)
        a = np.eye(len(c)) if self.curvature is None else np.asarray(self.curvature, dtype=float)
        object.__setattr__(self, "curvature", a)

    def loss(self, theta: np.ndarray) -> float:
        d = theta - self.center
        return 0.5 * d @ self.curvature @ d + 0.25 * self.quartic * np.sum(theta ** 4)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.curvature @ (theta - self.center) + self.quartic * theta ** 3

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        return self.curvature + np.diag(3.0 * self.quartic * theta ** 2)


def quadratic_tasks(centers: Sequence[Sequence[float]], curvatures=None, quartic: float = 0.0) -> list[QuadTask]:
    curvatures = curvatures or [None] * len(centers)
    return [QuadTask(np.asarray(c, dtype=float), a, quartic) for c, a in zip(centers, curvatures)]


def _orderings(tasks: Sequence[QuadTask]):
    return list(itertools.permutations(tasks))


def surrogate_objective(tasks: Sequence[QuadTask], theta: np.ndarray, alpha: float) -> float:
    """The ordering-averaged surrogate objective value."""
    total = 0.0
    orders = _orderings(tasks)
    for order in orders:
        grads = [t.grad(theta) for t in order]
        val = sum(t.loss(theta) for t in order)
        for i in range(len(order)):
            for j in range(i):
                val -= 0.5 * alpha * grads[i] @ grads[j]
        total += val
    return total / len(orders)


def surrogate_grad_oracle(tasks: Sequence[QuadTask], theta, alpha: float, method: str = "exact",
                          step: float = 1e-5) -> np.ndarray:
    """Gradient of :func:`surrogate_objective`.

    ``method="exact"`` uses the closed form
    ``sum_i g_i - alpha/2 sum_{j<i} (H_i g_j + H_j g_i)``;
    ``method="fd"`` takes central differences of the objective itself.
    """
    theta = np.asarray(theta, dtype=float)
    if method == "fd":
        out = np.empty_like(theta)
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = step
            out[i] = (surrogate_objective(tasks, theta + e, alpha)
                      - surrogate_objective(tasks, theta - e, alpha)) / (2 * step)
        return out
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    orders = _orderings(tasks)
    total = np.zeros_like(theta)
    for order in orders:
        g = [t.grad(theta) for t in order]
        h = [t.hessian(theta) for t in order]
        acc = sum(g)
        for i in range(len(order)):
            for j in range(i):
                acc = acc - 0.5 * alpha * (h[i] @ g[j] + h[j] @ g[i])
        total += acc
    return total / len(orders)


def expected_update(
    tasks: Sequence[QuadTask],
    theta,
    alpha: float,
    beta: float,
    outer: Callable[..., ParamSet] = outer_step,
    inner: Callable[..., ParamSet] = sgd_step,
) -> np.ndarray:
    """E[theta - theta_new] over batch orderings for k inner steps + one plain outer step.

    Runs the trainer's own ``sgd_step`` / ``outer_step`` on a one-tensor
    ParamSet, so this checks the production update rules.
    """
    theta = np.asarray(theta, dtype=float)
    start = ParamSet({"theta": theta})
    orders = _orderings(tasks)
    total = np.zeros_like(theta)
    for order in orders:
        p = start
        for t in order:
            p = inner(p, {"theta": t.grad(p["theta"])}, alpha)
        new = outer(start, p, beta, None)
        total += start["theta"] - new["theta"]
    return total / len(orders)


def relative_residual(tasks, theta, alpha: float, beta: float = 1.0, **kw) -> float:
    """||E[update] / (alpha * beta) - surrogate gradient|| / ||surrogate gradient||."""
    upd = expected_update(tasks, theta, alpha, beta, **kw) / (alpha * beta)
    ref = surrogate_grad_oracle(tasks, theta, alpha)
    return float(np.linalg.norm(upd - ref) / np.linalg.norm(ref))


def joint_residual(tasks, theta, alpha: float, beta: float = 1.0) -> float:
    """Same residual but against the plain summed gradient (no alignment term)."""
    upd = expected_update(tasks, theta, alpha, beta) / (alpha * beta)
    ref = sum(t.grad(np.asarray(theta, dtype=float)) for t in tasks)
    return float(np.linalg.norm(upd - ref) / np.linalg.norm(ref))


def decade_ratios(residual: Callable[[float], float], alphas=(1e-2, 1e-3, 1e-4)) -> tuple[list[float], list[float]]:
    """Residuals at each alpha and the ratio between consecutive ones."""
    res = [residual(a) for a in alphas]
    ratios = [res[i] / res[i + 1] if res[i + 1] > 0 else float("inf") for i in range(len(res) - 1)]
    return res, ratios

