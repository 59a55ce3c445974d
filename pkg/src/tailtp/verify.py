"""Self-check suites behind ``tailtp verify``.

Each suite returns a :class:`SuiteResult` with the worst observed error and
the bound it was held to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, gradcheck
from .encoders import ModelSpec, encode, init_params
from .evalkit import hit_ratio, ndcg, rank_target
from .objectives import MiniBatch, adversarial_losses, bce_loss, disc_loglik, init_disc_params
from .surrogate import decade_ratios, joint_residual, quadratic_tasks, relative_residual
from .trainer import outer_step

GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    max_error: float
    bound: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<28} max_error={self.max_error:.3e}  bound={self.bound:.1e}  ({self.seconds:.1f}s)"


def random_instance(rng: np.random.Generator, kind: str):
    n_items = int(rng.integers(4, 11))
    d = int(rng.integers(2, 5))
    L = int(rng.integers(2, 6))
    K = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    spec = ModelSpec(kind, n_items, d, L)
    params = init_params(spec, rng)
    # perturb so nothing sits at a symmetric point
    for k in params:
        params[k] = params[k] + 0.3 * rng.normal(size=params[k].shape)
    params["item_emb"][0] = 0.0
    windows = rng.integers(1, n_items + 1, size=(K, L))
    pad = rng.integers(0, L, size=K)
    for row, p in zip(windows, pad):
        row[:p] = 0
    batch = MiniBatch(0, windows, rng.integers(1, n_items + 1, size=K),
                      rng.integers(1, n_items + 1, size=(K, n)), int(rng.integers(0, 2)))
    return spec, params, batch


def suite_gradcheck(instances: int = 100, seed: int = 0) -> SuiteResult:
    """Encoders under BCE and the discriminator path vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kind = ("gru", "attention")[i % 2]
        spec, params, batch = random_instance(rng, kind)
        worst = max(worst, gradcheck(lambda p: bce_loss(batch, p, kind), params))
        disc = init_disc_params(spec.dim, spec.dim, rng)
        both = ParamSet({**params, **disc})

        def adv(p, batch=batch, kind=kind):
            return disc_loglik(encode(kind, batch.windows, p), batch.label, p)

        worst = max(worst, gradcheck(adv, both))
    return SuiteResult("gradcheck", worst, GRAD_TOL, worst < GRAD_TOL)


def suite_stop_gradient(instances: int = 20, seed: int = 1) -> SuiteResult:
    """d(disc loss)/d(theta) and d(predictor loss)/d(theta_d) must vanish."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        kind = ("gru", "attention")[i % 2]
        spec, params, batch = random_instance(rng, kind)
        disc = init_disc_params(spec.dim, spec.dim, rng)
        leaves, dleaves = params.nodes(), disc.nodes()
        out = adversarial_losses(batch, leaves, dleaves, 0.5, kind)
        ad.backward(out.discriminator)
        worst = max([worst] + [float(np.abs(n.grad).max()) for n in leaves.values()])
        leaves, dleaves = params.nodes(), disc.nodes()
        out = adversarial_losses(batch, leaves, dleaves, 0.5, kind)
        ad.backward(out.predictor)
        worst = max([worst] + [float(np.abs(n.grad).max()) for n in dleaves.values()])
    return SuiteResult("stop_gradient", worst, 0.0, worst == 0.0)


SURROGATE_THETA = np.array([0.3, 0.7])
SURROGATE_TASKS = dict(
    centers=[[1.0, -0.5], [-1.0, 2.0]],
    curvatures=[np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([[1.0, -0.2], [-0.2, 3.0]])],
)


def suite_surrogate(outer: Callable = outer_step, beta: float = 0.5) -> SuiteResult:
    """Expected two-step update vs the ordering-averaged surrogate gradient.

    Three facts are checked on 2-parameter tasks:
      * quadratics: update / (alpha * beta) equals the surrogate gradient to
        round-off (the expansion is exact there);
      * the update differs from the plain summed gradient at first order
        (residual ratio ~10 per decade of alpha), i.e. the alignment term is
        really present;
      * with a quartic term, the residual against the surrogate is second
        order (ratio ~100 per decade).
    """
    quad = quadratic_tasks(**SURROGATE_TASKS)
    quart = quadratic_tasks(SURROGATE_TASKS["centers"], quartic=0.5)
    th = SURROGATE_THETA
    exact = max(relative_residual(quad, th, a, beta, outer=outer) for a in (1e-2, 1e-3, 1e-4))
    _, first = decade_ratios(lambda a: joint_residual(quad, th, a, beta) if outer is outer_step
                             else _joint_residual_with(quad, th, a, beta, outer))
    _, second = decade_ratios(lambda a: relative_residual(quart, th, a, beta, outer=outer))
    ok = exact < 1e-9 and all(8 < r < 12 for r in first) and all(80 < r < 120 for r in second)
    return SuiteResult("surrogate_equivalence", exact, 1e-9, ok)


def _joint_residual_with(tasks, theta, alpha, beta, outer):
    from .surrogate import expected_update
    upd = expected_update(tasks, theta, alpha, beta, outer=outer) / (alpha * beta)
    ref = sum(t.grad(theta) for t in tasks)
    return float(np.linalg.norm(upd - ref) / np.linalg.norm(ref))


def suite_metrics(seed: int = 2) -> SuiteResult:
    checks = [
        rank_target(np.array([3.0, 5.0, 4.0]), 0) == 3,
        rank_target(np.ones(7), 0) == 1,
        hit_ratio([1, 11, 5, 30], 10) == 0.5,
        ndcg([3], 10) == 0.5,
        ndcg([1], 10) == 1.0,
        ndcg([11], 10) == 0.0,
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(1000):
        ranks = rng.integers(1, 60, size=int(rng.integers(1, 50)))
        n = int(rng.integers(1, 30))
        worst = max(worst, ndcg(ranks, n) - hit_ratio(ranks, n))
    return SuiteResult("metrics", max(worst, 0.0), 0.0, all(checks) and worst <= 0.0)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradcheck": suite_gradcheck,
    "stop_gradient": suite_stop_gradient,
    "surrogate": suite_surrogate,
    "metrics": suite_metrics,
}


def run_all(suites: dict[str, Callable[[], SuiteResult]] = SUITES) -> list[SuiteResult]:
    out = []
    for fn in suites.values():
        t = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - t
        out.append(res)
    return out
