import numpy as np
import pytest

from tailtp.surrogate import (decade_ratios, expected_update, joint_residual, quadratic_tasks,
                              relative_residual, surrogate_grad_oracle, surrogate_objective)
from tailtp.trainer import outer_step
from tailtp.verify import SURROGATE_TASKS, SURROGATE_THETA, suite_surrogate


def test_symmetric_tasks_zero_gradient():
    tasks = quadratic_tasks([[1.0], [-1.0]])
    g = surrogate_grad_oracle(tasks, np.array([0.0]), 0.1)
    np.testing.assert_allclose(g, [0.0], atol=1e-15)


def test_single_task_closed_form():
    """Two copies of 1/2 (theta - c)^2: gradient 2(theta - c) - alpha (theta - c).

    The ordering average has one j < i pair, weighted by the 1/2 in front of
    the dot-product sum.
    """
    c, alpha = 0.7, 0.05
    tasks = quadratic_tasks([[c], [c]])
    for th in (-1.0, 0.2, 3.0):
        exact = surrogate_grad_oracle(tasks, np.array([th]), alpha)
        fd = surrogate_grad_oracle(tasks, np.array([th]), alpha, method="fd")
        closed = 2 * (th - c) - alpha * (th - c)
        assert exact[0] == pytest.approx(closed, abs=1e-13)
        assert fd[0] == pytest.approx(closed, abs=1e-8)


@pytest.mark.parametrize("quartic", [0.0, 0.5])
def test_oracle_closed_form_matches_finite_differences(quartic):
    rng = np.random.default_rng(0)
    for _ in range(20):
        tasks = quadratic_tasks(rng.normal(size=(3, 2)), quartic=quartic)
        th = rng.normal(size=2)
        a = surrogate_grad_oracle(tasks, th, 0.1)
        b = surrogate_grad_oracle(tasks, th, 0.1, method="fd")
        np.testing.assert_allclose(a, b, atol=1e-7)


def test_surrogate_objective_single_ordering_value():
    tasks = quadratic_tasks([[1.0], [-1.0]])
    # at theta = 0: losses 0.5 + 0.5, gradient product (-1)(1) = -1 -> 1 + 0.5 * alpha
    assert surrogate_objective(tasks, np.array([0.0]), 0.2) == pytest.approx(1.1)


def _tasks():
    return quadratic_tasks(**SURROGATE_TASKS)


def test_expected_update_matches_surrogate_on_quadratics():
    for alpha in (1e-2, 1e-3, 1e-4):
        assert relative_residual(_tasks(), SURROGATE_THETA, alpha, 0.5) < 1e-9


def test_alignment_term_is_first_order():
    _, ratios = decade_ratios(lambda a: joint_residual(_tasks(), SURROGATE_THETA, a, 0.5))
    assert all(9 < r < 11 for r in ratios)


def test_quartic_residual_is_second_order():
    tasks = quadratic_tasks(SURROGATE_TASKS["centers"], quartic=0.5)
    _, ratios = decade_ratios(lambda a: relative_residual(tasks, SURROGATE_THETA, a, 0.5))
    assert all(90 < r < 110 for r in ratios)


def test_expected_update_uses_k_steps():
    tasks = quadratic_tasks([[1.0], [2.0], [3.0]])
    upd = expected_update(tasks, np.array([0.0]), 0.1, 1.0)
    # three SGD steps on 1/2 (theta - c)^2 from 0, averaged over orderings
    assert upd[0] < 0


def test_verify_suite_passes_and_catches_sign_flip():
    assert suite_surrogate().passed

    def flipped(initial, inner, beta, state=None):
        return outer_step(initial, inner, -beta, state)

    assert not suite_surrogate(outer=flipped).passed
