"""Dense stacked solvers for the x subproblem."""

import numpy as np
import pytest
from scipy.optimize import minimize

from tracklasso.batch import (
    LMConfig,
    batch_gn_step,
    batch_lm_step,
    batch_nonlinear_solve,
    batch_x_affine,
    stack_problem,
)
from tracklasso.models import (
    NonlinearModel,
    TrackingProblem,
    make_regularizer,
    x_subproblem_cost,
)
from tracklasso.verify import random_affine_problem


def quadratic_problem():
    """T=1 scalar model with h(x) = x^2; GN/LM steps are hand-derivable."""
    model = NonlinearModel(
        transition=lambda t, x: x,
        transition_jacobian=lambda t, x: np.eye(1),
        measurement=lambda t, x: np.array([x[0] ** 2]),
        measurement_jacobian=lambda t, x: np.array([[2.0 * x[0]]]),
        Q=np.eye(1), R=np.eye(1), m1=np.array([0.5]), P1=np.eye(1), T=1)
    reg = make_regularizer("l2", 1, weights=0.0)
    return TrackingProblem(model=model, reg=reg, y=np.array([[2.0]]))


def test_gn_step_hand_value():
    # linearise x^2 at x0=1: H=2, e=-1; (H^2+1)x = H(y-e)+m1 -> 1.3
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    x1 = batch_gn_step(prob, np.array([[1.0]]), z, z, 0.0)
    np.testing.assert_allclose(x1, [[1.3]], rtol=1e-12)


def test_lm_step_hand_value():
    # lam=1, S=I adds (x-x0) to the normal equations -> 1.25
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    x1 = batch_lm_step(prob, np.array([[1.0]]), z, z, 0.0, lam=1.0)
    np.testing.assert_allclose(x1, [[1.25]], rtol=1e-12)


def test_lm_step_zero_damping_is_gn():
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    gn = batch_gn_step(prob, np.array([[1.0]]), z, z, 0.0)
    lm = batch_lm_step(prob, np.array([[1.0]]), z, z, 0.0, lam=0.0)
    np.testing.assert_allclose(lm, gn, rtol=1e-12)


def test_heavy_damping_freezes_iterate():
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    x0 = np.array([[1.0]])
    x1 = batch_lm_step(prob, x0, z, z, 0.0, lam=1e12)
    np.testing.assert_allclose(x1, x0, atol=1e-9)


def test_nonlinear_solve_gn_trace():
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    trace = []
    batch_nonlinear_solve(prob, z, z, 0.0, method="gn",
                          cfg=LMConfig(i_max=1), x0=np.array([[1.0]]),
                          trace=trace)
    assert len(trace) == 2
    np.testing.assert_allclose(trace[0], [[1.0]])
    np.testing.assert_allclose(trace[1], [[1.3]], rtol=1e-12)


def test_nonlinear_solve_lm_accepts_and_relaxes():
    # theta drops from 0.625 to ~0.377, so the first proposal is accepted
    # and lambda is divided by alpha
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    lambdas = []
    x = batch_nonlinear_solve(prob, z, z, 0.0, method="lm",
                              cfg=LMConfig(lambda0=1.0, alpha=10.0, i_max=1),
                              x0=np.array([[1.0]]), lambda_trace=lambdas)
    np.testing.assert_allclose(x, [[1.25]], rtol=1e-12)
    assert lambdas[-1] == pytest.approx(0.1)


def test_nonlinear_solve_converges_to_stationary_point():
    prob = quadratic_problem()
    z = np.zeros((1, 1))
    x = batch_nonlinear_solve(prob, z, z, 0.0, method="gn",
                              cfg=LMConfig(i_max=50, step_tol=1e-12),
                              x0=np.array([[1.0]]))
    # stationarity of 0.5(2 - x^2)^2 + 0.5(x - 0.5)^2
    g = -2.0 * x[0, 0] * (2.0 - x[0, 0] ** 2) + (x[0, 0] - 0.5)
    assert abs(g) < 1e-8


def test_stack_problem_shapes():
    from tracklasso.batch import normal_system

    rng = np.random.default_rng(3)
    prob = random_affine_problem(rng, T=6, n_x=3, n_y=2)
    V = rng.normal(size=(6, 3))
    eta = rng.normal(size=(6, 3))
    stacked = stack_problem(prob, V, eta, 0.7)
    n = 6 * 3
    assert stacked.H.shape == (6 * 2, n)
    assert stacked.A.shape == (n, n)
    assert stacked.Phi.shape == (n, n)
    M, rhs = normal_system(stacked, 0.7)
    assert M.shape == (n, n) and rhs.shape == (n,)
    np.testing.assert_allclose(M, M.T, atol=1e-12)


@pytest.mark.parametrize("target_mode", ["state", "process_noise"])
def test_batch_affine_minimises_subproblem(target_mode):
    # scipy minimising the cost function is an independent check on the
    # normal-equation assembly
    rng = np.random.default_rng(11)
    prob = random_affine_problem(rng, T=5, n_x=2, n_y=2, kind="l2",
                                 target_mode=target_mode)
    gamma = 0.8
    V = rng.normal(size=(5, 2))
    eta = rng.normal(size=(5, 2))
    x_hat = batch_x_affine(stack_problem(prob, V, eta, gamma), gamma)

    def cost(flat):
        return x_subproblem_cost(prob, flat.reshape(5, 2), V, eta, gamma)

    res = minimize(cost, x_hat.ravel() + 0.5, method="BFGS",
                   options=dict(gtol=1e-12, maxiter=500))
    np.testing.assert_allclose(x_hat.ravel(), res.x, atol=1e-5)
    assert cost(x_hat.ravel()) <= res.fun + 1e-10


def test_batch_affine_gamma_zero_is_unregularised_fit():
    rng = np.random.default_rng(4)
    prob = random_affine_problem(rng, T=7, n_x=2, n_y=1, kind="l2")
    z = np.zeros((7, 2))
    x_hat = batch_x_affine(stack_problem(prob, z, z, 0.0), 0.0)

    def cost(flat):
        return x_subproblem_cost(prob, flat.reshape(7, 2), z, z, 0.0)

    res = minimize(cost, x_hat.ravel() + 0.3, method="BFGS",
                   options=dict(gtol=1e-12, maxiter=500))
    assert cost(x_hat.ravel()) <= res.fun + 1e-10
