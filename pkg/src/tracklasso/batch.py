"""Dense stacked-trajectory solvers for the regularised x subproblem.

The whole trajectory is treated as one vector of length T * n_x.  The data
terms and the quadratic penalty coupling assemble into a single symmetric
positive definite system that is solved by Cholesky factorisation.  These
solvers scale cubically in T and exist as the reference path; the smoother
module solves the same systems in linear time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .models import (SingularSystemError, TrackingProblem, prior_mean_trajectory,
                     x_subproblem_cost)
from .smoothers import linearize

PROPOSAL_FLOOR = 1e-10


@dataclass(eq=False)
class StackedProblem:
    """Dense blocks of the stacked subproblem.

    Residual conventions: dynamics A x - (m + b) with the prior occupying
    the first block row, measurements y - (H x + e), and penalty increments
    Phi x - d with d carrying the prior mean in its first block.
    """

    y: np.ndarray
    e: np.ndarray
    m: np.ndarray
    b: np.ndarray
    d: np.ndarray
    v: np.ndarray
    eta_bar: np.ndarray
    H: np.ndarray
    R: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    Phi: np.ndarray
    T: int
    n_x: int
    n_y: int


def _block_diag(mats: np.ndarray) -> np.ndarray:
    T, p, q = mats.shape
    out = np.zeros((T * p, T * q))
    for t in range(T):
        out[t * p:(t + 1) * p, t * q:(t + 1) * q] = mats[t]
    return out


def _bidiagonal(sub_blocks: np.ndarray, T: int, n: int) -> np.ndarray:
    """Unit block lower bidiagonal matrix with -sub_blocks[t] below the diagonal."""
    out = np.eye(T * n)
    for t in range(1, T):
        out[t * n:(t + 1) * n, (t - 1) * n:t * n] = -sub_blocks[t]
    return out


def stack_problem(problem: TrackingProblem, v: np.ndarray, eta_bar: np.ndarray,
                  gamma: float, nominal: Optional[np.ndarray] = None) -> StackedProblem:
    """Assemble the dense blocks for an affine model.

    The first dynamics block row holds the prior (identity against m1) and
    the first penalty block row fixes u_0 = x_0 - m1, so B_1 and d_1 of the
    penalty targets are never consulted.
    """
    model = problem.model
    if not model.is_affine:
        raise ValueError("stack_problem needs an affine model; linearise first")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    T, n, n_y = model.T, model.n_x, model.n_y

    B, d_steps = problem.penalty_targets(nominal)
    d = np.concatenate([model.m1[None], np.asarray(d_steps[1:])]) if T > 1 else model.m1[None]

    m = np.zeros((T, n))
    m[0] = model.m1
    b = np.asarray(model.b).copy()
    b[0] = 0.0

    Qbar = np.concatenate([model.P1[None], np.asarray(model.Q[1:])]) if T > 1 else model.P1[None]

    return StackedProblem(
        y=np.asarray(problem.y).ravel(),
        e=np.asarray(model.e).ravel(),
        m=m.ravel(),
        b=b.ravel(),
        d=d.ravel(),
        v=np.asarray(v).ravel(),
        eta_bar=np.asarray(eta_bar).ravel(),
        H=_block_diag(np.asarray(model.H)),
        R=_block_diag(np.asarray(model.R)),
        A=_bidiagonal(np.asarray(model.A), T, n),
        Q=_block_diag(Qbar),
        Phi=_bidiagonal(np.asarray(B), T, n),
        T=T, n_x=n, n_y=n_y,
    )


def _spd_solve_dense(M: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    try:
        return cho_solve(cho_factor(M, lower=True), rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{name} is numerically singular") from exc


def normal_system(stacked: StackedProblem, gamma: float):
    """Normal matrix and right-hand side of the stacked subproblem."""
    Rf = cho_factor(stacked.R, lower=True)
    Qf = cho_factor(stacked.Q, lower=True)
    M = stacked.H.T @ cho_solve(Rf, stacked.H) + stacked.A.T @ cho_solve(Qf, stacked.A)
    rhs = (stacked.H.T @ cho_solve(Rf, stacked.y - stacked.e)
           + stacked.A.T @ cho_solve(Qf, stacked.m + stacked.b))
    if gamma > 0:
        M = M + gamma * stacked.Phi.T @ stacked.Phi
        rhs = rhs + gamma * stacked.Phi.T @ (stacked.d + stacked.v - stacked.eta_bar / gamma)
    return M, rhs


def batch_x_affine(stacked: StackedProblem, gamma: float) -> np.ndarray:
    """Exact minimiser of the affine subproblem, reshaped to (T, n_x)."""
    M, rhs = normal_system(stacked, gamma)
    x = _spd_solve_dense(M, rhs, "stacked normal matrix")
    return x.reshape(stacked.T, stacked.n_x)


def make_affine_x_solver():
    """x-update callable for the ADMM loop, caching the factorised normal matrix.

    The normal matrix depends only on the problem and gamma, so it is
    factorised once and only the penalty right-hand side is refreshed.
    """
    cache = {}

    def solver(problem, V, eta_bar, gamma, x_warm):
        key = (id(problem), gamma)
        if key not in cache:
            stacked = stack_problem(problem, V, eta_bar, gamma)
            M, _ = normal_system(stacked, 0.0)
            M = M + gamma * stacked.Phi.T @ stacked.Phi
            Rf = cho_factor(stacked.R, lower=True)
            Qf = cho_factor(stacked.Q, lower=True)
            rhs_data = (stacked.H.T @ cho_solve(Rf, stacked.y - stacked.e)
                        + stacked.A.T @ cho_solve(Qf, stacked.m + stacked.b))
            try:
                factor = cho_factor(M, lower=True)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError("stacked normal matrix is numerically singular") from exc
            cache[key] = (stacked, factor, rhs_data)
        stacked, factor, rhs_data = cache[key]
        rhs = rhs_data + gamma * stacked.Phi.T @ (stacked.d + V.ravel() - eta_bar.ravel() / gamma)
        return cho_solve(factor, rhs).reshape(stacked.T, stacked.n_x)

    return solver


@dataclass(frozen=True)
class LMConfig:
    """Damping schedule for the Levenberg-Marquardt solver.

    lambda0 is the initial damping, alpha the multiplicative schedule
    (divide on accept, multiply on reject), s_cov an optional damping
    metric (n_x, n_x) or (T, n_x, n_x) defaulting to the identity, i_max
    the accepted-iteration cap, and step_tol the relative step size below
    which the iteration is declared converged.
    """

    lambda0: float = 1e-2
    alpha: float = 10.0
    s_cov: Optional[np.ndarray] = None
    i_max: int = 10
    step_tol: float = 1e-8

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be nonnegative")
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        if self.i_max < 1:
            raise ValueError("i_max must be positive")


def _damping_blocks(s_cov, T: int, n: int) -> np.ndarray:
    """Block diagonal of S_t^{-1}; identity metric gives the identity."""
    if s_cov is None:
        return np.eye(T * n)
    s_cov = np.asarray(s_cov, dtype=float)
    if s_cov.ndim == 2:
        s_inv = _spd_solve_dense(s_cov, np.eye(n), "damping metric")
        return _block_diag(np.broadcast_to(s_inv, (T, n, n)))
    return _block_diag(np.stack([
        _spd_solve_dense(s_cov[t], np.eye(n), f"damping metric[{t}]") for t in range(T)
    ]))


def _linearized(problem: TrackingProblem, x: np.ndarray) -> TrackingProblem:
    if problem.is_affine:
        return problem
    return TrackingProblem(linearize(problem.model, x), problem.reg, problem.y)


def batch_gn_step(problem: TrackingProblem, x: np.ndarray, v: np.ndarray,
                  eta_bar: np.ndarray, gamma: float) -> np.ndarray:
    """One Gauss-Newton step on the stacked subproblem, linearised about x.

    In process_noise mode the penalty targets are refreshed at x, so the
    penalty operator itself is part of the linearisation.
    """
    lin = _linearized(problem, x)
    stacked = stack_problem(lin, v, eta_bar, gamma)
    try:
        return batch_x_affine(stacked, gamma)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"Gauss-Newton normal matrix is singular at the current linearisation; "
            f"consider the Levenberg-Marquardt solver ({exc})") from exc


def batch_lm_step(problem: TrackingProblem, x: np.ndarray, v: np.ndarray,
                  eta_bar: np.ndarray, gamma: float, lam: float,
                  s_cov=None) -> np.ndarray:
    """One damped step: Gauss-Newton system plus lam * S^{-1} anchored at x."""
    lin = _linearized(problem, x)
    stacked = stack_problem(lin, v, eta_bar, gamma)
    M, rhs = normal_system(stacked, gamma)
    if lam > 0:
        D = _damping_blocks(s_cov, stacked.T, stacked.n_x)
        M = M + lam * D
        rhs = rhs + lam * (D @ np.asarray(x, dtype=float).ravel())
    out = _spd_solve_dense(M, rhs, "damped normal matrix")
    return out.reshape(stacked.T, stacked.n_x)


def _rel_step(x_new: np.ndarray, x_old: np.ndarray) -> float:
    return float(np.linalg.norm(x_new - x_old) / (1.0 + np.linalg.norm(x_old)))


def batch_nonlinear_solve(problem: TrackingProblem, v: np.ndarray, eta_bar: np.ndarray,
                          gamma: float, method: str = "gn",
                          cfg: Optional[LMConfig] = None,
                          x0: Optional[np.ndarray] = None,
                          trace: Optional[List[np.ndarray]] = None,
                          lambda_trace: Optional[List[float]] = None) -> np.ndarray:
    """Iterate dense Gauss-Newton or Levenberg-Marquardt steps to solve for x.

    LM accepts a proposal only if the subproblem cost decreases (damping is
    divided by alpha), otherwise the damping is multiplied by alpha and the
    iterate kept.  lambda0 = 0 reduces LM to the Gauss-Newton iteration.
    """
    cfg = cfg or LMConfig()
    x = np.asarray(x0, dtype=float).copy() if x0 is not None else prior_mean_trajectory(problem.model)
    if trace is not None:
        trace.append(x.copy())

    if method == "gn":
        for _ in range(cfg.i_max):
            x_new = batch_gn_step(problem, x, v, eta_bar, gamma)
            step = _rel_step(x_new, x)
            x = x_new
            if trace is not None:
                trace.append(x.copy())
            if step < cfg.step_tol:
                break
        return x
    if method != "lm":
        raise ValueError(f"unknown method {method!r}")

    lam = cfg.lambda0
    targets = problem.penalty_targets(nominal=x)
    cost = x_subproblem_cost(problem, x, v, eta_bar, gamma, targets)
    i = 0
    while i < cfg.i_max:
        x_prop = batch_lm_step(problem, x, v, eta_bar, gamma, lam, cfg.s_cov)
        step = _rel_step(x_prop, x)
        if step < PROPOSAL_FLOOR:
            break
        cost_prop = x_subproblem_cost(problem, x_prop, v, eta_bar, gamma, targets)
        if lam == 0.0 or cost_prop < cost:
            x = x_prop
            targets = problem.penalty_targets(nominal=x)
            cost = x_subproblem_cost(problem, x, v, eta_bar, gamma, targets)
            if lam > 0:
                lam /= cfg.alpha
            i += 1
            if trace is not None:
                trace.append(x.copy())
            if lambda_trace is not None:
                lambda_trace.append(lam)
            if step < cfg.step_tol:
                break
        else:
            lam *= cfg.alpha
    return x
