"""Kalman-smoother solvers for the regularised x subproblem.

The quadratic penalty coupling gamma/2 ||x_t - B_t x_{t-1} - d_t - v_t +
eta_bar_t/gamma||^2 fuses with the Gaussian transition density into a
modified affine model (A~, b~, Q~) with Q~^{-1} = Q^{-1} + gamma I, and the
prior fuses the same way.  The product of the two densities also leaves an
evidence factor N(zeta_t; (A_t - B_t) x_{t-1}, Q_t + I/gamma); it is
constant when B_t = A_t and otherwise enters the pass as an extra linear
measurement of x_{t-1}, keeping the smoother an exact minimiser for every
coupling.  A Rauch-Tung-Striebel pass over the fused model then solves the
subproblem in O(T) instead of the O(T^3) dense solve.  Levenberg-Marquardt
damping enters the same pass as one extra pseudo-measurement update per
step with covariance S_t / lambda.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .models import (AffineModel, Model, NonlinearModel, SingularSystemError,
                     TrackingProblem, per_step, prior_mean_trajectory,
                     time_invariant, x_subproblem_cost)

PROPOSAL_FLOOR = 1e-10


@dataclass(eq=False)
class FusedModel:
    """Affine model with the quadratic penalty folded into dynamics and prior.

    Index 0 of Atil, btil, Qtil is never consulted.  When z and sigma are
    set, the smoother applies an extra update against the pseudo
    measurement z_t with covariance sigma_t after each data update.

    Folding the penalty into the transition is lossless only when B_t = A_t;
    otherwise the Gaussian product leaves an evidence factor
    N(zeta_t; (A_t - B_t) x_{t-1}, Q_t + I/gamma) coupling to the earlier
    state.  That factor is carried as a second measurement channel: ev_H[t],
    ev_z[t], ev_R[t] describe an observation of x_t taken at step t
    (entries exist for t = 0..T-2; the channel is omitted when B_t = A_t).
    """

    Atil: np.ndarray
    btil: np.ndarray
    Qtil: np.ndarray
    m1til: np.ndarray
    P1til: np.ndarray
    H: np.ndarray
    e: np.ndarray
    R: np.ndarray
    z: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    ev_H: Optional[np.ndarray] = None
    ev_z: Optional[np.ndarray] = None
    ev_R: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.H.shape[0]

    @property
    def n_x(self) -> int:
        return self.m1til.shape[0]


@dataclass(eq=False)
class SmootherPass:
    """Forward-backward quantities of one smoother run.

    P_smooth, S, K and G are only retained when the pass is run with
    keep_covariances=True; the solver path skips them to bound memory.
    """

    m_pred: np.ndarray
    P_pred: np.ndarray
    m_filt: np.ndarray
    P_filt: np.ndarray
    m_smooth: np.ndarray
    P_smooth: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None


def _spd_inverse(mat: np.ndarray, name: str) -> np.ndarray:
    try:
        f = cho_factor(mat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{name} is not positive definite") from exc
    inv = cho_solve(f, np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def fuse_dynamics(A_t, b_t, Q_t, B_t, d_t, v_t, eta_bar_t, gamma: float):
    """Fuse one transition with the penalty coupling, returning (A~, b~, Q~)."""
    A_t, Q_t, B_t = (np.asarray(a, dtype=float) for a in (A_t, Q_t, B_t))
    b_t, d_t, v_t, eta_bar_t = (np.asarray(a, dtype=float) for a in (b_t, d_t, v_t, eta_bar_t))
    if gamma == 0:
        return A_t.copy(), b_t.copy(), Q_t.copy()
    n = A_t.shape[0]
    Qi = _spd_inverse(Q_t, "transition covariance")
    M = Qi + gamma * np.eye(n)
    Mf = cho_factor(M, lower=True)
    Atil = cho_solve(Mf, Qi @ A_t + gamma * B_t)
    btil = cho_solve(Mf, Qi @ b_t + gamma * (d_t + v_t) - eta_bar_t)
    Qtil = cho_solve(Mf, np.eye(n))
    return Atil, btil, 0.5 * (Qtil + Qtil.T)


def fuse_prior(m1, P1, v_1, eta_bar_1, gamma: float):
    """Fuse the prior with the first penalty increment u_0 = x_0 - m1."""
    m1, P1 = np.asarray(m1, dtype=float), np.asarray(P1, dtype=float)
    if gamma == 0:
        return m1.copy(), P1.copy()
    n = m1.shape[0]
    Pi = _spd_inverse(P1, "prior covariance")
    M = Pi + gamma * np.eye(n)
    Mf = cho_factor(M, lower=True)
    m1til = cho_solve(Mf, Pi @ m1 + gamma * (m1 + np.asarray(v_1, dtype=float))
                      - np.asarray(eta_bar_1, dtype=float))
    P1til = cho_solve(Mf, np.eye(n))
    return m1til, 0.5 * (P1til + P1til.T)


def build_fused(model: AffineModel, B, d, V, eta_bar, gamma: float,
                z: Optional[np.ndarray] = None,
                sigma: Optional[np.ndarray] = None) -> FusedModel:
    """Fuse a whole affine model with the penalty coupling.

    Vectorised over time when the transition covariance is time invariant;
    otherwise steps are fused one by one.
    """
    T, n = model.T, model.n_x
    V = np.asarray(V, dtype=float)
    eta_bar = np.asarray(eta_bar, dtype=float)
    if z is not None:
        z = per_step(z, T, 1, "z")
        sigma = per_step(sigma, T, 2, "sigma")
    if gamma == 0:
        return FusedModel(model.A, model.b, model.Q, model.m1.copy(), model.P1.copy(),
                          model.H, model.e, model.R, z=z, sigma=sigma)
    ev_H = ev_z = ev_R = None
    if T > 1 and not np.array_equal(np.asarray(B), np.asarray(model.A)):
        ev_H = np.asarray(model.A)[1:] - np.asarray(B)[1:]
        ev_z = (np.asarray(d) + V - eta_bar / gamma - np.asarray(model.b))[1:]
        if time_invariant(model.Q):
            ev_R = np.broadcast_to(model.Q[min(1, T - 1)] + np.eye(n) / gamma,
                                   (T - 1, n, n))
        else:
            ev_R = model.Q[1:] + np.eye(n) / gamma
    m1til, P1til = fuse_prior(model.m1, model.P1, V[0], eta_bar[0], gamma)
    if T == 1:
        Atil, btil, Qtil = model.A, model.b, model.Q
    elif time_invariant(model.Q):
        Q0 = model.Q[min(1, T - 1)]
        Qi = _spd_inverse(Q0, "transition covariance")
        Mf = cho_factor(Qi + gamma * np.eye(n), lower=True)
        Qtil0 = cho_solve(Mf, np.eye(n))
        Qtil = np.broadcast_to(0.5 * (Qtil0 + Qtil0.T), (T, n, n))
        if time_invariant(model.A) and time_invariant(B):
            At0 = cho_solve(Mf, Qi @ model.A[min(1, T - 1)] + gamma * np.asarray(B[min(1, T - 1)]))
            Atil = np.broadcast_to(At0, (T, n, n))
        else:
            # batched solve: stack the T right-hand sides column-wise
            rhs = np.matmul(Qi, np.asarray(model.A)) + gamma * np.asarray(B)
            sol = cho_solve(Mf, rhs.transpose(1, 0, 2).reshape(n, T * n))
            Atil = sol.reshape(n, T, n).transpose(1, 0, 2)
        lin = (np.asarray(model.b) @ Qi.T) + gamma * (np.asarray(d) + V) - eta_bar
        btil = cho_solve(Mf, lin.T).T
    else:
        Atil = np.zeros((T, n, n))
        btil = np.zeros((T, n))
        Qtil = np.zeros((T, n, n))
        for t in range(1, T):
            Atil[t], btil[t], Qtil[t] = fuse_dynamics(
                model.A[t], model.b[t], model.Q[t], B[t], d[t], V[t], eta_bar[t], gamma)
    return FusedModel(Atil, btil, Qtil, m1til, P1til, model.H, model.e, model.R,
                      z=z, sigma=sigma, ev_H=ev_H, ev_z=ev_z, ev_R=ev_R)


def _chol(mat: np.ndarray, what: str, t: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{what} at step {t} is not positive definite") from exc


def augmented_ks(fused: FusedModel, y: np.ndarray,
                 keep_covariances: bool = True) -> SmootherPass:
    """Rauch-Tung-Striebel smoother over a fused model.

    The prior acts as the first predicted moment pair.  Smoother gains are
    computed through the Cholesky factor of the predicted covariance; any
    factorisation failure raises SingularSystemError naming the step.
    """
    T, n = fused.T, fused.n_x
    y = np.asarray(y, dtype=float)
    pseudo = fused.z is not None

    m_pred = np.empty((T, n))
    P_pred = np.empty((T, n, n))
    m_filt = np.empty((T, n))
    P_filt = np.empty((T, n, n))
    n_y = fused.H.shape[1]
    S_hist = np.empty((T, n_y, n_y)) if keep_covariances else None
    K_hist = np.empty((T, n, n_y)) if keep_covariances else None

    m = fused.m1til
    P = fused.P1til
    for t in range(T):
        if t > 0:
            A = fused.Atil[t]
            m = A @ m + fused.btil[t]
            P = A @ P @ A.T + fused.Qtil[t]
            P = 0.5 * (P + P.T)
        m_pred[t] = m
        P_pred[t] = P
        H, e, R = fused.H[t], fused.e[t], fused.R[t]
        S = H @ P @ H.T + R
        L = _chol(S, "innovation covariance", t)
        K = cho_solve((L, True), H @ P).T
        m = m + K @ (y[t] - H @ m - e)
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        if keep_covariances:
            S_hist[t] = S
            K_hist[t] = K
        if pseudo:
            S2 = P + fused.sigma[t]
            L2 = _chol(S2, "pseudo-measurement covariance", t)
            K2 = cho_solve((L2, True), P).T
            m = m + K2 @ (fused.z[t] - m)
            P = P - K2 @ S2 @ K2.T
            P = 0.5 * (P + P.T)
        if fused.ev_H is not None and t < T - 1:
            Hv = fused.ev_H[t]
            S3 = Hv @ P @ Hv.T + fused.ev_R[t]
            L3 = _chol(S3, "coupling-evidence covariance", t)
            K3 = cho_solve((L3, True), Hv @ P).T
            m = m + K3 @ (fused.ev_z[t] - Hv @ m)
            P = P - K3 @ S3 @ K3.T
            P = 0.5 * (P + P.T)
        m_filt[t] = m
        P_filt[t] = P

    m_smooth = m_filt.copy()
    P_smooth = P_filt.copy() if keep_covariances else None
    G_hist = np.empty((T - 1, n, n)) if keep_covariances and T > 1 else None
    Ps_next = P_filt[T - 1]
    for t in range(T - 2, -1, -1):
        A = fused.Atil[t + 1]
        L = _chol(P_pred[t + 1], "predicted covariance", t + 1)
        G = cho_solve((L, True), A @ P_filt[t]).T
        m_smooth[t] = m_filt[t] + G @ (m_smooth[t + 1] - m_pred[t + 1])
        Ps_t = P_filt[t] + G @ (Ps_next - P_pred[t + 1]) @ G.T
        Ps_t = 0.5 * (Ps_t + Ps_t.T)
        Ps_next = Ps_t
        if keep_covariances:
            P_smooth[t] = Ps_t
            G_hist[t] = G
    return SmootherPass(m_pred=m_pred, P_pred=P_pred, m_filt=m_filt, P_filt=P_filt,
                        m_smooth=m_smooth, P_smooth=P_smooth, S=S_hist, K=K_hist,
                        G=G_hist)


def plain_smoother(model: AffineModel, y: np.ndarray,
                   keep_covariances: bool = True) -> SmootherPass:
    """Standard RTS smoother on an affine model (no penalty coupling)."""
    fused = FusedModel(model.A, model.b, model.Q, model.m1.copy(), model.P1.copy(),
                       model.H, model.e, model.R)
    return augmented_ks(fused, y, keep_covariances=keep_covariances)


def linearize(model: NonlinearModel, nominal: np.ndarray) -> AffineModel:
    """First-order affine expansion of a nonlinear model about a trajectory.

    A_t = J_a(t, nominal_{t-1}), b_t = a_t(nominal_{t-1}) - A_t nominal_{t-1},
    H_t = J_h(t, nominal_t), e_t = h_t(nominal_t) - H_t nominal_t.
    """
    nominal = np.asarray(nominal, dtype=float)
    T, n, n_y = model.T, model.n_x, model.n_y
    A = np.zeros((T, n, n))
    b = np.zeros((T, n))
    H = np.empty((T, n_y, n))
    e = np.empty((T, n_y))
    A[0] = np.eye(n)
    for t in range(1, T):
        At = np.asarray(model.transition_jacobian(t, nominal[t - 1]), dtype=float)
        A[t] = At
        b[t] = model.transition(t, nominal[t - 1]) - At @ nominal[t - 1]
    for t in range(T):
        Ht = np.asarray(model.measurement_jacobian(t, nominal[t]), dtype=float)
        H[t] = Ht
        e[t] = model.measurement(t, nominal[t]) - Ht @ nominal[t]
    return AffineModel(A=A, b=b, H=H, e=e, Q=model.Q, R=model.R,
                       m1=model.m1, P1=model.P1, T=T, validate=False)


def _as_nonlinear(model: Model) -> NonlinearModel:
    return model if isinstance(model, NonlinearModel) else NonlinearModel.from_affine(model)


def _rel_step(x_new: np.ndarray, x_old: np.ndarray) -> float:
    return float(np.linalg.norm(x_new - x_old) / (1.0 + np.linalg.norm(x_old)))


def plain_ieks(model: Model, y: np.ndarray, x0: Optional[np.ndarray] = None,
               i_max: int = 20, step_tol: float = 1e-8) -> np.ndarray:
    """Unregularised iterated smoother: relinearise, smooth, repeat."""
    nl = _as_nonlinear(model)
    x = np.asarray(x0, dtype=float).copy() if x0 is not None else prior_mean_trajectory(nl)
    for _ in range(i_max):
        lin = linearize(nl, x)
        x_new = plain_smoother(lin, y, keep_covariances=False).m_smooth
        step = _rel_step(x_new, x)
        x = x_new
        if step < step_tol:
            break
    return x


def _annotate(exc: SingularSystemError, i: int) -> SingularSystemError:
    err = SingularSystemError(f"inner iteration {i}: {exc}")
    err.inner_iteration = i
    return err


def gn_ieks(problem: TrackingProblem, v: np.ndarray, eta_bar: np.ndarray,
            gamma: float, x0: np.ndarray, i_max: int = 10, step_tol: float = 1e-8,
            trace: Optional[List[np.ndarray]] = None) -> np.ndarray:
    """Gauss-Newton iterated smoother for the coupled subproblem.

    Each inner iteration relinearises the model (and, in process_noise mode,
    the penalty targets) about the current trajectory, fuses, and smooths.
    Iterates match the dense Gauss-Newton sequence on the stacked problem.
    """
    nl = _as_nonlinear(problem.model)
    x = np.asarray(x0, dtype=float).copy()
    if trace is not None:
        trace.append(x.copy())
    for i in range(1, i_max + 1):
        lin = linearize(nl, x)
        B, d = problem.penalty_targets(nominal=x)
        fused = build_fused(lin, B, d, v, eta_bar, gamma)
        try:
            x_new = augmented_ks(fused, problem.y, keep_covariances=False).m_smooth
        except SingularSystemError as exc:
            raise _annotate(exc, i) from exc
        step = _rel_step(x_new, x)
        x = x_new
        if trace is not None:
            trace.append(x.copy())
        if step < step_tol:
            break
    return x


def lm_ieks(problem: TrackingProblem, v: np.ndarray, eta_bar: np.ndarray,
            gamma: float, x0: np.ndarray, cfg=None,
            trace: Optional[List[np.ndarray]] = None,
            lambda_trace: Optional[List[float]] = None) -> np.ndarray:
    """Levenberg-Marquardt iterated smoother for the coupled subproblem.

    Damping is realised as a per-step pseudo-measurement of the current
    iterate with covariance S_t / lambda, applied directly after each data
    update.  Proposals are accepted only when the subproblem cost decreases;
    lambda0 = 0 reduces the iteration to gn_ieks.
    """
    from .batch import LMConfig
    cfg = cfg or LMConfig()
    nl = _as_nonlinear(problem.model)
    T, n = problem.T, problem.n_x
    s_cov = np.asarray(cfg.s_cov, dtype=float) if cfg.s_cov is not None else np.eye(n)

    x = np.asarray(x0, dtype=float).copy()
    lam = cfg.lambda0
    targets = problem.penalty_targets(nominal=x)
    cost = x_subproblem_cost(problem, x, v, eta_bar, gamma, targets)
    if trace is not None:
        trace.append(x.copy())
    i = 0
    while i < cfg.i_max:
        lin = linearize(nl, x)
        B, d = targets
        if lam > 0:
            fused = build_fused(lin, B, d, v, eta_bar, gamma, z=x, sigma=s_cov / lam)
        else:
            fused = build_fused(lin, B, d, v, eta_bar, gamma)
        try:
            x_prop = augmented_ks(fused, problem.y, keep_covariances=False).m_smooth
        except SingularSystemError as exc:
            raise _annotate(exc, i + 1) from exc
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


def ks_x_solver():
    """x-update callable running one augmented smoother pass (affine models)."""
    def solver(problem, V, eta_bar, gamma, x_warm):
        if not problem.is_affine:
            raise ValueError("the Kalman-smoother x update needs an affine model")
        B, d = problem.penalty_targets()
        fused = build_fused(problem.model, B, d, V, eta_bar, gamma)
        return augmented_ks(fused, problem.y, keep_covariances=False).m_smooth
    return solver


def gn_ieks_x_solver(i_max: int = 10, step_tol: float = 1e-8):
    """x-update callable running the Gauss-Newton iterated smoother."""
    def solver(problem, V, eta_bar, gamma, x_warm):
        return gn_ieks(problem, V, eta_bar, gamma, x_warm, i_max=i_max, step_tol=step_tol)
    return solver


def lm_ieks_x_solver(cfg=None):
    """x-update callable running the Levenberg-Marquardt iterated smoother."""
    def solver(problem, V, eta_bar, gamma, x_warm):
        return lm_ieks(problem, V, eta_bar, gamma, x_warm, cfg)
    return solver
