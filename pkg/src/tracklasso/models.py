"""Model containers and objectives for group-sparse dynamic state estimation.

The estimation problem couples a (possibly nonlinear) state-space model with
a sum of Euclidean-norm penalties on linearly transformed state increments

    sum_t sum_g mu_g * || G_g (x_t - B_t x_{t-1} - d_t) ||_2

State trajectories are arrays of shape (T, n_x), indexed 0..T-1.  Transition
quantities (A_t, b_t, Q_t, B_t, d_t) follow the convention that index t
describes the step from t-1 into t, so index 0 of those arrays is never
consulted; the prior (m1, P1) plays that role, and the first penalty
increment is fixed to u_0 = x_0 - m1.  Time-invariant inputs may be passed
as single matrices and are kept as zero-copy broadcast views of shape
(T, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular


class SingularSystemError(RuntimeError):
    """Raised when a symmetric positive definite factorisation fails.

    The message names the matrix that could not be factorised and, where
    available, the time step or iteration in which it was assembled.
    """


def time_invariant(arr: np.ndarray) -> bool:
    """True when the leading (time) axis of a stacked array is a broadcast view."""
    return arr.shape[0] == 1 or arr.strides[0] == 0


def per_step(arr, T: int, core_ndim: int, name: str) -> np.ndarray:
    """Return a (T, ...) float view of ``arr``, broadcasting single-step input."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == core_ndim:
        return np.broadcast_to(arr, (T,) + arr.shape)
    if arr.ndim == core_ndim + 1:
        if arr.shape[0] != T:
            raise ValueError(f"{name}: leading axis must be {T}, got {arr.shape[0]}")
        return arr
    raise ValueError(f"{name}: expected {core_ndim} or {core_ndim + 1} axes, got {arr.ndim}")


def spd_chol(mat: np.ndarray, name: str) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Symmetry is required up to 1e-8 relative; factorisation happens on the
    symmetrised matrix so harmless rounding asymmetry is tolerated.
    """
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > 1e-8 * scale:
        raise ValueError(f"{name}: matrix is not symmetric")
    try:
        return np.linalg.cholesky(0.5 * (mat + mat.T))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{name}: matrix is not positive definite") from exc


def _check_spd_steps(covs: np.ndarray, name: str, start: int = 0) -> None:
    """Validate that every used step of a stacked covariance factorises."""
    if time_invariant(covs):
        spd_chol(covs[min(start, covs.shape[0] - 1)], name)
        return
    for t in range(start, covs.shape[0]):
        spd_chol(covs[t], f"{name}[{t}]")


def _half_weighted_sq(res: np.ndarray, covs: np.ndarray, start: int = 0) -> float:
    """0.5 * sum_{t >= start} res_t' covs_t^{-1} res_t."""
    res = res[start:]
    if res.shape[0] == 0:
        return 0.0
    if time_invariant(covs):
        L = spd_chol(covs[start], "covariance")
        z = solve_triangular(L, res.T, lower=True)
        return 0.5 * float(np.sum(z * z))
    total = 0.0
    for i, t in enumerate(range(start, covs.shape[0])):
        L = spd_chol(covs[t], f"covariance[{t}]")
        z = solve_triangular(L, res[i], lower=True)
        total += 0.5 * float(z @ z)
    return total


@dataclass(frozen=True, eq=False)
class AffineModel:
    """Affine Gaussian state-space model.

    x_t = A_t x_{t-1} + b_t + q_t,  q_t ~ N(0, Q_t),  t >= 1
    y_t = H_t x_t + e_t + r_t,      r_t ~ N(0, R_t),  t >= 0
    x_0 ~ N(m1, P1)

    A, b, Q entries at index 0 are never consulted.
    """

    A: np.ndarray
    b: np.ndarray
    H: np.ndarray
    e: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    m1: np.ndarray
    P1: np.ndarray
    T: Optional[int] = None
    validate: bool = True

    def __post_init__(self):
        m1 = np.asarray(self.m1, dtype=float)
        P1 = np.asarray(self.P1, dtype=float)
        n = m1.shape[0]
        T = self.T
        if T is None:
            for name in ("A", "Q"):
                arr = np.asarray(getattr(self, name))
                if arr.ndim == 3:
                    T = arr.shape[0]
                    break
            else:
                for name in ("H", "R"):
                    arr = np.asarray(getattr(self, name))
                    if arr.ndim == 3:
                        T = arr.shape[0]
                        break
                else:
                    for name in ("b", "e"):
                        arr = np.asarray(getattr(self, name))
                        if arr.ndim == 2:
                            T = arr.shape[0]
                            break
                    else:
                        raise ValueError("T cannot be inferred; pass it explicitly")
        A = per_step(self.A, T, 2, "A")
        b = per_step(self.b, T, 1, "b")
        H = per_step(self.H, T, 2, "H")
        e = per_step(self.e, T, 1, "e")
        Q = per_step(self.Q, T, 2, "Q")
        R = per_step(self.R, T, 2, "R")
        n_y = H.shape[1]
        if A.shape[1:] != (n, n):
            raise ValueError(f"A: expected ({n}, {n}) blocks, got {A.shape[1:]}")
        if Q.shape[1:] != (n, n):
            raise ValueError(f"Q: expected ({n}, {n}) blocks, got {Q.shape[1:]}")
        if b.shape[1] != n:
            raise ValueError(f"b: expected length-{n} blocks, got {b.shape[1]}")
        if H.shape[2] != n:
            raise ValueError(f"H: expected {n} columns, got {H.shape[2]}")
        if e.shape[1] != n_y or R.shape[1:] != (n_y, n_y):
            raise ValueError("e and R must match the measurement dimension of H")
        if P1.shape != (n, n):
            raise ValueError(f"P1: expected ({n}, {n}), got {P1.shape}")
        if self.validate:
            spd_chol(P1, "P1")
            _check_spd_steps(Q, "Q", start=1 if T > 1 else 0)
            _check_spd_steps(R, "R")
        for name, val in (("A", A), ("b", b), ("H", H), ("e", e), ("Q", Q),
                          ("R", R), ("m1", m1), ("P1", P1), ("T", int(T))):
            object.__setattr__(self, name, val)

    @property
    def n_x(self) -> int:
        return self.m1.shape[0]

    @property
    def n_y(self) -> int:
        return self.H.shape[1]

    @property
    def is_affine(self) -> bool:
        return True


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    """State-space model with callable transition and measurement functions.

    ``transition(t, x)`` maps x_{t-1} to the mean of x_t (valid for t >= 1),
    ``measurement(t, x)`` maps x_t to the mean of y_t (valid for t >= 0).
    The Jacobian callables share those signatures and return (n_x, n_x) and
    (n_y, n_x) arrays.
    """

    transition: Callable[[int, np.ndarray], np.ndarray]
    transition_jacobian: Callable[[int, np.ndarray], np.ndarray]
    measurement: Callable[[int, np.ndarray], np.ndarray]
    measurement_jacobian: Callable[[int, np.ndarray], np.ndarray]
    Q: np.ndarray
    R: np.ndarray
    m1: np.ndarray
    P1: np.ndarray
    T: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be a positive step count")
        m1 = np.asarray(self.m1, dtype=float)
        P1 = np.asarray(self.P1, dtype=float)
        n = m1.shape[0]
        Q = per_step(self.Q, self.T, 2, "Q")
        R = per_step(self.R, self.T, 2, "R")
        if Q.shape[1:] != (n, n) or P1.shape != (n, n):
            raise ValueError("Q blocks and P1 must be (n_x, n_x)")
        spd_chol(P1, "P1")
        _check_spd_steps(Q, "Q", start=1 if self.T > 1 else 0)
        _check_spd_steps(R, "R")
        for name, val in (("Q", Q), ("R", R), ("m1", m1), ("P1", P1)):
            object.__setattr__(self, name, val)

    @property
    def n_x(self) -> int:
        return self.m1.shape[0]

    @property
    def n_y(self) -> int:
        return self.R.shape[1]

    @property
    def is_affine(self) -> bool:
        return False

    @classmethod
    def from_affine(cls, model: AffineModel) -> "NonlinearModel":
        """Wrap an affine model in callable form (Jacobians are exact)."""
        A, b, H, e = model.A, model.b, model.H, model.e
        return cls(
            transition=lambda t, x: A[t] @ x + b[t],
            transition_jacobian=lambda t, x: A[t],
            measurement=lambda t, x: H[t] @ x + e[t],
            measurement_jacobian=lambda t, x: H[t],
            Q=model.Q, R=model.R, m1=model.m1, P1=model.P1, T=model.T,
        )


Model = Union[AffineModel, NonlinearModel]


@dataclass(frozen=True, eq=False)
class GroupRegularizer:
    """Catalogue entry for the generalised group-lasso penalty.

    ``groups`` holds one (p_g, n_x) matrix per group, shared across time
    steps.  ``target_mode`` selects what the penalty acts on: "state" zeroes
    B_t and d_t so increments are plain states, "process_noise" aims at
    x_t - a_t(x_{t-1}) through the affine approximation of the transition.
    Explicit B (T, n_x, n_x) and d (T, n_x) arrays override the mode when
    given; their index-0 entries are never consulted.
    """

    groups: tuple
    weights: np.ndarray
    target_mode: str = "state"
    B: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    G_stack: np.ndarray = field(init=False, repr=False)
    slices: tuple = field(init=False, repr=False)

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=float) for g in self.groups)
        if any(g.ndim != 2 for g in groups):
            raise ValueError("every group matrix must be two-dimensional")
        cols = {g.shape[1] for g in groups}
        if len(cols) > 1:
            raise ValueError("group matrices disagree on the state dimension")
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if weights.shape == (1,) and len(groups) > 1:
            weights = np.full(len(groups), weights[0])
        if weights.shape != (len(groups),):
            raise ValueError("need one weight per group")
        # zero is allowed so a penalty can be switched off per group
        if np.any(weights < 0):
            raise ValueError("group weights must be nonnegative")
        if self.target_mode not in ("state", "process_noise"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        n_x = cols.pop() if cols else 0
        if groups:
            stack = np.concatenate(groups, axis=0)
        else:
            stack = np.zeros((0, n_x))
        slices = []
        offset = 0
        for g in groups:
            slices.append(slice(offset, offset + g.shape[0]))
            offset += g.shape[0]
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "G_stack", stack)
        object.__setattr__(self, "slices", tuple(slices))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_x(self) -> int:
        return self.G_stack.shape[1]

    @property
    def total_rows(self) -> int:
        return self.G_stack.shape[0]

    def group_norms(self, rows: np.ndarray) -> np.ndarray:
        """Per-group Euclidean norms of stacked penalty rows, shape (T, n_groups)."""
        out = np.empty(rows.shape[:-1] + (self.n_groups,))
        for g, sl in enumerate(self.slices):
            out[..., g] = np.linalg.norm(rows[..., sl], axis=-1)
        return out


def _difference_matrix(n_x: int) -> np.ndarray:
    D = np.zeros((n_x - 1, n_x))
    idx = np.arange(n_x - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return D


def make_regularizer(kind: str, n_x: int, groups: Optional[Sequence[Sequence[int]]] = None,
                     weights=1.0, target_mode: str = "state") -> GroupRegularizer:
    """Build a named penalty structure.

    Kinds: ``l2`` (one identity group), ``lasso`` (one row selector per
    component), ``iso_tv`` (all forward differences as a single group),
    ``aniso_tv`` (each forward difference its own group), ``fused`` (lasso
    rows plus anisotropic difference rows), ``group`` (selector blocks over
    the given 0-based index sets), ``sparse_group`` (lasso rows plus the
    selector blocks).
    """
    if n_x < 1:
        raise ValueError("n_x must be positive")
    eye = np.eye(n_x)

    def selector(idx):
        idx = list(idx)
        if len(idx) == 0:
            raise ValueError("group index sets must be nonempty")
        if len(set(idx)) != len(idx):
            raise ValueError("group index sets must not repeat components")
        if any(i < 0 or i >= n_x for i in idx):
            raise ValueError(f"group indices must lie in [0, {n_x})")
        return eye[idx]

    if kind == "l2":
        mats = [eye]
    elif kind == "lasso":
        mats = [eye[i:i + 1] for i in range(n_x)]
    elif kind == "iso_tv":
        if n_x < 2:
            raise ValueError("iso_tv needs n_x >= 2")
        mats = [_difference_matrix(n_x)]
    elif kind == "aniso_tv":
        if n_x < 2:
            raise ValueError("aniso_tv needs n_x >= 2")
        D = _difference_matrix(n_x)
        mats = [D[i:i + 1] for i in range(n_x - 1)]
    elif kind == "fused":
        if n_x < 2:
            raise ValueError("fused needs n_x >= 2")
        D = _difference_matrix(n_x)
        mats = [eye[i:i + 1] for i in range(n_x)] + [D[i:i + 1] for i in range(n_x - 1)]
    elif kind == "group":
        if not groups:
            raise ValueError("kind 'group' needs explicit index sets")
        mats = [selector(idx) for idx in groups]
    elif kind == "sparse_group":
        if not groups:
            raise ValueError("kind 'sparse_group' needs explicit index sets")
        mats = [eye[i:i + 1] for i in range(n_x)] + [selector(idx) for idx in groups]
    else:
        raise ValueError(f"unknown regularizer kind {kind!r}")
    return GroupRegularizer(groups=tuple(mats), weights=weights, target_mode=target_mode)


def sparsity_target(model: Model, mode: str, nominal: Optional[np.ndarray] = None):
    """Per-step (B, d) defining the penalised increment x_t - B_t x_{t-1} - d_t.

    ``state`` returns zeros.  ``process_noise`` returns (A_t, b_t) for affine
    models; for nonlinear models it linearises the transition about the
    nominal trajectory, B_t = J_a(t, nominal_{t-1}) and
    d_t = a_t(nominal_{t-1}) - B_t nominal_{t-1}.  Index-0 entries are
    placeholders; consumers substitute the prior mean there.
    """
    T, n = model.T, model.n_x
    if mode == "state":
        return (np.broadcast_to(np.zeros((n, n)), (T, n, n)),
                np.broadcast_to(np.zeros(n), (T, n)))
    if mode != "process_noise":
        raise ValueError(f"unknown sparsity mode {mode!r}")
    if isinstance(model, AffineModel):
        return model.A, model.b
    if nominal is None:
        raise ValueError("process_noise targets for a nonlinear model need a nominal trajectory")
    nominal = np.asarray(nominal, dtype=float)
    B = np.zeros((T, n, n))
    d = np.zeros((T, n))
    for t in range(1, T):
        Bt = np.asarray(model.transition_jacobian(t, nominal[t - 1]), dtype=float)
        B[t] = Bt
        d[t] = model.transition(t, nominal[t - 1]) - Bt @ nominal[t - 1]
    return B, d


@dataclass(frozen=True, eq=False)
class TrackingProblem:
    """A model, a group penalty, and the observed measurement sequence."""

    model: Model
    reg: GroupRegularizer
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2:
            raise ValueError("y must have shape (T, n_y)")
        if y.shape[0] != self.model.T:
            raise ValueError(f"y has {y.shape[0]} steps, model has {self.model.T}")
        if y.shape[1] != self.model.n_y:
            raise ValueError("y disagrees with the model measurement dimension")
        if self.reg.n_groups and self.reg.n_x != self.model.n_x:
            raise ValueError("penalty matrices disagree with the state dimension")
        object.__setattr__(self, "y", y)

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def is_affine(self) -> bool:
        return self.model.is_affine

    def penalty_targets(self, nominal: Optional[np.ndarray] = None):
        """(B, d) arrays used by the penalty; index 0 is never consulted."""
        if self.reg.B is not None:
            T, n = self.T, self.n_x
            return (per_step(self.reg.B, T, 2, "B"),
                    per_step(self.reg.d if self.reg.d is not None else np.zeros(n), T, 1, "d"))
        return sparsity_target(self.model, self.reg.target_mode, nominal)

    def u(self, x: np.ndarray, targets=None) -> np.ndarray:
        """Penalised increments u_t; u_0 = x_0 - m1 regardless of targets."""
        x = np.asarray(x, dtype=float)
        if targets is None:
            targets = self.penalty_targets(nominal=x)
        B, d = targets
        out = np.empty_like(x)
        out[0] = x[0] - self.model.m1
        if x.shape[0] > 1:
            out[1:] = x[1:] - np.einsum("tij,tj->ti", B[1:], x[:-1]) - d[1:]
        return out


def prior_mean_trajectory(model: Model) -> np.ndarray:
    """Deterministic trajectory from propagating the prior mean, used as a default start."""
    x = np.empty((model.T, model.n_x))
    x[0] = model.m1
    if isinstance(model, AffineModel):
        for t in range(1, model.T):
            x[t] = model.A[t] @ x[t - 1] + model.b[t]
    else:
        for t in range(1, model.T):
            x[t] = model.transition(t, x[t - 1])
    return x


def measurement_residuals(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y_t minus the model measurement of x_t, shape (T, n_y)."""
    if isinstance(model, AffineModel):
        return y - np.einsum("tij,tj->ti", model.H, x) - model.e
    out = np.empty_like(y, dtype=float)
    for t in range(model.T):
        out[t] = y[t] - model.measurement(t, x[t])
    return out


def dynamics_residuals(model: Model, x: np.ndarray) -> np.ndarray:
    """Prior and transition residuals: r_0 = x_0 - m1, r_t = x_t - a_t(x_{t-1})."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[0] = x[0] - model.m1
    if x.shape[0] == 1:
        return out
    if isinstance(model, AffineModel):
        out[1:] = x[1:] - np.einsum("tij,tj->ti", model.A[1:], x[:-1]) - model.b[1:]
    else:
        for t in range(1, model.T):
            out[t] = x[t] - model.transition(t, x[t - 1])
    return out


def data_cost(problem: TrackingProblem, x: np.ndarray) -> float:
    """Quadratic data terms: measurement, transition, and prior misfit."""
    model = problem.model
    r_meas = measurement_residuals(model, x, problem.y)
    r_dyn = dynamics_residuals(model, x)
    cost = _half_weighted_sq(r_meas, model.R)
    cost += _half_weighted_sq(r_dyn[:1], model.P1[None])
    cost += _half_weighted_sq(r_dyn, model.Q, start=1)
    return cost


def penalty_value(problem: TrackingProblem, x: np.ndarray, targets=None) -> float:
    """sum_t sum_g mu_g ||G_g u_t||_2 evaluated at x."""
    reg = problem.reg
    if reg.n_groups == 0:
        return 0.0
    U = problem.u(x, targets)
    norms = reg.group_norms(U @ reg.G_stack.T)
    return float(np.sum(norms @ reg.weights))


def objective(problem: TrackingProblem, x: np.ndarray) -> float:
    """Regularised estimation objective at trajectory x.

    In process_noise mode the penalty targets are linearised about x itself,
    which makes the penalised increment the exact transition residual.
    """
    return data_cost(problem, x) + penalty_value(problem, x)


def x_subproblem_cost(problem: TrackingProblem, x: np.ndarray, v: np.ndarray,
                      eta_bar: np.ndarray, gamma: float, targets=None) -> float:
    """Data terms plus the quadratic coupling gamma/2 ||u(x) - v + eta_bar/gamma||^2.

    This is the objective the x update minimises at fixed (v, eta).  With
    gamma = 0 the coupling vanishes and the plain data cost is returned.
    """
    cost = data_cost(problem, x)
    if gamma > 0:
        U = problem.u(x, targets)
        diff = U - v + eta_bar / gamma
        cost += 0.5 * gamma * float(np.sum(diff * diff))
    return cost


@dataclass(eq=False)
class SplitState:
    """Primal and dual variables of the split problem.

    eta packs the multipliers as (T, n_x + total_rows): the first n_x
    columns pair with u - v, the rest pair with w - G v.
    """

    x: np.ndarray
    w: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    n_x: int

    @property
    def eta_bar(self) -> np.ndarray:
        return self.eta[:, :self.n_x]

    @property
    def eta_under(self) -> np.ndarray:
        return self.eta[:, self.n_x:]

    def copy(self) -> "SplitState":
        return SplitState(self.x.copy(), self.w.copy(), self.v.copy(),
                          self.eta.copy(), self.n_x)

    @classmethod
    def feasible(cls, problem: TrackingProblem, x0: np.ndarray) -> "SplitState":
        """Feasible start: v = u(x0), w = G v, eta = 0."""
        x0 = np.asarray(x0, dtype=float).copy()
        U = problem.u(x0)
        V = U.copy()
        W = V @ problem.reg.G_stack.T
        eta = np.zeros((problem.T, problem.n_x + problem.reg.total_rows))
        return cls(x=x0, w=W, v=V, eta=eta, n_x=problem.n_x)


def augmented_lagrangian(problem: TrackingProblem, state: SplitState, gamma: float) -> float:
    """Value of the augmented Lagrangian at the given split state."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    reg = problem.reg
    U = problem.u(state.x)
    w_norms = reg.group_norms(state.w)
    value = data_cost(problem, state.x) + float(np.sum(w_norms @ reg.weights))
    ru = U - state.v
    rw = state.w - state.v @ reg.G_stack.T
    value += float(np.sum(state.eta_bar * ru)) + 0.5 * gamma * float(np.sum(ru * ru))
    value += float(np.sum(state.eta_under * rw)) + 0.5 * gamma * float(np.sum(rw * rw))
    return value
