"""Cross-oracle consistency checks behind the ``verify`` CLI command.

Each check either compares two independent computations of the same
quantity (smoother vs stacked solve, shrinkage vs grid search, analytic
vs finite-difference Jacobians) or asserts a proven property of the
iteration (augmented-Lagrangian descent, fixed-point contraction).
Checks are deterministic given the seed, and every failure carries the
arrays needed to replay it.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .admm import (
    MadmmOptions,
    block_shrink,
    omega_norm_sq,
    run_madmm,
    update_dual_all,
    update_v_all,
    update_w_all,
    v_update_factor,
)
from .batch import LMConfig, batch_nonlinear_solve, batch_x_affine, stack_problem
from .models import (
    AffineModel,
    SplitState,
    TrackingProblem,
    augmented_lagrangian,
    make_regularizer,
)
from .scenarios import (
    ScenarioParams,
    coordinated_turn_model,
    ct_jacobian,
    ct_transition,
    range_model,
    scenario_defaults,
    simulate_range,
    simulate_wiener,
)
from .smoothers import augmented_ks, build_fused, gn_ieks, lm_ieks
from .solve import initial_trajectory, make_x_solver


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    payload: Optional[Dict[str, np.ndarray]] = None


def _spd(rng: np.random.Generator, n: int, jitter: float) -> np.ndarray:
    M = rng.normal(size=(n, n))
    return M @ M.T / n + jitter * np.eye(n)


def random_affine_problem(rng: np.random.Generator, T: Optional[int] = None,
                          n_x: Optional[int] = None, n_y: Optional[int] = None,
                          kind: Optional[str] = None,
                          target_mode: Optional[str] = None) -> TrackingProblem:
    """Random well-posed affine tracking problem with a random penalty."""
    T = int(rng.integers(8, 51)) if T is None else T
    n_x = int(rng.integers(1, 7)) if n_x is None else n_x
    n_y = int(rng.integers(1, n_x + 1)) if n_y is None else n_y
    A = rng.normal(size=(n_x, n_x))
    radius = max(np.abs(np.linalg.eigvals(A)))
    if radius > 0.95:
        A *= 0.95 / radius
    b = 0.1 * rng.normal(size=n_x)
    H = rng.normal(size=(n_y, n_x))
    Q = _spd(rng, n_x, 0.3)
    R = _spd(rng, n_y, 0.3)
    P1 = _spd(rng, n_x, 0.5)
    m1 = rng.normal(size=n_x)
    model = AffineModel(A=A, b=b, H=H, e=np.zeros(n_y), Q=Q, R=R, m1=m1, P1=P1, T=T)

    x = np.empty((T, n_x))
    Lq, Lp = np.linalg.cholesky(Q), np.linalg.cholesky(P1)
    Lr = np.linalg.cholesky(R)
    x[0] = m1 + Lp @ rng.standard_normal(n_x)
    for t in range(1, T):
        x[t] = A @ x[t - 1] + b + Lq @ rng.standard_normal(n_x)
    y = x @ H.T + rng.standard_normal((T, n_y)) @ Lr.T

    if kind is None:
        kinds = ["l2", "lasso", "group"]
        if n_x >= 2:
            kinds += ["aniso_tv", "fused"]
        kind = kinds[int(rng.integers(len(kinds)))]
    groups = None
    if kind in ("group", "sparse_group"):
        k = int(rng.integers(1, n_x + 1))
        groups = [sorted(rng.choice(n_x, size=k, replace=False).tolist())]
    if target_mode is None:
        target_mode = ("state", "process_noise")[int(rng.integers(2))]
    reg = make_regularizer(kind, n_x, groups=groups,
                           weights=rng.uniform(0.5, 2.0), target_mode=target_mode)
    return TrackingProblem(model=model, reg=reg, y=y)


def _problem_payload(problem: TrackingProblem, **extra) -> Dict[str, np.ndarray]:
    m = problem.model
    payload = dict(Q=np.asarray(m.Q), R=np.asarray(m.R), m1=np.asarray(m.m1),
                   P1=np.asarray(m.P1), y=np.asarray(problem.y),
                   G_stack=problem.reg.G_stack, weights=problem.reg.weights)
    for name in ("A", "b", "H", "e"):
        if hasattr(m, name):
            payload[name] = np.asarray(getattr(m, name))
    payload.update({k: np.asarray(v) for k, v in extra.items()})
    return payload


def check_affine_equivalence(seed: int, cases: int = 10, tol: float = 1e-8) -> CheckResult:
    """Augmented smoother vs stacked normal-equation solve on random systems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        problem = random_affine_problem(rng, n_x=int(rng.integers(1, 5)))
        gamma = float(rng.uniform(0.5, 2.0))
        V = rng.normal(size=(problem.T, problem.n_x))
        eta_bar = rng.normal(size=(problem.T, problem.n_x))
        B, d = problem.penalty_targets()
        fused = build_fused(problem.model, B, d, V, eta_bar, gamma)
        x_ks = augmented_ks(fused, problem.y, keep_covariances=False).m_smooth
        x_batch = batch_x_affine(stack_problem(problem, V, eta_bar, gamma), gamma)
        rel = np.linalg.norm(x_ks - x_batch) / max(1.0, np.linalg.norm(x_batch))
        worst = max(worst, rel)
        if rel > tol:
            return CheckResult("smoother_vs_batch_affine", False,
                               f"relative gap {rel:.3e} > {tol:.0e}",
                               _problem_payload(problem, V=V, eta_bar=eta_bar,
                                                gamma=gamma))
    return CheckResult("smoother_vs_batch_affine", True,
                       f"{cases} systems, worst gap {worst:.3e}")


def _range_problem(seed: int, T: int = 20) -> TrackingProblem:
    params = scenario_defaults("range", T=T, seed=seed)
    data, model = simulate_range(params)
    reg = make_regularizer("group", 4, groups=[[2, 3]], weights=1.0,
                           target_mode="state")
    return TrackingProblem(model=model, reg=reg, y=data.y)


def check_ieks_vs_batch(seed: int, tol: float = 1e-7) -> CheckResult:
    """GN and LM iterated-smoother inner iterates vs dense stacked iterates."""
    problem = _range_problem(seed)
    rng = np.random.default_rng(seed + 1)
    V = 0.1 * rng.normal(size=(problem.T, 4))
    eta_bar = 0.1 * rng.normal(size=(problem.T, 4))
    x0 = initial_trajectory(problem)
    worst = 0.0
    for method in ("gn", "lm"):
        cfg = LMConfig(lambda0=1e-2, alpha=10.0, i_max=5)
        tr_s, tr_b = [], []
        if method == "gn":
            gn_ieks(problem, V, eta_bar, 1.0, x0, i_max=5, step_tol=0.0, trace=tr_s)
        else:
            lm_ieks(problem, V, eta_bar, 1.0, x0, cfg, trace=tr_s)
        batch_nonlinear_solve(problem, V, eta_bar, 1.0, method=method, cfg=cfg,
                              x0=x0, trace=tr_b)
        if len(tr_s) != len(tr_b):
            return CheckResult("ieks_vs_batch_nonlinear", False,
                               f"{method}: iterate counts differ "
                               f"({len(tr_s)} vs {len(tr_b)})",
                               _problem_payload(problem, V=V, eta_bar=eta_bar, x0=x0))
        for a, c in zip(tr_s, tr_b):
            rel = np.linalg.norm(a - c) / max(1.0, np.linalg.norm(c))
            worst = max(worst, rel)
            if rel > tol:
                return CheckResult("ieks_vs_batch_nonlinear", False,
                                   f"{method}: iterate gap {rel:.3e} > {tol:.0e}",
                                   _problem_payload(problem, V=V, eta_bar=eta_bar,
                                                    x0=x0))
    return CheckResult("ieks_vs_batch_nonlinear", True,
                       f"gn+lm traces, worst gap {worst:.3e}")


def grid_shrink(z: np.ndarray, kappa: float, width: int = 81) -> np.ndarray:
    """Two-stage grid minimiser of kappa ||w|| + 0.5 ||w - z||^2 (2-dim only)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (2,):
        raise ValueError("grid search is implemented for 2-dim blocks")

    def best_on(cx, cy, half):
        gx = np.linspace(cx - half, cx + half, width)
        gy = np.linspace(cy - half, cy + half, width)
        W0, W1 = np.meshgrid(gx, gy, indexing="ij")
        f = kappa * np.hypot(W0, W1) + 0.5 * ((W0 - z[0]) ** 2 + (W1 - z[1]) ** 2)
        i, j = np.unravel_index(np.argmin(f), f.shape)
        return gx[i], gy[j]

    half = float(np.linalg.norm(z)) + kappa + 1.0
    cx, cy = best_on(0.0, 0.0, half)
    step = 2 * half / (width - 1)
    cx, cy = best_on(cx, cy, 2 * step)
    # a third stage pins the argument well below the comparison tolerance
    step = 4 * step / (width - 1)
    cx, cy = best_on(cx, cy, 2 * step)
    return np.array([cx, cy])


def check_shrink_vs_grid(seed: int, cases: int = 50, tol: float = 1e-3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        z = rng.uniform(-3.0, 3.0, size=2)
        kappa = float(rng.uniform(0.0, 3.0))
        got = block_shrink(z, kappa)
        ref = grid_shrink(z, kappa)
        gap = float(np.linalg.norm(got - ref))
        worst = max(worst, gap)
        if gap > tol:
            return CheckResult("shrink_vs_grid", False,
                               f"argument gap {gap:.3e} > {tol:.0e}",
                               dict(z=z, kappa=np.array(kappa), got=got, ref=ref))
    return CheckResult("shrink_vs_grid", True, f"{cases} cases, worst gap {worst:.3e}")


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                 h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = h
        cols.append((fn(x + dx) - fn(x - dx)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_jacobians(seed: int, tol: float = 1e-5) -> CheckResult:
    """Analytic measurement/transition Jacobians vs central differences."""
    rng = np.random.default_rng(seed)
    rmodel = range_model(((0.0, -0.5), (0.5, 0.6), (-0.5, 0.6)), dt=0.1, T=4)
    worst = 0.0
    for _ in range(10):
        x = rng.normal(size=4)
        gap = np.max(np.abs(rmodel.measurement_jacobian(0, x)
                            - _fd_jacobian(lambda s: rmodel.measurement(0, s), x)))
        worst = max(worst, gap)
        if gap > tol:
            return CheckResult("jacobians_vs_fd", False,
                               f"range measurement gap {gap:.3e} > {tol:.0e}",
                               dict(x=x))
    dt = 0.1
    omegas = [0.0, 1e-6, 1e-3, 0.5, -0.7]
    for w in omegas:
        x = np.concatenate([rng.normal(size=4), [w]])
        gap = np.max(np.abs(ct_jacobian(x, dt)
                            - _fd_jacobian(lambda s: ct_transition(s, dt), x)))
        worst = max(worst, gap)
        if gap > tol:
            return CheckResult("jacobians_vs_fd", False,
                               f"turn-model gap {gap:.3e} at omega={w} > {tol:.0e}",
                               dict(x=x))
    return CheckResult("jacobians_vs_fd", True, f"worst gap {worst:.3e}")


def madmm_stage_trace(problem: TrackingProblem, x_solver, gamma: float,
                      k_max: int, x0: np.ndarray):
    """Augmented-Lagrangian bookkeeping for every update stage of the loop.

    Returns (stage_rise, excess): stage_rise[k] is the largest increase the
    x, w, or v minimisation stage produced at iteration k, and excess[k] is
    the post-iteration Lagrangian minus its starting value.  Only the dual
    ascent may raise the Lagrangian, so stage_rise should stay at roundoff
    and excess should stay nonpositive for a correct x update.
    """
    reg = problem.reg
    state = SplitState.feasible(problem, np.asarray(x0, dtype=float))
    factor = v_update_factor(reg) if reg.total_rows else None
    lag = augmented_lagrangian(problem, state, gamma)
    start = lag
    stage_rise, excess = [], []
    for _ in range(k_max):
        x = x_solver(problem, state.v, state.eta_bar, gamma, state.x)
        rises = []
        cur = SplitState(x=x, w=state.w, v=state.v, eta=state.eta, n_x=state.n_x)
        val = augmented_lagrangian(problem, cur, gamma)
        rises.append(val - lag)
        lag = val
        W = update_w_all(state.v, state.eta_under, reg, gamma)
        cur = SplitState(x=x, w=W, v=state.v, eta=state.eta, n_x=state.n_x)
        val = augmented_lagrangian(problem, cur, gamma)
        rises.append(val - lag)
        lag = val
        U = problem.u(x)
        V = update_v_all(U, W, state.eta, reg, gamma, factor)
        cur = SplitState(x=x, w=W, v=V, eta=state.eta, n_x=state.n_x)
        val = augmented_lagrangian(problem, cur, gamma)
        rises.append(val - lag)
        lag = val
        eta = update_dual_all(U, W, V, state.eta, reg, gamma)
        state = SplitState(x=x, w=W, v=V, eta=eta, n_x=state.n_x)
        lag = augmented_lagrangian(problem, state, gamma)
        stage_rise.append(max(rises))
        excess.append(lag - start)
    return np.asarray(stage_rise), np.asarray(excess)


def _lemma2_one(args) -> float:
    """Worst descent violation of the Lagrangian stages on one range seed."""
    seed, k_max, inject_fault = args
    problem = _range_problem(seed, T=40)
    if inject_fault:
        x_solver = faulty_x_solver()
    else:
        x_solver = make_x_solver("lm_ieks_madmm", i_max=5, affine=False)
    stage_rise, excess = madmm_stage_trace(problem, x_solver, 1.0, k_max,
                                           initial_trajectory(problem))
    return float(max(np.max(stage_rise), np.max(excess)))


def faulty_x_solver(eps: float = 0.05):
    """Negative-control x update: solves a deliberately perturbed subproblem.

    The fused transition matrices are shifted by eps before smoothing, so the
    returned x no longer decreases the true subproblem and the
    augmented-Lagrangian descent property must break.
    """
    from .smoothers import linearize, _as_nonlinear

    def solver(problem, V, eta_bar, gamma, x_warm):
        model = problem.model
        if not problem.is_affine:
            model = linearize(_as_nonlinear(model), np.asarray(x_warm, dtype=float))
        B, d = problem.penalty_targets(nominal=x_warm)
        fused = build_fused(model, B, d, V, eta_bar, gamma)
        fused.Atil = np.array(np.broadcast_to(fused.Atil, (problem.T, problem.n_x,
                                                           problem.n_x)), copy=True)
        fused.Atil[1:] += eps
        return augmented_ks(fused, problem.y, keep_covariances=False).m_smooth

    return solver


def check_lemma2(seed: int, n_seeds: int = 3, k_max: int = 12, jobs: int = 1,
                 inject_fault: bool = False, slack: float = 1e-7) -> CheckResult:
    """Descent diagnostics of the augmented Lagrangian along the iterations.

    Asserts the two descent facts the loop guarantees: no minimisation
    stage (x, w, v) ever increases the Lagrangian, and the dual ascent
    never lifts it above its starting value.  The raw end-of-iteration
    sequence is not tested per step; the dual update adds gamma times the
    squared constraint residual, which is positive until the split is
    exactly feasible.
    """
    args = [(seed + i, k_max, inject_fault) for i in range(n_seeds)]
    increases = _pmap(_lemma2_one, args, jobs)
    worst = max(increases)
    name = "lemma2_descent"
    if worst > slack:
        idx = int(np.argmax(increases))
        return CheckResult(name, False,
                           f"Lagrangian rose by {worst:.3e} (seed {seed + idx})",
                           dict(seed=np.array(seed + idx),
                                increase=np.array(worst)))
    return CheckResult(name, True,
                       f"{n_seeds} seeds, worst descent violation {worst:.3e}")


def _lemma1_one(args) -> float:
    """Worst increase of the weighted distance-to-reference on one system."""
    seed, k_ref, k_check = args
    rng = np.random.default_rng(seed)
    problem = random_affine_problem(rng, T=12, n_x=int(rng.integers(2, 5)))
    gamma = 1.0
    opts_ref = MadmmOptions(gamma=gamma, k_max=k_ref, eps_primal=0.0, eps_dual=0.0)
    x0 = initial_trajectory(problem)
    solver = make_x_solver("ks_madmm")
    star = run_madmm(problem, solver, opts_ref, x0=x0).state
    opts = MadmmOptions(gamma=gamma, k_max=k_check, eps_primal=0.0, eps_dual=0.0)
    rep = run_madmm(problem, solver, opts, x0=x0, record_states=True)
    dist = [omega_norm_sq(s.v - star.v, s.eta - star.eta, problem.reg, gamma)
            for s in rep.states]
    diffs = np.diff(dist)
    return float(np.max(diffs) / max(1.0, dist[0]))


def check_lemma1(seed: int, systems: int = 3, jobs: int = 1,
                 slack: float = 1e-9) -> CheckResult:
    """Weighted (v, eta) distance to a converged run never increases."""
    args = [(seed + i, 400, 50) for i in range(systems)]
    worst = max(_pmap(_lemma1_one, args, jobs))
    if worst > slack:
        return CheckResult("lemma1_contraction", False,
                           f"distance rose by relative {worst:.3e}",
                           dict(seed=np.array(seed), increase=np.array(worst)))
    return CheckResult("lemma1_contraction", True,
                       f"{systems} systems, worst relative change {worst:.3e}")


def _pmap(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def run_all_checks(seed: int = 0, jobs: int = 1,
                   inject_fault: bool = False) -> List[CheckResult]:
    """The full verification battery, deterministic given the seed."""
    results = [
        check_affine_equivalence(seed),
        check_ieks_vs_batch(seed + 100),
        check_shrink_vs_grid(seed + 200),
        check_jacobians(seed + 300),
        check_lemma2(seed + 400, jobs=jobs, inject_fault=inject_fault),
        check_lemma1(seed + 500, jobs=jobs),
    ]
    return results
