#!/usr/bin/env python3
"""Wall-time scaling of the smoother-based and dense x updates."""

import argparse
import time

import numpy as np

from tracklasso import (
    MadmmOptions,
    TrackingProblem,
    make_regularizer,
    run_madmm,
    scenario_defaults,
    simulate_wiener,
)
from tracklasso.solve import initial_trajectory, make_x_solver


def timed(solver_name, T, kmax, seed=0):
    data, model = simulate_wiener(scenario_defaults("wiener", T=T, seed=seed))
    reg = make_regularizer("l2", 4, weights=1.0, target_mode="process_noise")
    prob = TrackingProblem(model=model, reg=reg, y=data.y)
    x0 = initial_trajectory(prob)
    opts = MadmmOptions(gamma=1.0, k_max=kmax, eps_primal=0.0, eps_dual=0.0)
    tic = time.perf_counter()
    run_madmm(prob, make_x_solver(solver_name), opts, x0=x0)
    return time.perf_counter() - tic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks-sizes", default="1000,10000,100000")
    ap.add_argument("--batch-sizes", default="100,200,400,800")
    ap.add_argument("--kmax", type=int, default=2)
    args = ap.parse_args()

    timed("ks_madmm", 500, args.kmax)  # warm-up
    for name, sizes in (("ks_madmm", args.ks_sizes),
                        ("batch_madmm", args.batch_sizes)):
        Ts = [int(s) for s in sizes.split(",")]
        secs = []
        for T in Ts:
            secs.append(timed(name, T, args.kmax))
            print(f"{name:>12}  T={T:<8d}  {secs[-1]:8.3f}s")
        slope = np.polyfit(np.log(Ts), np.log(secs), 1)[0]
        print(f"{name:>12}  log-log slope {slope:.3f}\n")


if __name__ == "__main__":
    main()
