"""How many steps SGLD and pSGLD need to match a badly conditioned Gaussian.

Target N(0, diag(1, 1/100)); 4000 independent chains start at (3, 0.3). The
first step at which both marginal variances are within 10% and both means
within 10% of a standard deviation is reported for a small step-size grid.
"""
import argparse

import numpy as np

from coopbnn.optim import PsgldConfig, PsgldState, psgld_step, sgld_step

CURVATURE = np.array([1.0, 100.0])


def first_hit(kind, lr, smoothing=0.99, chains=4000, max_steps=3000, seed=0):
    rng = np.random.default_rng(seed)
    th = np.tile([3.0, 0.3], (chains, 1))
    state, cfg = PsgldState.init(th), PsgldConfig(lr=lr, smoothing=smoothing)
    target = 1 / CURVATURE
    for t in range(1, max_steps + 1):
        g = -CURVATURE * th
        if kind == "sgld":
            th = sgld_step(th, g, np.zeros_like(th), lr, 1, 1, rng)
        else:
            th, state = psgld_step(state, th, g, np.zeros_like(th), 1, 1, cfg, rng)
        v, m = th.var(axis=0), th.mean(axis=0)
        if np.all(np.abs(v - target) < 0.1 * target) and np.all(np.abs(m) < 0.1 * np.sqrt(target)):
            return t
    return None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-steps", type=int, default=3000)
    args = ap.parse_args()
    for lr in (0.01, 0.005, 0.002):
        print(f"sgld  lr={lr:<6} first hit: {first_hit('sgld', lr, max_steps=args.max_steps)}")
    for smoothing in (0.99, 0.999):
        for lr in (0.1, 0.05, 0.03):
            hit = first_hit("psgld", lr, smoothing, max_steps=args.max_steps)
            print(f"psgld lr={lr:<6} smoothing={smoothing}: first hit: {hit}")


if __name__ == "__main__":
    main()
