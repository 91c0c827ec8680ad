"""How the Monte Carlo targets behave as the sample count K grows.

On a 10-mode mixture with an analytic noised energy we measure, at a few
noised points, the bias and spread of the energy estimator E_K and compare
the score variance of the gradient-based estimator S_K with the Tweedie
estimator. Runs in well under a minute.

    python3 demos/estimator_variance.py
"""
import numpy as np

from boltzgen import estimators as est
from boltzgen.energy import gmm10_unit

E = gmm10_unit(0)
sigma = 1.0
points = np.random.default_rng(0).uniform(-1.5, 1.5, (8, 2))
exact = E.noised_energy_oracle(points, sigma)

print("energy estimator E_K at sigma_t = 1 (8 points, 200 replicates)")
print(f"{'K':>7} {'mean bias':>11} {'mean std':>10}")
for K in (10, 100, 1000, 10_000):
    vals = est.replicate_values("mc_energy", E, points, sigma, 200, K, seed=K)
    err = vals - exact[:, None]
    print(f"{K:>7} {err.mean():>11.5f} {vals.std(axis=1, ddof=1).mean():>10.5f}")
print("the bias shrinks roughly like 1/K, the spread like 1/sqrt(K)\n")

print("score estimators at K = 500 (trace of the replicate covariance)")
for s in (0.2, 0.5, 1.0):
    mc = est.replicate_values("mc_score", E, points, s, 50, 500, seed=1)
    tw = est.replicate_values("tweedie_score", E, points, s, 50, 500, seed=1)
    v_mc = mc.var(axis=1, ddof=1).sum(-1).mean()
    v_tw = tw.var(axis=1, ddof=1).sum(-1).mean()
    print(f"sigma_t = {s:.1f}: S_K {v_mc:10.4f}   Tweedie {v_tw:10.4f}")
