"""
What PA and RS do to a gradient
===============================

PA takes the gradient at a point nudged uphill by rho. RS keeps a
loss-weighted trend of past gradients. It blends the new gradient into the
trend, or, when the two disagree, steps along the trend instead.
"""
import numpy as np

from bitta.adapter import AdapterConfig, AdapterState, adapt_step, anneal, pa_gradient, rs_combine


def bowl(w):
    return 0.5 * float(w @ w), w.copy(), {}


g_pa, _, _ = pa_gradient(np.array([1.0, 0.0]), bowl, rho=0.1)
print("PA gradient of 0.5|w|^2 at (1, 0):", g_pa)

trend = np.array([1.0, 0.0])
for g in (np.array([0.5, 0.5]), np.array([-2.0, 1.0])):
    out, branch = rs_combine(trend, g, t=2000, omega=4000.0, k=-9.0)
    print(f"g = {g} against trend {trend}: {branch:11s} -> {out}")

print("anneal factor:", {t: round(anneal(t, 4000.0), 4) for t in (0, 1000, 4000, 8000)})

# a noisy bowl: each step sees the centre jittered
rng = np.random.default_rng(0)
for use_pa, use_rs in [(False, False), (True, True)]:
    st, w = AdapterState.fresh(2, AdapterConfig(lr=0.05, rho=0.05, omega=100.0, use_pa=use_pa, use_rs=use_rs)), np.array([3.0, -2.0])
    for _ in range(200):
        c = rng.normal(scale=0.5, size=2)
        w, st, info = adapt_step(st, w, lambda v: (0.5 * float((v - c) @ (v - c)), v - c, {}))
    print(f"use_pa={use_pa!s:5} use_rs={use_rs!s:5} final w {np.round(w, 3)}")
