"""
Expected surrogates from a local zeroth-order estimator
=======================================================

Each neuron draws a perturbation ``z`` and records ``|z|/(2 delta)`` when
its potential lies within ``|z| delta`` of threshold.  Averaged over ``z``
this is a smooth surrogate gradient.  Below we compare the closed forms
with a Monte-Carlo average for the three built-in perturbation families.
"""

import numpy as np

from localzo import distributions as D
from localzo import zo_surrogate as zo

# %%
# A single shared sample of |z| is enough for the whole u-grid.
rng = np.random.default_rng(0)
u = np.linspace(-1.5, 1.5, 7)

for name in ("normal", "uniform", "laplace"):
    for delta in (0.5, 1.0):
        closed = zo.expected_surrogate(name, u, delta)
        mc, se = zo.mc_expected_g2(u, D.by_name(name), zo.ZOConfig(delta), 200_000, rng)
        print(f"{name:8s} delta={delta:<4} closed  " + " ".join(f"{v:7.4f}" for v in closed))
        print(f"{'':8s} {'':10s} mc      " + " ".join(f"{v:7.4f}" for v in mc))

# %%
# Every expected surrogate integrates to one, whatever delta is.
from scipy import integrate

for name in ("normal", "uniform", "laplace"):
    g = zo.expected_surrogate_fn(name, 0.5)
    total = 2 * integrate.quad(g, 0, np.inf, limit=200)[0]
    print(f"mass of {name} surrogate: {total:.6f}")

# %%
# Going the other way: the sigmoid surrogate with k=30.63 at delta=0.05
# corresponds to a perturbation density whose scale constant is one.
lam = zo.derive_lambda(zo.SigmoidGrad(30.63), 1, 0.05)
print(f"sigmoid-derived density: scale c = {lam.scale_c:.6f}, support {lam.default_support()}")
x = np.linspace(-0.1, 0.1, 5)
mc, _ = zo.mc_expected_g2(x, lam.distribution(), lam.zo_config(), 500_000, rng)
print("target  " + " ".join(f"{v:7.3f}" for v in zo.SigmoidGrad(30.63)(x)))
print("mc      " + " ".join(f"{v:7.3f}" for v in mc))
