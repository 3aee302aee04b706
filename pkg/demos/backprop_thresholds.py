"""
Expected back-propagation thresholds
====================================

With ``m`` draws per neuron, a neuron takes part in the backward pass when
``|u - u_th| <= delta * max_k |z_k|``.  The expectation of that band width
is the threshold to hand to a gated surrogate method for a fair comparison.
"""

import warnings

import numpy as np

from localzo import distributions as D
from localzo import thresholds, zo_surrogate as zo
from localzo.errors import ThresholdDivergenceWarning

# %%
# Quadrature against simulation for the unit-variance families.
rng = np.random.default_rng(1)
for (name, m), value in sorted(thresholds.standard_thresholds().items()):
    mean, se = thresholds.empirical_threshold(D.by_name(name), m, 1.0, 10**6, rng, return_se=True)
    print(f"{name:8s} m={m}  quadrature {value:.5f}   simulated {mean:.5f} +- {se:.5f}")

# %%
# Densities derived from surrogates.  The sigmoid one has light tails and a
# well-defined threshold near 0.766 delta.
lam = zo.derive_lambda(zo.SigmoidGrad(30.63), 1, 0.05)
b = thresholds.expected_threshold_tabulated(lam, lam.default_support(), 1)
print(f"sigmoid: B_th = {b:.5f} = {b / 0.05:.4f} delta")

# %%
# The fast-sigmoid density decays like 1/z^3, so its mean |z| diverges
# logarithmically.  Any finite value depends on the truncation; the
# library warns when doubling the support moves the answer.
lam = zo.derive_lambda(zo.FastSigmoidGrad(100.0), -1, 0.05)
for half in (10.0, 20.0, 100.0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ThresholdDivergenceWarning)
        b = thresholds.expected_threshold_tabulated(lam, (-half, half), 1)
    print(f"fastsigmoid on [-{half:g}, {half:g}]: B_th = {b:.5f}")
