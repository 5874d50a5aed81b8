"""
Fitting a conditional density ratio
===================================

The importance weight ``r(y, x | z) = p(y, x | z) / p(y, x)`` is estimated
directly, without estimating either density.  On a binary problem we can
compare the fit with the exact table.
"""

import numpy as np

from iwnpiv import Dataset, RatioFitConfig, fit_ratio, lsif_empirical_risk, ratio_mass_check
from iwnpiv.density_ratio import evaluate_ratio

# joint probabilities p(w, z) for w, z in {0, 1}
joint = np.array([[0.4, 0.1], [0.1, 0.4]])
exact = joint / np.outer(joint.sum(axis=1), joint.sum(axis=0))
print("exact ratio table\n", exact)

rng = np.random.default_rng(0)
cells = rng.choice(4, size=4000, p=joint.ravel())
w, z = np.divmod(cells, 2)
# w plays both the outcome and the regressor role here
data = Dataset(y=w.astype(float), x=w[:, None].astype(float), z=z[:, None].astype(float))

ratio = fit_ratio(data, RatioFitConfig(seed=0))
fitted = np.array([[evaluate_ratio(ratio, [a, a], [b]) for b in (0, 1)] for a in (0, 1)])
print("fitted ratio table\n", fitted.round(3))

# A good ratio averages to about one over all (W_i, Z_j) pairs, and its
# least-squares risk should sit below the -0.5 of the constant ratio.
sub = data.subset(np.arange(1000))
print("mass check", round(ratio_mass_check(ratio, sub), 4))
print("LSIF risk", round(lsif_empirical_risk(ratio, sub), 4), "vs -0.5 for r = 1")
