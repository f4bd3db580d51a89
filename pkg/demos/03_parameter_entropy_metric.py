"""The two-term ranking metric L = L1 + L2.

L1 measures fit quality; L2 sums the held-out error of predicting each
fitted parameter from its predecessors across systems.  Parameters that are
constant or determined by the others contribute nothing, so L2 counts the
independent hidden properties a candidate needs -- a parsimony measure that
does not care how many nodes the expression tree has.
"""
import numpy as np

from sysform import l2_score

rng = np.random.default_rng(0)
D = 200

# Identical systems: every parameter constant, L2 vanishes.
theta = np.tile([2.0, -1.0, 0.5], (D, 1))
print("identical systems:     l2 =", l2_score(theta, rng=np.random.default_rng(1)).l2_total)

# A dependent column costs (almost) nothing: theta2 = theta1^2 is learned
# by the regression tree, so only theta1's own spread contributes.
t1 = rng.uniform(0.0, 1.0, D)
theta = np.column_stack([t1, t1 ** 2])
rep = l2_score(theta, rng=np.random.default_rng(1))
print("dependent column:      contributions =", [f"{c:.4f}" for c in rep.contributions])

# Independent columns each pay their full variance.
theta = rng.uniform(0.0, 1.0, (D, 2))
rep = l2_score(theta, rng=np.random.default_rng(1))
print("independent columns:   contributions =", [f"{c:.4f}" for c in rep.contributions])

# The consequence for model selection: a model can have many parameters and
# still be "simple" if they move together across systems, while a small
# model whose parameters wander independently is complex in this sense.
coupled = np.column_stack([t1, 3.0 * t1 - 1.0, np.sin(t1), t1 ** 3])
rep = l2_score(coupled, rng=np.random.default_rng(1))
print("4 coupled parameters:  l2 =", f"{rep.l2_total:.5f}")
free = rng.uniform(0.0, 1.0, (D, 2))
rep = l2_score(free, rng=np.random.default_rng(1))
print("2 free parameters:     l2 =", f"{rep.l2_total:.5f}")
