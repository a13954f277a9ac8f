"""Uncertainty-normalised cosine scoring against the plain cosine."""

import numpy as np

from xiplus import ProjectedGaussian, cosine_score

phi = np.array([1.0, 0.0])
confident = ProjectedGaussian(phi, np.diag([0.01, 0.01]))
uncertain = ProjectedGaussian(phi, np.diag([3.0, 1.0]))

for rho in (0.0, 0.5, 1.0):
    print(f"rho={rho}: confident pair {cosine_score(confident, confident, rho):.4f}, "
          f"uncertain pair {cosine_score(uncertain, uncertain, rho):.4f}")
# rho=0 is plain cosine; larger rho lifts pairs whose mean sits along the
# uncertain directions, since the whitening shrinks their norm
