"""Estimating a Hessian diagonal from random sign probes.

We build symmetric matrices with known spectra, estimate their diagonals
with Rademacher probes, and watch the variance fall like 1/s. For spectra
decaying as k^-alpha with alpha > 1/2 the total variance stays below
|lambda_1|^2 zeta(2 alpha) / s no matter how large the matrix is.
"""

import numpy as np

from basisprune import probe, spectra, suites
from basisprune.numkit import RngStream

# A matrix with eigenvalues 1/k and random eigenvectors.
n = 32
h = suites.synthetic_matrix("power1", n, seed=0)
print(f"trace={np.trace(h):.4f}  sum(1/k)={spectra.harmonic(n, 1):.4f}")

# One probe already gives an unbiased (if noisy) estimate.
est = probe.hutchinson_diag(lambda z: h @ z, n, s=1, rng=RngStream(1))
print("first entries, one probe :", np.round(est.values[:4], 3))
print("first entries, exact     :", np.round(np.diag(h)[:4], 3))

# Averaging s probes divides the variance by s.
print("\n   s   empirical   exact      bound")
for s in (1, 4, 16, 64):
    trials = suites.hutchinson_trials(h, s, 2000, RngStream(2, s))
    print(f"{s:4d}   {suites.empirical_total_variance(trials):.5f}   "
          f"{spectra.total_variance_exact(h, s):.5f}   {spectra.variance_bound(1.0, 1.0, s):.5f}")

# The same idea works with gradients only: differencing gradients at
# sigma +- (eps/2) z and multiplying by z / eps estimates the curvature.
x0 = np.array([0.2, -0.5, 1.0])
grad = lambda x: np.exp(x) + np.array([x[1], x[0], 0.0])
est = probe.gradient_diag_estimate(grad, x0, eps=1e-3, s=4000, rng=RngStream(3))
print("\ngradient-only estimate:", np.round(est.values, 3), " exact:", np.round(np.exp(x0), 3))
