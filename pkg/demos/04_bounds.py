"""Checking the closed-form guarantees numerically.

1. Zeroing a scalar parameter s changes a smooth loss by at most the
   second-order prediction plus rho |s|^3 / 6.
2. The number of probes needed for a relative (eps, delta) diagonal
   estimate; we draw that many probes and count failures.
"""

import math

from basisprune import spectra, suites

f = lambda x: x**3 / 6
s = 1.0
print(f"cubic: exact change {abs(f(0) - f(s)):.4f}, "
      f"bound {spectra.loss_change_bound(s * s / 2, s, s, 1.0):.4f}")
print(f"with 10% curvature error: {spectra.loss_change_bound_rel(0.5, 1.1, 1.0, 1.0, 0.1):.4f}")

checks = suites.loss_bound_checks()
print(f"{sum(c['passed'] for c in checks)}/{len(checks)} loss-bound checks hold")

n, eps, delta = 10, 0.5, 0.1
psd = spectra.sample_complexity_psd(n, 1.0, eps, delta)
general = spectra.sample_complexity(1.0, 1.0, n, spectra.harmonic(n, 1.0), eps, delta)
print(f"\nprobes for eps={eps}, delta={delta}: PSD form {psd:.1f} -> s={math.ceil(psd)}, "
      f"spectrum-aware form {general:.1f} -> s={math.ceil(general)}")
for c in suites.probabilistic_checks(0, 1.0, n, eps, delta, trials=1000):
    if "s" in c["inputs"]:
        print(f"  {c['check']}: s={c['inputs']['s']} failure rate {c['observed']:.3f} "
              f"(allowed {delta})")
