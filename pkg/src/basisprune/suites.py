"""Estimator benchmarks and the bound-soundness suite.

Shared by the command line and the acceptance tests.
"""

import math
import time

import numpy as np

from . import spectra
from .numkit import RngStream, rademacher

SPECTRA = ("diagonal", "flat", "power1", "power2")


def spectrum_values(kind, n):
    k = np.arange(1, n + 1, dtype=np.float64)
    if kind == "flat":
        # Unit magnitudes with alternating signs so the matrix is not a multiple of I.
        return np.where(k % 2 == 1, 1.0, -1.0)
    if kind in ("power1", "diagonal"):
        return k**-1.0
    if kind == "power2":
        return k**-2.0
    if kind.startswith("power:"):
        return k ** -float(kind.split(":", 1)[1])
    raise ValueError(f"unknown spectrum kind {kind!r}")


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


def synthetic_matrix(kind, n, seed):
    """Symmetric matrix with a prescribed spectrum and random eigenvectors."""
    lam = spectrum_values(kind, n)
    if kind == "diagonal":
        return np.diag(lam)
    q = random_orthogonal(n, RngStream.named(seed, "matrix", n))
    h = (q * lam) @ q.T
    return 0.5 * (h + h.T)


def envelope_alpha(kind):
    return {"power1": 1.0, "diagonal": 1.0, "power2": 2.0}.get(kind)


def hutchinson_trials(h, s, trials, rng, chunk=1 << 16):
    """``trials`` independent ``s``-probe diagonal estimates, shape ``(trials, n)``."""
    n = h.shape[0]
    out = np.empty((trials, n))
    per_chunk = max(1, chunk // s)
    for start in range(0, trials, per_chunk):
        stop = min(trials, start + per_chunk)
        z = rademacher(rng, ((stop - start) * s, n))
        est = z * (z @ h)
        out[start:stop] = est.reshape(stop - start, s, n).mean(axis=1)
    return out


def empirical_total_variance(estimates):
    return float(np.sum(np.var(estimates, axis=0, ddof=1)))


def estimator_bench(n=32, trials=2000, probes=(1, 4, 16, 64, 256), seed=0, timing=True):
    """Rows ``(matrix_id, s, empirical, exact, bound, wall_time_ms)``.

    ``bound`` is empty (NaN) for spectra that violate the power-law premise.
    """
    rows = []
    for kind in SPECTRA:
        h = synthetic_matrix(kind, n, seed)
        alpha = envelope_alpha(kind)
        for s in probes:
            t0 = time.perf_counter()
            rng = RngStream.named(seed, f"bench-{kind}", s)
            est = hutchinson_trials(h, s, trials, rng)
            emp = empirical_total_variance(est)
            wall = int(round((time.perf_counter() - t0) * 1000)) if timing else 0
            bound = spectra.variance_bound(1.0, alpha, s) if alpha else float("nan")
            rows.append((kind, s, emp, spectra.total_variance_exact(h, s), bound, wall))
    return rows


BENCH_HEADER = ("matrix_id", "s", "empirical_total_variance", "theoretical_variance",
                "thm3_bound", "wall_time_ms")


def approximator_failure_rate(h, s, eps, trials, rng):
    """Fraction of trials with ``||D - diag||_2 > eps ||diag||_2``."""
    d = np.diag(h)
    est = hutchinson_trials(h, s, trials, rng)
    err = np.linalg.norm(est - d, axis=1)
    return float(np.mean(err > eps * np.linalg.norm(d)))


# -- bound soundness ---------------------------------------------------------

# (name, f, f', f'', sup|f'''| on [-3, 3])
SCALAR_FAMILY = (
    ("cubic", lambda x: x**3 / 6, lambda x: x**2 / 2, lambda x: x, 1.0),
    ("sin", np.sin, np.cos, lambda x: -np.sin(x), 1.0),
    ("exp", np.exp, np.exp, np.exp, math.exp(3.0)),
    ("softplus", lambda x: np.logaddexp(0, x), lambda x: 1 / (1 + np.exp(-x)),
     lambda x: np.exp(-x) / (1 + np.exp(-x)) ** 2, 0.1),
    ("quartic", lambda x: x**4 / 24 - x**2, lambda x: x**3 / 6 - 2 * x,
     lambda x: x**2 / 2 - 2, 3.0),
)

PRUNE_POINTS = (-3.0, -1.7, -0.5, 0.25, 0.9, 2.0, 3.0)


def _check(check, inputs, observed, bound, scale):
    bound = bound * scale
    return dict(check=check, inputs=inputs, observed=observed, bound=bound,
                passed=bool(observed <= bound * (1 + 1e-12) + 1e-15))


def loss_bound_checks(scale=1.0, eps_rels=(0.1, 0.5)):
    """Zeroing a scalar ``s`` changes ``f`` by ``f(0) - f(s)``; compare with both bounds."""
    out = []
    for name, f, df, d2f, rho in SCALAR_FAMILY:
        for s in PRUNE_POINTS:
            exact = abs(f(0.0) - f(s))
            g, h = df(s), d2f(s)
            inputs = dict(function=name, s=s, g=g, h=h, rho=rho)
            out.append(_check("loss_change", inputs, exact,
                              spectra.loss_change_bound(g, h, s, rho), scale))
            for er in eps_rels:
                for sign in (-1.0, 1.0):
                    h_hat = h * (1 + sign * er)
                    inputs2 = dict(inputs, h_hat=h_hat, eps_rel=er)
                    b = spectra.loss_change_bound_rel(g, h_hat, s, rho, er)
                    out.append(_check("loss_change_rel_error", inputs2, exact, b, scale))
                    out.append(_check("rel_error_bound_dominates", inputs2,
                                      spectra.loss_change_bound(g, h, s, rho), b, scale))
    return out


def variance_checks(seed=0, scale=1.0, n=32, alphas=(0.75, 1.0, 2.0), probes=(1, 4, 16, 64),
                    trials=4000):
    out = []
    for alpha in alphas:
        h = synthetic_matrix(f"power:{alpha}", n, seed)
        for s in probes:
            rng = RngStream.named(seed, f"varcheck-{alpha}", s)
            emp = empirical_total_variance(hutchinson_trials(h, s, trials, rng))
            out.append(_check("variance_zeta", dict(alpha=alpha, n=n, s=s, trials=trials),
                              emp, spectra.variance_bound(1.0, alpha, s), scale))
    return out


def probabilistic_checks(seed=0, scale=1.0, n=10, eps=0.5, delta=0.1, trials=1000):
    """Empirical (eps, delta) failure rates at the probe counts the bounds prescribe."""
    lam = spectrum_values("power1", n)
    h = synthetic_matrix("power1", n, seed)
    out = []
    raw4 = spectra.sample_complexity(1.0, 1.0, n, float(lam.sum()), eps, delta)
    raw_psd = spectra.sample_complexity_psd(n, 1.0, eps, delta)
    for check, raw in (("sample_complexity", raw4), ("sample_complexity_psd", raw_psd)):
        s = spectra.min_probes(raw * scale)
        rng = RngStream.named(seed, check, n)
        rate = approximator_failure_rate(h, s, eps, trials, rng)
        out.append(dict(check=check,
                        inputs=dict(n=n, alpha=1.0, eps=eps, delta=delta, trials=trials,
                                    raw_bound=raw, s=s),
                        observed=rate, bound=delta, passed=bool(rate <= delta)))
    out.append(_check("psd_relaxation_dominates", dict(n=n, alpha=1.0, eps=eps, delta=delta),
                      raw4, raw_psd, scale))
    return out


def lm_head_checks(seed=0, draws=10_000):
    rng = RngStream.named(seed, "lm-head")
    worst = math.inf
    for _ in range(draws):
        c, m = 2 + int(rng.integers(0, 6)), 2 + int(rng.integers(0, 6))
        val = spectra.lm_head_hessian_diag(rng.normal(c), rng.normal(m), rng.normal(m),
                                           3.0 * rng.normal(c))
        worst = min(worst, val)
    return [dict(check="output_layer_curvature_nonneg", inputs=dict(draws=draws), observed=worst,
                 bound=0.0, passed=bool(worst >= 0.0))]


def bounds_check(seed=0, scale=1.0, trials=1000, n=10, eps=0.5, delta=0.1):
    checks = []
    checks += loss_bound_checks(scale)
    checks += variance_checks(seed, scale)
    checks += probabilistic_checks(seed, scale, n, eps, delta, trials)
    checks += lm_head_checks(seed)
    return checks
