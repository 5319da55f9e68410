"""Closed-form bounds for the diagonal estimator and basis pruning, plus
Hessian spectrum analysis in singular-value space.

Spectra are described by a power-law envelope ``|lambda_k| <= |lambda_1| k^-alpha``;
with ``alpha > 1/2`` the estimator's total variance is bounded independently
of the dimension.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit, oracles
from .errors import DomainError, InsufficientSpectrum, InvalidConfig

# B_2, B_4, ..., B_14
_BERNOULLI = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


def harmonic(n, s):
    """Generalized harmonic number ``sum_{k=1}^n k^-s``."""
    if n < 1:
        raise DomainError("harmonic needs n >= 1")
    k = np.arange(1, int(n) + 1, dtype=np.float64)
    # Summing smallest terms first limits rounding.
    return float(np.sum(k[::-1] ** -float(s)))


def zeta(s, n_terms=16):
    """Riemann zeta for real ``s > 1`` via Euler-Maclaurin summation.

    Direct sum to ``N - 1``, then the integral tail ``N^{1-s}/(s-1)``, the
    half-term ``N^-s/2`` and Bernoulli corrections up to ``B_14``.
    """
    if s <= 1:
        raise DomainError(f"zeta needs s > 1, got {s}")
    n = n_terms
    total = harmonic(n - 1, s) + n ** (1 - s) / (s - 1) + 0.5 * n ** (-s)
    rising = s  # s (s+1) ... (s + 2j - 2)
    power = n ** (-s - 1)
    fact = 2.0
    for j, b in enumerate(_BERNOULLI, start=1):
        total += b / fact * rising * power
        rising *= (s + 2 * j - 1) * (s + 2 * j)
        power /= n * n
        fact *= (2 * j + 1) * (2 * j + 2)
    return total


@dataclass
class SpectrumFit:
    lambda1_abs: float
    alpha: float
    n: int
    floor: float

    @property
    def assumption_violated(self):
        return not self.alpha > 0.5

    def envelope(self, k):
        return self.lambda1_abs * np.asarray(k, dtype=np.float64) ** -self.alpha


def fit_power_law(magnitudes, floor=None):
    """Largest exponent whose envelope ``|l_1| k^-alpha`` dominates the spectrum.

    ``alpha = min_{k>=2, |l_k| > floor} ln(|l_1|/|l_k|) / ln k``. The floor
    defaults to ``1e-10 |l_1|`` to ignore round-off eigenvalues. Check
    :attr:`SpectrumFit.assumption_violated` for ``alpha <= 1/2``.
    """
    mags = np.sort(np.abs(np.asarray(magnitudes, dtype=np.float64)))[::-1]
    if mags.size < 2 or mags[0] == 0:
        raise InsufficientSpectrum("need at least two magnitudes and a nonzero leading one")
    lam1 = mags[0]
    floor = 1e-10 * lam1 if floor is None else floor
    k = np.arange(1, mags.size + 1)
    keep = (k >= 2) & (mags > floor)
    if not keep.any():
        raise InsufficientSpectrum("every tail magnitude lies below the floor")
    alpha = float(np.min(np.log(lam1 / mags[keep]) / np.log(k[keep])))
    return SpectrumFit(float(lam1), max(alpha, 0.0) if alpha > -1e-15 else alpha,
                       int(mags.size), float(floor))


def variance_bound(lambda1_abs, alpha, s):
    """Total-variance bound ``|l_1|^2 zeta(2 alpha) / s`` (needs ``alpha > 1/2``)."""
    if alpha <= 0.5:
        raise DomainError(f"variance bound needs alpha > 1/2, got {alpha}")
    return lambda1_abs**2 * zeta(2 * alpha) / s


def variance_bound_partial(lambda1_abs, alpha, n, s):
    """Dimension-aware version using ``H_{n, 2 alpha}`` in place of zeta."""
    return lambda1_abs**2 * harmonic(n, 2 * alpha) / s


def total_variance_exact(h, s=1):
    """Exact total variance ``(1/s) sum_i sum_{j!=i} h_ij^2`` of the estimator."""
    h = np.asarray(h, dtype=np.float64)
    off = h - np.diag(np.diag(h))
    return float(np.sum(off * off) / s)


def per_entry_variance_exact(h, s=1):
    h = np.asarray(h, dtype=np.float64)
    off = h - np.diag(np.diag(h))
    return np.sum(off * off, axis=1) / s


def sample_complexity(lambda1_abs, alpha, n, trace_h, eps, delta):
    """Probe count above which the estimator is a relative (eps, delta)-approximator.

    Returns the raw right-hand side; it can be negative for flat spectra, in
    which case any ``s >= 1`` qualifies (see :func:`min_probes`).
    """
    if trace_h == 0:
        raise DomainError("trace must be nonzero")
    if alpha <= 0.5 or not 0 < delta < 1 or eps <= 0:
        raise DomainError("need alpha > 1/2, 0 < delta < 1, eps > 0")
    ratio = lambda1_abs**2 * harmonic(n, 2 * alpha) / (trace_h**2 / n)
    return 2.0 * (ratio - 1.0) * math.log(2 * n / delta) / eps**2


def sample_complexity_psd(n, alpha, eps, delta):
    """Same guarantee for a PSD Hessian, using only ``n`` and ``alpha``."""
    if alpha <= 0.5:
        raise DomainError(f"need alpha > 1/2, got {alpha}")
    if not 0 < delta < 1 or eps <= 0:
        raise DomainError("need 0 < delta < 1 and eps > 0")
    return 2.0 * (n * zeta(2 * alpha) - 1.0) * math.log(2 * n / delta) / eps**2


def min_probes(bound):
    """Smallest integer ``s`` with ``s > bound``, at least 1."""
    return max(1, math.floor(bound) + 1)


def loss_change_bound(g_i, h_ii, s_i, rho):
    """Second-order prediction plus cubic remainder for zeroing ``s_i``."""
    if rho < 0:
        raise DomainError("rho must be >= 0")
    return abs(-g_i * s_i + 0.5 * h_ii * s_i**2) + rho / 6.0 * abs(s_i) ** 3


def loss_change_bound_rel(g_i, h_hat_ii, s_i, rho, eps_rel):
    """As :func:`loss_change_bound` with an estimated curvature of relative error ``eps_rel``."""
    if not 0 < eps_rel < 1:
        raise DomainError(f"eps_rel must lie in (0, 1), got {eps_rel}")
    if rho < 0:
        raise DomainError("rho must be >= 0")
    return (abs(-g_i * s_i + 0.5 * h_hat_ii * s_i**2)
            + eps_rel / (2 * (1 - eps_rel)) * abs(h_hat_ii) * s_i**2
            + rho / 6.0 * abs(s_i) ** 3)


def lm_head_hessian_diag(u_i, v_i, x, logits):
    """Closed-form ``d2l/dsigma_i^2`` for the output layer: ``(v.x)^2 Var_p(u)``."""
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    u = np.asarray(u_i, dtype=np.float64)
    dev = u - p @ u
    return float((np.dot(v_i, x)) ** 2 * np.sum(p * dev * dev))


@dataclass
class BoundReport:
    kind: str
    value: float
    inputs: dict = field(default_factory=dict)


@dataclass
class SpectrumResult:
    magnitudes: np.ndarray
    eigenvalues: np.ndarray
    layer_of: np.ndarray
    fit: SpectrumFit
    blocks: list

    def rows(self):
        return [(k + 1, float(m)) for k, m in enumerate(self.magnitudes)]


def merge_block_spectra(blocks, floor=None):
    """Eigenvalues of a block-diagonal matrix from its blocks, by descending magnitude."""
    vals, owner = [], []
    for b, h in enumerate(blocks):
        ev, _ = numkit.sym_eig(h)
        vals.append(ev)
        owner.append(np.full(ev.size, b))
    vals = np.concatenate(vals)
    owner = np.concatenate(owner)
    order = np.lexsort((np.arange(vals.size), -np.abs(vals)))
    vals, owner = vals[order], owner[order]
    mags = np.abs(vals)
    return SpectrumResult(mags, vals, owner, fit_power_law(mags, floor), list(blocks))


def top_indices(layer, top_k):
    idx = np.flatnonzero(layer.active)
    order = idx[np.lexsort((idx, -np.abs(layer.sigma[idx])))]
    return np.sort(order[:top_k])


def block_diag_sv_spectrum(model, batches, top_k, h=oracles.GRAD_STEP, floor=None):
    """Layer-wise block-diagonal Hessian spectrum over each layer's top-``top_k`` sigma.

    Cross-layer curvature is dropped; all other sigma stay fixed.
    """
    for l, layer in enumerate(model.layers):
        if top_k > layer.num_active or top_k < 1:
            raise InvalidConfig(f"top_k={top_k} exceeds active rank {layer.num_active} of layer {l}")
    blocks = [oracles.layer_hessian(model, batches, l, top_indices(layer, top_k), h)
              for l, layer in enumerate(model.layers)]
    return merge_block_spectra(blocks, floor)
