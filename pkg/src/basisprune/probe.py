"""Randomized Hessian-diagonal estimation with Rademacher probes.

Two estimators live here:

* :func:`hutchinson_diag` -- ``(1/s) sum_k z_k * (A z_k)`` for an explicit
  symmetric operator.
* :func:`hessian_diag_probe` -- the gradient-only variant for a model's
  singular values: gradients at ``sigma +- (eps/2) z`` are differenced and
  scaled by ``z_i / eps``. No Hessian-vector product is ever formed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .errors import InvalidInput, NumericalFailure, PerturbationTooLarge
from .numkit import RngStream, rademacher


@dataclass
class DiagEstimate:
    """Diagonal estimate restricted to ``indices``; other indices are absent."""

    values: np.ndarray
    indices: np.ndarray
    samples_used: int = 0

    def as_dense(self, n, fill=np.nan):
        out = np.full(n, fill)
        out[self.indices] = self.values
        return out

    @classmethod
    def zeros(cls, indices):
        indices = np.asarray(indices, dtype=int)
        return cls(np.zeros(indices.size), indices, 0)


@dataclass
class ProbeConfig:
    epsilon: float
    num_probes: int = 1
    seed: int = 0
    candidates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidInput(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.num_probes < 1:
            raise InvalidInput("num_probes must be >= 1")


def hutchinson_diag(apply, n, s, rng, batched=False):
    """Hutchinson diagonal estimate of a symmetric linear operator.

    With ``batched=True`` the operator receives an ``(n, s)`` block of probes
    and must return ``A @ Z``.
    """
    if s < 1:
        raise InvalidInput("need s >= 1")
    if batched:
        z = rademacher(rng, (s, n)).T
        az = np.asarray(apply(z), dtype=np.float64)
        if not np.all(np.isfinite(az)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(az), axis=0))[0])
            raise NumericalFailure("operator returned non-finite values", probe_index=bad)
        values = np.mean(z * az, axis=1)
    else:
        acc = np.zeros(n)
        for k in range(s):
            z = rademacher(rng, n)
            az = np.asarray(apply(z), dtype=np.float64)
            if not np.all(np.isfinite(az)):
                raise NumericalFailure("operator returned non-finite values", probe_index=k)
            acc += z * az
        values = acc / s
    return DiagEstimate(values, np.arange(n), s)


def symmetric_difference(grad_fn, sigma, z, eps):
    """Single-probe estimate ``(g(sigma + eps z/2) - g(sigma - eps z/2)) * z / eps``."""
    gp = np.asarray(grad_fn(sigma + 0.5 * eps * z))
    gm = np.asarray(grad_fn(sigma - 0.5 * eps * z))
    return (gp - gm) * z / eps


def gradient_diag_estimate(grad_fn, sigma, eps, s, rng, indices=None):
    """Average of ``s`` symmetric-difference probes for a function of a vector.

    Probes are zero outside ``indices`` (all coordinates by default).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.size
    indices = np.arange(n) if indices is None else np.asarray(indices, dtype=int)
    zero_mask = np.ones(n, dtype=bool)
    zero_mask[indices] = False
    acc = np.zeros(n)
    for k in range(s):
        z = rademacher(rng, n, zero_mask)
        est = symmetric_difference(grad_fn, sigma, z, eps)
        if not np.all(np.isfinite(est)):
            raise NumericalFailure("non-finite gradient difference", probe_index=k)
        acc += est
    return DiagEstimate(acc[indices] / s, indices, s)


def probe_streams(seed, num_layers):
    return [RngStream.named(seed, "probes", l) for l in range(num_layers)]


def hessian_diag_probe(model, batch, config, rngs=None):
    """Gradient-difference Hessian-diagonal estimate for each probed layer.

    Each layer gets its own probe ``z`` (zero outside the candidate set) and
    only that layer's sigma is perturbed. Layers without an entry in
    ``config.candidates`` are probed on all active bases when the mapping is
    empty and skipped otherwise. Sigma arrays are restored to the original
    objects afterwards, so the model is bit-identical on return.
    """
    rngs = rngs if rngs is not None else probe_streams(config.seed, len(model.layers))
    candidates = config.candidates
    if candidates:
        targets = {l: np.asarray(c, dtype=int) for l, c in candidates.items() if len(c)}
    else:
        targets = {l: np.flatnonzero(layer.active) for l, layer in enumerate(model.layers)}
    if not targets:
        raise InvalidInput("candidate mask is empty for every layer")
    # A perturbed sigma below -sigma_max flips a basis past the largest one.
    guard = -model.sigma_max()
    eps = config.epsilon
    out = {}
    for l in sorted(targets):
        layer = model.layers[l]
        idx = targets[l]
        if not np.all(layer.active[idx]):
            raise InvalidInput(f"layer {l}: candidates must be active bases")
        zero_mask = np.ones(layer.rank, dtype=bool)
        zero_mask[idx] = False
        saved = layer.sigma
        acc = np.zeros(idx.size)
        try:
            for k in range(config.num_probes):
                z = rademacher(rngs[l], layer.rank, zero_mask)
                plus = saved + 0.5 * eps * z
                minus = saved - 0.5 * eps * z
                if min(plus[idx].min(), minus[idx].min()) < guard:
                    raise PerturbationTooLarge(
                        f"layer {l}: epsilon={eps} drives sigma below -sigma_max", probe_index=k)
                layer.sigma = plus
                gp = mdl.loss_and_grads(model, batch).sigma[l]
                layer.sigma = minus
                gm = mdl.loss_and_grads(model, batch).sigma[l]
                layer.sigma = saved
                est = (gp - gm)[idx] * z[idx] / eps
                if not np.all(np.isfinite(est)):
                    raise NumericalFailure(f"layer {l}: non-finite gradient", probe_index=k)
                acc += est
        finally:
            layer.sigma = saved
        out[l] = DiagEstimate(acc / config.num_probes, idx, config.num_probes)
    return out


def choose_epsilon(sigma_max, fraction_bits, rel_tol=0.01, eps_max=0.1):
    """Perturbation size that keeps the rounding error of ``sigma + eps`` below
    ``rel_tol * eps`` for every singular value, capped at ``eps_max``."""
    if sigma_max <= 0 or not 0 < rel_tol < 1 or not 0 < eps_max < 1:
        raise InvalidInput("need sigma_max > 0, 0 < rel_tol < 1, 0 < eps_max < 1")
    return min(2.0 ** -(fraction_bits + 1) * sigma_max / rel_tol, eps_max)


def accumulate_profile(running, new, num_profiling_iter):
    """``running + new / num_profiling_iter`` on matching index sets."""
    if not np.array_equal(running.indices, new.indices):
        raise InvalidInput("index sets of running and new estimates differ")
    return DiagEstimate(running.values + new.values / num_profiling_iter,
                        running.indices, running.samples_used + new.samples_used)
