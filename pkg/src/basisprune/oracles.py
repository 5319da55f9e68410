"""Brute-force reference computations used to check the fast paths.

Everything here evaluates on a fixed, caller-supplied list of batches so
no sampling noise enters a comparison.
"""

from contextlib import contextmanager

import numpy as np

from . import model as mdl
from .errors import NumericalFailure

GRAD_STEP = 1e-5
SECOND_STEP = 1e-4


def _finite(value, where):
    if not np.all(np.isfinite(value)):
        raise NumericalFailure(f"non-finite evaluation at {where}")
    return value


def fd_grad(loss_fn, sigma, h=GRAD_STEP):
    """Central-difference gradient of a scalar function."""
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.empty_like(sigma)
    for i in range(sigma.size):
        e = np.zeros_like(sigma)
        e[i] = h
        out[i] = (_finite(loss_fn(sigma + e), i) - _finite(loss_fn(sigma - e), i)) / (2 * h)
    return out


def fd_hessian_diag(loss_fn, sigma, h=SECOND_STEP):
    sigma = np.asarray(sigma, dtype=np.float64)
    f0 = _finite(loss_fn(sigma), "center")
    out = np.empty_like(sigma)
    for i in range(sigma.size):
        e = np.zeros_like(sigma)
        e[i] = h
        fp = _finite(loss_fn(sigma + e), i)
        fm = _finite(loss_fn(sigma - e), i)
        out[i] = (fp - 2 * f0 + fm) / (h * h)
    return out


def dense_hessian(grad_fn, sigma, h=GRAD_STEP, symmetrize=True):
    """Hessian from central differences of an exact gradient, columnwise."""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.size
    hess = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        gp = _finite(np.asarray(grad_fn(sigma + e)), j)
        gm = _finite(np.asarray(grad_fn(sigma - e)), j)
        hess[:, j] = (gp - gm) / (2 * h)
    if symmetrize:
        hess = 0.5 * (hess + hess.T)
    return hess


@contextmanager
def sigma_override(layer):
    """Restore ``layer.sigma`` to the original array object on exit."""
    saved = layer.sigma
    try:
        yield
    finally:
        layer.sigma = saved


def _indices(layer, indices):
    if indices is None:
        return np.flatnonzero(layer.active)
    return np.asarray(indices, dtype=int)


def layer_loss_fn(model, batches, layer_idx, indices=None):
    """``s -> mean loss`` with ``s`` replacing sigma at ``indices`` of one layer."""
    layer = model.layers[layer_idx]
    idx = _indices(layer, indices)
    total = sum(len(b) for b in batches)

    def fn(s):
        with sigma_override(layer):
            sig = layer.sigma.copy()
            sig[idx] = s
            layer.sigma = sig
            return sum(mdl.loss(model, b) * len(b) for b in batches) / total

    return fn


def layer_grad_fn(model, batches, layer_idx, indices=None):
    """``s -> d(mean loss)/d sigma[indices]`` via backprop."""
    layer = model.layers[layer_idx]
    idx = _indices(layer, indices)
    total = sum(len(b) for b in batches)

    def fn(s):
        with sigma_override(layer):
            sig = layer.sigma.copy()
            sig[idx] = s
            layer.sigma = sig
            g = np.zeros(idx.size)
            for b in batches:
                g += mdl.loss_and_grads(model, b).sigma[layer_idx][idx] * len(b)
            return g / total

    return fn


def layer_hessian(model, batches, layer_idx, indices=None, h=GRAD_STEP):
    layer = model.layers[layer_idx]
    idx = _indices(layer, indices)
    return dense_hessian(layer_grad_fn(model, batches, layer_idx, idx), layer.sigma[idx], h)


def exact_delta_loss(model, batches, layer_idx, i):
    """Loss with basis ``i`` zeroed minus the current loss; model left untouched."""
    layer = model.layers[layer_idx]
    if layer.sigma[i] == 0.0:
        return 0.0
    fn = layer_loss_fn(model, batches, layer_idx, [i])
    return fn(np.array([0.0])) - fn(layer.sigma[[i]])


def estimate_hessian_lipschitz(hess_fn, points):
    """Lower estimate of the Hessian Lipschitz constant.

    Maximum of ``||H(x) - H(y)||_2 / ||x - y||_2`` over all pairs of the given
    points. Never an upper bound; callers apply their own safety factor.
    """
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    hs = [hess_fn(p) for p in pts]
    rho = 0.0
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            dist = np.linalg.norm(pts[a] - pts[b])
            if dist > 0:
                rho = max(rho, np.linalg.norm(hs[a] - hs[b], 2) / dist)
    return rho
