"""Dense linear algebra and seeded randomness.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with round-robin pair ordering, so each sweep
rotates ``m/2`` disjoint column pairs at once.
"""

import functools
import zlib
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput

RNG_ALGORITHM = "numpy-philox4x64-10"

_TIE_TOL = 1e-12


class SvdFactors(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.S) @ self.V.T


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def _round_robin(m):
    """Pairings for a round-robin tournament over ``m`` (even) players."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a, tol=1e-15, max_sweeps=80):
    """Orthogonalize the columns of ``a`` in place; returns (a, v)."""
    n, m = a.shape
    v = np.eye(m)
    if m == 1:
        return a, v
    pad = m % 2
    if pad:
        a = np.hstack([a, np.zeros((n, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(m + pad)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            todo = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            todo &= (alpha > 0) & (beta > 0)
            if not todo.any():
                continue
            rotated = True
            p, q = p[todo], q[todo]
            alpha, beta, gamma = alpha[todo], beta[todo], gamma[todo]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (a, v):
                xp, xq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * xp - s * xq
                mat[:, q] = s * xp + c * xq
        if not rotated:
            break
    if pad:
        a, v = a[:, :m], v[:m, :m]
    return a, v


def _complete_basis(u, filled):
    """Replace columns of ``u`` not flagged in ``filled`` by an orthonormal completion."""
    n = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    candidates = iter(np.eye(n))
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                u[:, j] = w / norm
                basis.append(u[:, j])
                break
    return u


def _tie_order(values):
    def cmp(i, j):
        if abs(values[i] - values[j]) <= _TIE_TOL:
            return i - j
        return -1 if values[i] > values[j] else 1

    return np.array(sorted(range(len(values)), key=functools.cmp_to_key(cmp)), dtype=int)


def svd(w):
    """Thin SVD ``w = U diag(S) V^T`` with ``r = min(rows, cols)``.

    Columns are ordered by descending singular value (near-ties by original
    column index) and signed so the largest-magnitude entry of each ``U``
    column is positive.
    """
    w = as_matrix(w, "w")
    rows, cols = w.shape
    if min(rows, cols) < 1:
        raise InvalidInput("svd needs at least one row and one column")
    transpose = rows < cols
    a = w.T.copy() if transpose else w.copy()
    a, v = _jacobi_columns(a)
    s = np.linalg.norm(a, axis=0)
    scale = max(s.max(initial=0.0), np.finfo(float).tiny)
    filled = s > 1e-14 * scale
    u = np.zeros_like(a)
    u[:, filled] = a[:, filled] / s[filled]
    s[~filled] = 0.0
    u = _complete_basis(u, filled)

    order = _tie_order(s)
    u, s, v = u[:, order], s[order], v[:, order]
    if transpose:
        u, v = v, u
    # Sign convention: largest |entry| of each U column positive (first such on ties).
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdFactors(u * signs, s, v * signs)


def sym_eig(h, sym_tol=1e-8):
    """Eigenpairs of a symmetric matrix, sorted by descending ``|lambda|``."""
    h = as_matrix(h, "h")
    if h.shape[0] != h.shape[1]:
        raise InvalidInput(f"sym_eig needs a square matrix, got {h.shape}")
    if np.max(np.abs(h - h.T), initial=0.0) > sym_tol * max(1.0, np.max(np.abs(h), initial=0.0)):
        raise InvalidInput("matrix is not symmetric within tolerance")
    h = 0.5 * (h + h.T)
    vals, vecs = np.linalg.eigh(h)
    order = _tie_order(np.abs(vals))
    return vals[order], vecs[:, order]


def stream_id(name, index=0):
    """Stable 64-bit stream id for a named randomness consumer."""
    return (zlib.crc32(name.encode()) << 32) | (int(index) & 0xFFFFFFFF)


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox4x64 generator; the key packs both integers, so
    distinct ids give independent sequences.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = (self.stream_id << 64) | self.seed
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def named(cls, seed, name, index=0):
        return cls(seed, stream_id(name, index))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def rademacher(self, n, mask=None):
        return rademacher(self, n, mask)


def rademacher(rng, n, mask=None):
    """I.i.d. +-1 vector of length ``n``; entries listed in ``mask`` are zeroed.

    ``n`` may also be a shape tuple, in which case ``mask`` applies to the
    last axis.
    """
    shape = (n,) if np.isscalar(n) else tuple(n)
    if shape[-1] < 1:
        raise InvalidInput("rademacher needs n >= 1")
    # One 64-bit draw per entry, so the sequence does not depend on how draws are chunked.
    z = rng.generator.integers(0, 2, size=shape, dtype=np.int64).astype(np.float64)
    z = 2.0 * z - 1.0
    if mask is not None:
        mask = np.asarray(mask)
        if mask.dtype == bool:
            z[..., mask] = 0.0
        elif mask.size:
            z[..., mask.astype(int)] = 0.0
    return z
