"""Basis-form MLP classifiers with exact backprop to singular values.

Each linear map is stored as

    W = sum_{i active} sigma_i u_i v_i^T + sum_j aux_u_j aux_v_j^T

with ``U``/``V`` frozen at reparameterization time. Layers carry no bias.
The output layer produces logits that feed a softmax cross-entropy loss
averaged over the batch.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import InvalidInput

ACTIVATIONS = ("tanh", "gelu", "identity")

_GELU_C = np.sqrt(2.0 / np.pi)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "gelu":
        return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))
    if name == "identity":
        return a
    raise InvalidInput(f"unknown activation {name!r}")


def _act_grad(name, a):
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if name == "gelu":
        inner = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner
    if name == "identity":
        return np.ones_like(a)
    raise InvalidInput(f"unknown activation {name!r}")


@dataclass(eq=False)
class BasisLinear:
    """Linear map ``y = W x`` in basis form; ``W`` is ``n x m``."""

    U: np.ndarray
    V: np.ndarray
    sigma: np.ndarray
    aux_u: np.ndarray
    aux_v: np.ndarray
    active: np.ndarray

    @property
    def out_features(self):
        return self.U.shape[0]

    @property
    def in_features(self):
        return self.V.shape[0]

    @property
    def rank(self):
        return self.sigma.shape[0]

    @property
    def aux_rank(self):
        return self.aux_u.shape[1]

    @property
    def num_active(self):
        return int(self.active.sum())

    def effective_sigma(self, sigma=None):
        sigma = self.sigma if sigma is None else sigma
        return np.where(self.active, sigma, 0.0)

    def weight(self):
        return (self.U * self.effective_sigma()) @ self.V.T + self.aux_u @ self.aux_v.T

    def aux_weight(self):
        return self.aux_u @ self.aux_v.T

    def apply(self, x):
        """Row-batched ``x @ W^T``."""
        out = ((x @ self.V) * self.effective_sigma()) @ self.U.T
        if self.aux_rank:
            out = out + (x @ self.aux_v) @ self.aux_u.T
        return out

    def param_count(self):
        n, m = self.out_features, self.in_features
        return self.num_active * (1 + n + m) + self.aux_rank * (n + m)

    def copy(self):
        return BasisLinear(*(np.array(a, copy=True) for a in (
            self.U, self.V, self.sigma, self.aux_u, self.aux_v, self.active)))


def reparameterize(w, aux_rank, rng):
    """Convert a dense ``n x m`` weight into basis form.

    Auxiliary factors are i.i.d. normal scaled by ``1e-3 / sqrt(max(n, m))``.
    """
    if aux_rank < 0:
        raise InvalidInput("aux_rank must be >= 0")
    f = numkit.svd(w)
    n, m = f.U.shape[0], f.V.shape[0]
    scale = 1e-3 / np.sqrt(max(n, m))
    aux_u = scale * rng.normal((n, aux_rank))
    aux_v = scale * rng.normal((m, aux_rank))
    return BasisLinear(f.U, f.V, f.S.copy(), aux_u, aux_v, np.ones(f.S.shape[0], dtype=bool))


def prune_bases(layer, indices):
    """Zero the listed singular values and mark them inactive (idempotent)."""
    idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=int)
    if idx.size == 0:
        return
    if idx.min() < 0 or idx.max() >= layer.rank:
        raise InvalidInput(f"basis index out of range 0..{layer.rank - 1}")
    sigma = layer.sigma.copy()
    sigma[idx] = 0.0
    layer.sigma = sigma
    layer.active[idx] = False


@dataclass(eq=False)
class MlpModel:
    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInput(f"unknown activation {self.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_features != b.in_features:
                raise InvalidInput(
                    f"layer dims incompatible: {a.out_features} -> {b.in_features}")

    @property
    def sizes(self):
        return [self.layers[0].in_features] + [l.out_features for l in self.layers]

    def num_active(self):
        return sum(l.num_active for l in self.layers)

    def param_count(self):
        return sum(l.param_count() for l in self.layers)

    def sigma_max(self):
        return max((np.max(np.abs(l.effective_sigma()), initial=0.0) for l in self.layers),
                   default=0.0)

    def copy(self):
        return MlpModel([l.copy() for l in self.layers], self.activation)

    def dense_weights(self):
        return [l.weight() for l in self.layers]


def from_dense(weights, aux_rank=0, rng=None, activation="tanh"):
    rng = rng if rng is not None else numkit.RngStream(0)
    return MlpModel([reparameterize(w, aux_rank, rng) for w in weights], activation)


def init_mlp(sizes, rng, aux_rank=0, activation="tanh"):
    """Random dense MLP (Gaussian, variance 1/fan_in) converted to basis form."""
    weights = [rng.normal((n, m)) / np.sqrt(m) for m, n in zip(sizes, sizes[1:])]
    return from_dense(weights, aux_rank, rng, activation)


@dataclass
class Batch:
    """Inputs ``(batch, d)`` and target distributions ``(batch, classes)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        t = np.asarray(self.targets)
        if t.ndim == 1:
            raise InvalidInput("targets must be distributions; use Batch.from_labels")
        self.targets = t.astype(np.float64)
        if np.any(self.targets < 0) or np.any(np.abs(self.targets.sum(1) - 1) > 1e-12):
            raise InvalidInput("target rows must be non-negative and sum to 1")

    @classmethod
    def from_labels(cls, inputs, labels, classes):
        labels = np.asarray(labels, dtype=int)
        return cls(inputs, np.eye(classes)[labels])

    @property
    def labels(self):
        return np.argmax(self.targets, axis=1)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class GradBundle:
    loss: float
    sigma: list
    aux_u: list
    aux_v: list


def forward(model, inputs):
    """Return ``(logits, cache)``; cache holds each layer's input and pre-activation."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_features:
        raise InvalidInput(
            f"input shape {x.shape} incompatible with in_features={model.layers[0].in_features}")
    cache = []
    h = x
    last = len(model.layers) - 1
    for k, layer in enumerate(model.layers):
        a = layer.apply(h)
        cache.append((h, a))
        h = a if k == last else _act(model.activation, a)
    return h, cache


def log_softmax(z):
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    return float(-np.mean(np.sum(targets * log_softmax(logits), axis=-1)))


def loss(model, batch):
    logits, _ = forward(model, batch.inputs)
    return cross_entropy(logits, batch.targets)


def loss_and_grads(model, batch):
    """Mean softmax cross-entropy and its gradients.

    ``dl/dsigma_i = u_i^T G v_i`` with ``G = dl/dW`` for the layer; auxiliary
    gradients are ``G aux_v`` and ``G^T aux_u``. Inactive bases get 0.
    """
    logits, cache = forward(model, batch.inputs)
    logp = log_softmax(logits)
    value = float(-np.mean(np.sum(batch.targets * logp, axis=-1)))
    delta = (np.exp(logp) - batch.targets) / len(batch)
    return _backprop(model, cache, delta, value)


def _backprop(model, cache, delta, value):
    n_layers = len(model.layers)
    g_sigma, g_au, g_av = [None] * n_layers, [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        layer = model.layers[k]
        h, _ = cache[k]
        du = delta @ layer.U
        hv = h @ layer.V
        g_sigma[k] = np.where(layer.active, np.einsum("bi,bi->i", du, hv), 0.0)
        if layer.aux_rank:
            g_au[k] = delta.T @ (h @ layer.aux_v)
            g_av[k] = h.T @ (delta @ layer.aux_u)
        else:
            g_au[k] = np.zeros_like(layer.aux_u)
            g_av[k] = np.zeros_like(layer.aux_v)
        if k > 0:
            dh = (du * layer.effective_sigma()) @ layer.V.T
            if layer.aux_rank:
                dh = dh + (delta @ layer.aux_u) @ layer.aux_v.T
            delta = dh * _act_grad(model.activation, cache[k - 1][1])
    return GradBundle(value, g_sigma, g_au, g_av)


def grads_from_weight_grad(layer, g):
    """Project a dense weight gradient ``G`` onto the layer's parameters."""
    g_sigma = np.where(layer.active, np.einsum("ni,nm,mi->i", layer.U, g, layer.V), 0.0)
    return g_sigma, g @ layer.aux_v, g.T @ layer.aux_u


@dataclass
class SgdState:
    momentum: float = 0.0
    velocity: list = field(default_factory=list)


def train_step(model, batch, state=None, lr=0.1):
    """One SGD step on sigma and the auxiliary factors; returns ``(state, loss)``."""
    state = state if state is not None else SgdState()
    g = loss_and_grads(model, batch)
    if lr == 0:
        return state, g.loss
    if state.momentum and not state.velocity:
        state.velocity = [[np.zeros_like(a) for a in (l.sigma, l.aux_u, l.aux_v)]
                          for l in model.layers]
    for k, layer in enumerate(model.layers):
        updates = [g.sigma[k], g.aux_u[k], g.aux_v[k]]
        if state.momentum:
            vel = state.velocity[k]
            for j in range(3):
                vel[j] = state.momentum * vel[j] + updates[j]
            updates = vel
        layer.sigma = np.where(layer.active, layer.sigma - lr * updates[0], 0.0)
        if layer.aux_rank:
            layer.aux_u = layer.aux_u - lr * updates[1]
            layer.aux_v = layer.aux_v - lr * updates[2]
    return state, g.loss


def evaluate(model, batches):
    """Sample-weighted mean loss and accuracy over a list of batches."""
    total = sum(len(b) for b in batches)
    if total == 0:
        return float("nan"), float("nan")
    loss_sum, correct = 0.0, 0
    for b in batches:
        logits, _ = forward(model, b.inputs)
        loss_sum += cross_entropy(logits, b.targets) * len(b)
        correct += int(np.sum(np.argmax(logits, axis=1) == b.labels))
    return loss_sum / total, correct / total


def make_dataset(kind, classes, dims, n, seed, batch_size=32, split=0):
    """Synthetic classification data split into mini-batches.

    ``blobs``: Gaussian clusters around well-separated random means.
    ``spirals``: interleaved arms in the first two coordinates, small noise
    elsewhere. Labels cycle through the classes before shuffling, so class
    counts differ by at most one. Different ``split`` values draw fresh
    samples from the same class geometry (e.g. a held-out set).
    """
    if classes < 2 or dims < 2:
        raise InvalidInput("need classes >= 2 and dims >= 2")
    if n <= 0:
        return []
    geometry = numkit.RngStream.named(seed, "dataset", 0)
    rng = numkit.RngStream.named(seed, "dataset", split + 1)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    if kind == "blobs":
        means = geometry.normal((classes, dims))
        means *= 6.0 / np.linalg.norm(means, axis=1, keepdims=True)
        x = means[labels] + rng.normal((n, dims))
    elif kind == "spirals":
        t = rng.generator.uniform(0.05, 1.0, size=n)
        angle = 2 * np.pi * labels / classes + 3.0 * np.pi * t
        x = 0.05 * rng.normal((n, dims))
        x[:, 0] += 2.0 * t * np.cos(angle)
        x[:, 1] += 2.0 * t * np.sin(angle)
    else:
        raise InvalidInput(f"unknown dataset kind {kind!r}")
    return [Batch.from_labels(x[i:i + batch_size], labels[i:i + batch_size], classes)
            for i in range(0, n, batch_size)]
