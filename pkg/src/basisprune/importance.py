"""Importance scoring and the iterative basis-pruning driver.

Dropping basis ``i`` changes sigma_i by ``-sigma_i``; a second-order Taylor
expansion of the loss gives the predicted increase

    I_i = -sigma_i * E[dl/dsigma_i] + 0.5 * sigma_i**2 * E[d2l/dsigma_i2]

which ranks bases within each layer's candidate pool.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .errors import InvalidConfig
from .numkit import RngStream
from .probe import DiagEstimate, ProbeConfig, accumulate_profile, hessian_diag_probe, probe_streams

POLICIES = ("bsi", "gradient_only", "magnitude")


def importance_score(sigma, grad_mean, hess_mean):
    return -sigma * grad_mean + 0.5 * sigma * sigma * hess_mean


@dataclass
class LayerImportance:
    indices: np.ndarray
    sigma: np.ndarray
    grad_mean: np.ndarray
    hess_mean: np.ndarray
    score: np.ndarray


@dataclass
class ImportanceTable:
    layers: dict = field(default_factory=dict)

    @classmethod
    def build(cls, model, grad_means, hess_means, pools=None):
        """Score every active basis (or every pool member when ``pools`` is given).

        ``grad_means[l]`` is a dense per-basis vector; ``hess_means[l]`` a
        :class:`DiagEstimate`. Bases without a Hessian estimate get 0 curvature.
        """
        table = cls()
        for l, layer in enumerate(model.layers):
            idx = np.flatnonzero(layer.active) if pools is None else np.asarray(pools[l], dtype=int)
            h = np.zeros(layer.rank)
            est = hess_means.get(l) if hess_means else None
            if est is not None:
                h[est.indices] = est.values
            sig = layer.sigma[idx].copy()
            g = np.asarray(grad_means[l])[idx].copy()
            table.layers[l] = LayerImportance(idx, sig, g, h[idx], importance_score(sig, g, h[idx]))
        return table


@dataclass
class CandidatePool:
    candidates: np.ndarray
    keep: np.ndarray
    threshold: float


def candidate_threshold(keep_ratio, gamma, rounds):
    return keep_ratio ** (gamma / rounds)


def build_candidate_pool(sigma, active, threshold):
    """Split the active bases of one layer into keep-set ``K`` and pool ``C``.

    ``K`` is the shortest prefix of the ``|sigma|``-descending order whose
    ``|sigma|`` mass reaches ``threshold`` times the total active mass.
    """
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return CandidatePool(idx, idx, threshold)
    mag = np.abs(np.asarray(sigma)[idx])
    order = idx[np.lexsort((idx, -mag))]
    csum = np.cumsum(np.abs(np.asarray(sigma)[order]))
    target = threshold * csum[-1]
    k = int(np.searchsorted(csum, target, side="left")) + 1 if target > 0 else 0
    k = min(k, idx.size)
    return CandidatePool(np.sort(order[k:]), np.sort(order[:k]), threshold)


def build_candidate_pools(model, keep_ratio, gamma, rounds):
    rho = candidate_threshold(keep_ratio, gamma, rounds)
    return [build_candidate_pool(l.sigma, l.active, rho) for l in model.layers]


@dataclass
class Selection:
    prune: np.ndarray
    keep: np.ndarray
    positive_total: float
    kept_total: float
    target: float


def select_prune_set(indices, scores, keep_ratio_per_pruning, sigmas=None):
    """Choose bases to drop from a candidate pool.

    Keeps the fewest highest-scoring bases whose score sum reaches
    ``keep_ratio_per_pruning`` times the pool's total positive score; the
    rest are pruned. When no score is positive the whole pool goes. Ties keep
    the larger ``|sigma|`` first, then the lower index.
    """
    indices = np.asarray(indices, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if indices.size == 0:
        return Selection(indices, indices, 0.0, 0.0, 0.0)
    mags = np.zeros(indices.size) if sigmas is None else np.abs(np.asarray(sigmas, dtype=np.float64))
    order = np.lexsort((indices, -mags, -scores))
    ranked = scores[order]
    positive = np.cumsum(np.where(ranked > 0, ranked, 0.0))
    total = float(positive[-1])
    if total <= 0:
        return Selection(np.sort(indices), indices[:0], total, 0.0, 0.0)
    target = keep_ratio_per_pruning * total
    csum = np.cumsum(ranked)
    k = int(np.argmax(csum >= target)) + 1
    return Selection(np.sort(indices[order[k:]]), np.sort(indices[order[:k]]),
                     total, float(csum[k - 1]), target)


@dataclass
class PruneSchedule:
    pruning_epochs: int
    pruning_rounds: int
    num_iter_per_epoch: int
    sampling_iter_ratio: float
    keep_ratio: float
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise InvalidConfig(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.gamma <= 0:
            raise InvalidConfig("gamma must be > 0")
        if self.pruning_rounds < 1 or self.pruning_epochs < 0 or self.num_iter_per_epoch < 0:
            raise InvalidConfig("pruning_rounds >= 1, epochs and iterations >= 0 required")
        if not 0 <= self.sampling_iter_ratio <= 1:
            raise InvalidConfig("sampling_iter_ratio must lie in [0, 1]")

    @property
    def total_iters(self):
        return self.num_iter_per_epoch * self.pruning_epochs

    @property
    def iter_per_pruning(self):
        return int(round(self.total_iters / self.pruning_rounds))

    @property
    def keep_ratio_per_pruning(self):
        return self.keep_ratio ** (1.0 / self.pruning_rounds)

    @property
    def num_profiling_iter(self):
        return int(round(self.sampling_iter_ratio * self.iter_per_pruning))

    def validate(self, policy):
        if self.iter_per_pruning < 1:
            raise InvalidConfig("schedule yields zero iterations per pruning round")
        if self.num_profiling_iter > self.iter_per_pruning:
            raise InvalidConfig("num_profiling_iter exceeds iter_per_pruning")
        if policy != "magnitude" and self.num_profiling_iter < 1:
            raise InvalidConfig(f"policy {policy!r} needs at least one profiling iteration")


@dataclass
class LayerRound:
    layer: int
    pool: np.ndarray
    scores: np.ndarray
    pruned: np.ndarray
    positive_total: float
    kept_total: float
    target: float


@dataclass
class RoundRecord:
    round: int
    iteration: int
    keep_ratio_per_pruning: float
    active_before: int
    active_after: int
    layers: list
    probes_checked: int = 0
    forced: bool = False


@dataclass
class CompressionResult:
    model: mdl.MlpModel
    metrics: list
    rounds: list


def _profile_rows(round_idx, iteration, model, batches, start, timing):
    loss, acc = mdl.evaluate(model, batches)
    wall = int(round((time.perf_counter() - start) * 1000)) if timing else 0
    return dict(round=round_idx, iteration=iteration, loss=loss, accuracy=acc,
                active_bases_total=model.num_active(), param_count=model.param_count(),
                wall_time_ms=wall)


def run_compression(model, batches, schedule, policy="bsi", epsilon=1e-3, num_probes=1,
                    seed=0, lr=0.1, momentum=0.0, timing=True, on_round=None,
                    eval_batches=None):
    """Iterative prune-while-finetuning loop.

    Every block of ``iter_per_pruning`` iterations trains first and profiles
    for the final ``num_profiling_iter`` iterations (gradients for all
    policies except magnitude, Hessian probes for ``bsi`` only). At block end
    each layer's candidate pool is scored and pruned with
    :func:`select_prune_set`, and accumulators reset. The model is modified
    in place and returned in the result. A round in which the ratio rule keeps
    every candidate (possible when one positive score dominates a small pool)
    prunes the single lowest-scoring candidate instead, so the active count
    strictly falls each round while ``keep_ratio < 1``. Metrics are evaluated on
    ``eval_batches`` (the training batches by default).
    """
    if policy not in POLICIES:
        raise InvalidConfig(f"unknown policy {policy!r}")
    schedule.validate(policy)
    data_rng = RngStream.named(seed, "train-data")
    p_rngs = probe_streams(seed, len(model.layers))
    state = mdl.SgdState(momentum=momentum)
    eval_batches = batches if eval_batches is None else eval_batches
    start = time.perf_counter()
    metrics = [_profile_rows(0, 0, model, eval_batches, start, timing)]
    rounds = []

    ipp, npi = schedule.iter_per_pruning, schedule.num_profiling_iter
    n_layers = len(model.layers)
    grad_acc = [np.zeros(l.rank) for l in model.layers]
    hess_acc, pools = {}, None
    probes_checked = 0
    round_idx = 0
    for it in range(1, schedule.total_iters + 1):
        batch = batches[int(data_rng.integers(0, len(batches)))]
        in_block = (it - 1) % ipp + 1
        if in_block <= ipp - npi:
            mdl.train_step(model, batch, state, lr)
        elif policy != "magnitude":
            if pools is None:
                pools = build_candidate_pools(model, schedule.keep_ratio, schedule.gamma,
                                              schedule.pruning_rounds)
                hess_acc = {l: DiagEstimate.zeros(pools[l].candidates) for l in range(n_layers)
                            if pools[l].candidates.size}
            g = mdl.loss_and_grads(model, batch)
            for l in range(n_layers):
                grad_acc[l] += g.sigma[l] / npi
            if policy == "bsi" and hess_acc:
                before = [l.sigma.tobytes() for l in model.layers]
                cfg = ProbeConfig(epsilon, num_probes, seed,
                                  {l: e.indices for l, e in hess_acc.items()})
                est = hessian_diag_probe(model, batch, cfg, p_rngs)
                if [l.sigma.tobytes() for l in model.layers] != before:
                    raise RuntimeError("model state not restored after probing")
                probes_checked += 1
                for l, e in est.items():
                    hess_acc[l] = accumulate_profile(hess_acc[l], e, npi)

        if in_block == ipp:
            round_idx += 1
            if pools is None:
                pools = build_candidate_pools(model, schedule.keep_ratio, schedule.gamma,
                                              schedule.pruning_rounds)
            rec = _prune_round(model, policy, pools, grad_acc, hess_acc, schedule,
                               round_idx, it, probes_checked)
            rounds.append(rec)
            grad_acc = [np.zeros(l.rank) for l in model.layers]
            hess_acc, pools, probes_checked = {}, None, 0
            metrics.append(_profile_rows(round_idx, it, model, eval_batches, start, timing))
            if on_round is not None:
                on_round(rec, metrics[-1])
    return CompressionResult(model, metrics, rounds)


def _prune_round(model, policy, pools, grad_acc, hess_acc, schedule, round_idx, it, probes):
    ratio = schedule.keep_ratio_per_pruning
    active_before = model.num_active()
    table = None
    if policy != "magnitude":
        hess = hess_acc if policy == "bsi" else {}
        table = ImportanceTable.build(model, grad_acc, hess, [p.candidates for p in pools])
    layers = []
    for l, layer in enumerate(model.layers):
        pool = pools[l].candidates
        if pool.size == 0:
            continue
        sig = layer.sigma[pool]
        if policy == "magnitude":
            scores = np.abs(sig)
        else:
            scores = table.layers[l].score
        sel = select_prune_set(pool, scores, ratio, sig)
        mdl.prune_bases(layer, sel.prune)
        layers.append(LayerRound(l, pool, scores, sel.prune, sel.positive_total,
                                 sel.kept_total, sel.target))
    forced = False
    if ratio < 1 and model.num_active() == active_before and layers:
        # The ratio rule kept every candidate; drop the one whose removal is
        # predicted to cost least so the model still shrinks this round.
        rec, j = min(((rec, j) for rec in layers for j in range(rec.pool.size)),
                     key=lambda t: (t[0].scores[t[1]],
                                    abs(model.layers[t[0].layer].sigma[t[0].pool[t[1]]]),
                                    -t[0].pool[t[1]], t[0].layer))
        mdl.prune_bases(model.layers[rec.layer], [rec.pool[j]])
        rec.pruned = np.array([rec.pool[j]])
        forced = True
    return RoundRecord(round_idx, it, ratio, active_before, model.num_active(), layers, probes,
                       forced)


def svd_truncate(model, keep_ratio):
    """One-shot baseline: keep the top ``floor(keep_ratio * r)`` bases per layer."""
    for layer in model.layers:
        idx = np.flatnonzero(layer.active)
        keep = int(np.floor(keep_ratio * idx.size + 1e-12))
        order = idx[np.lexsort((idx, -np.abs(layer.sigma[idx])))]
        mdl.prune_bases(layer, order[keep:])
    return model


def finetune(model, batches, iters, seed=0, lr=0.1, momentum=0.0, stream="finetune"):
    """Plain SGD for ``iters`` steps on uniformly sampled batches."""
    rng = RngStream.named(seed, stream)
    state = mdl.SgdState(momentum=momentum)
    for _ in range(iters):
        mdl.train_step(model, batches[int(rng.integers(0, len(batches)))], state, lr)
    return model
