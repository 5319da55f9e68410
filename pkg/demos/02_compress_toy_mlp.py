"""Pruning singular-value bases of a small MLP.

Each dense weight becomes U diag(sigma) V^T, so dropping a basis means
zeroing one sigma. We train on a blobs task, then prune over four rounds to
a keep ratio of 0.25 with three scoring rules:

* bsi: -sigma g + sigma^2 h / 2, with h from gradient-difference probes
* gradient_only: the first term alone
* magnitude: |sigma|
"""

from basisprune import importance as imp
from basisprune import model as mdl
from basisprune.numkit import RngStream

train = mdl.make_dataset("blobs", classes=3, dims=8, n=512, seed=0, split=0)
test = mdl.make_dataset("blobs", classes=3, dims=8, n=256, seed=0, split=1)

model = mdl.init_mlp([8, 16, 16, 3], RngStream.named(0, "init"))
order = RngStream.named(0, "train")
for _ in range(20):
    for b in order.permutation(len(train)):
        mdl.train_step(model, train[int(b)], lr=0.3)
loss, acc = mdl.evaluate(model, test)
print(f"trained: accuracy={acc:.3f} active bases={model.num_active()} params={model.param_count()}")

schedule = imp.PruneSchedule(pruning_epochs=8, pruning_rounds=4, num_iter_per_epoch=16,
                             sampling_iter_ratio=0.25, keep_ratio=0.25)
print(f"per-round keep ratio {schedule.keep_ratio_per_pruning:.4f}, "
      f"{schedule.iter_per_pruning} iterations per round, "
      f"{schedule.num_profiling_iter} of them profiling")

for policy in imp.POLICIES:
    res = imp.run_compression(model.copy(), train, schedule, policy, epsilon=1e-3, seed=0,
                              lr=0.3, eval_batches=test)
    counts = [r["active_bases_total"] for r in res.metrics]
    print(f"{policy:14s} accuracy={res.metrics[-1]['accuracy']:.3f} "
          f"active per round={counts} params={res.model.param_count()}")
