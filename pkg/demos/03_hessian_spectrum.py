"""How fast does the sigma-space Hessian spectrum decay?

For each layer we form the dense Hessian over its largest singular values
by differencing backprop gradients, pool the eigenvalues of all layer
blocks and fit the envelope |lambda_k| <= |lambda_1| k^-alpha. An alpha
above 1/2 is what makes the probe variance bound dimension-free.
"""

import numpy as np

from basisprune import model as mdl
from basisprune import spectra
from basisprune.numkit import RngStream

train = mdl.make_dataset("blobs", classes=3, dims=8, n=512, seed=0)
model = mdl.init_mlp([8, 16, 16, 3], RngStream.named(0, "init"))
order = RngStream.named(0, "train")
for _ in range(20):
    for b in order.permutation(len(train)):
        mdl.train_step(model, train[int(b)], lr=0.3)

res = spectra.block_diag_sv_spectrum(model, train, top_k=3)
print("rank  |lambda|     envelope")
for k, m in res.rows():
    print(f"{k:4d}  {m:.3e}   {res.fit.envelope(k):.3e}")
print(f"alpha={res.fit.alpha:.3f} (needs > 0.5), lambda_1={res.fit.lambda1_abs:.4f}")

# The output layer's diagonal is never negative: (v.x)^2 times a variance.
layer = model.layers[-1]
x = np.tanh(np.tanh(train[0].inputs[0] @ model.layers[0].weight().T) @ model.layers[1].weight().T)
logits = layer.weight() @ x
print("output-layer curvature:",
      [round(spectra.lm_head_hessian_diag(layer.U[:, i], layer.V[:, i], x, logits), 5)
       for i in range(layer.rank)])
