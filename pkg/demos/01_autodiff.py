# %% [markdown]
# The numeric core: a float64 tape, a handful of ops, and a FLOP counter.
# Everything the models do is built from these pieces.

# %%
import numpy as np

from dcin import core as F
from dcin.core import FlopCounter, GradTape, Tensor

rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="W")
x = rng.normal(size=(4, 3))
y = np.array([1.0, 0.0, 1.0, 1.0])

# %%
# logistic regression loss, recorded on a tape
with GradTape() as tape:
    p = F.sigmoid(F.sum(F.linear(x, W), axis=-1))
    loss = F.mul(F.mean(F.add(F.mul(F.log(p), y), F.mul(F.log(F.sub(1.0, p)), 1.0 - y))), -1.0)
grad = tape.backward(loss)[W]
print("loss", loss.item())
print("dL/dW\n", grad)

# %%
# the closed form: dL/dz = p - y, z = sum_k (x W)_k
closed = x.T @ ((p.data - y)[:, None] * np.ones((1, 2))) / len(y)
print("max diff to closed form", np.abs(grad - closed).max())

# %%
# central differences agree too
def loss_at(Wd):
    p = 1 / (1 + np.exp(-(x @ Wd).sum(-1)))
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))

num = np.zeros_like(W.data)
for idx in np.ndindex(W.shape):
    e = np.zeros_like(W.data)
    e[idx] = 1e-5
    num[idx] = (loss_at(W.data + e) - loss_at(W.data - e)) / 2e-5
print("max diff to finite differences", np.abs(grad - num).max())

# %%
# FLOPs are counted per op, with no tape needed
with FlopCounter() as fc:
    F.linear(x, W)
print("flops for a (4x3)@(3x2) product:", fc.flops)
