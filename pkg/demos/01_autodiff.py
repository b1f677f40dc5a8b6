"""
Reverse-mode gradients on a tape
================================

Every operation run inside ``record()`` is appended to a tape. ``grad``
walks the tape backwards, and ``finite_diff_check`` compares the result
with central differences.
"""
import numpy as np

from bitta import tensor as T

rng = np.random.default_rng(0)
x = rng.normal(size=(6, 5, 2))

# a single conv -> relu -> pool stage, squashed to a scalar
with T.record() as rec:
    k = T.Tensor(rng.normal(size=(3, 3, 2, 4)), requires_grad=True)
    h = T.avgpool(T.relu(T.conv2d(T.Tensor(x), k, pad=1)), (2, 1))
    loss = T.mean(T.multiply(h, h))
    (gk,) = T.grad(loss, [k], rec)

print("loss", loss.item())
print("tape length", len(rec.entries), "ops:", [e.op for e in rec.entries])
print("gradient shape", gk.shape)


def loss_fn(params):
    with T.record() as r:
        kk = T.Tensor(params[0], requires_grad=True)
        out = T.avgpool(T.relu(T.conv2d(T.Tensor(x), kk, pad=1)), (2, 1))
        value = T.mean(T.multiply(out, out))
        return value.item(), T.grad(value, [kk], r)


print("max relative error vs finite differences:", T.finite_diff_check(loss_fn, [k.data], 1e-6))

# shape mistakes name the op and the offending shapes
try:
    T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
except T.ShapeError as exc:
    print("ShapeError:", exc)
