"""
Reverse-mode gradients on a tape
================================

Every network in the package runs on a small float64 autodiff engine.  This
walk-through records a few operations, pulls gradients back, and checks them
against central finite differences.
"""

import numpy as np

from stad import tensor as tn
from stad.tensor import GradTape, Tensor

rng = np.random.default_rng(0)

# A leaf that wants a gradient, and a constant weight matrix
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
W = Tensor(rng.normal(size=(3, 2)))

# Operations executed inside the context are recorded; backward needs a scalar
with GradTape() as tape:
    y = tn.relu(tn.matmul(x, W))
    loss = tn.l2norm(y)
tape.backward(loss)
print("loss:", loss.item())
print("dloss/dx:\n", x.grad)


# Central differences for comparison
def f(v):
    return float(np.linalg.norm(np.maximum(v @ W.values, 0.0)))


h = 1e-6
fd = np.zeros_like(x.values)
for idx in np.ndindex(*x.shape):
    e = np.zeros_like(x.values)
    e[idx] = h
    fd[idx] = (f(x.values + e) - f(x.values - e)) / (2 * h)
print("max |tape - finite difference|:", np.abs(fd - x.grad).max())

# Transposed convolution is the exact adjoint of convolution:
# <conv(a), b> == <a, deconv(b)> for the same kernel
k = rng.normal(size=(5, 2, 3, 3))
a = rng.normal(size=(2, 6, 7))
b = rng.normal(size=(5, 6, 7))
lhs = float((tn.conv2d(Tensor(a), Tensor(k)).values * b).sum())
rhs = float((a * tn.deconv2d(Tensor(b), Tensor(k)).values).sum())
print(f"adjoint identity: {lhs:.12f} vs {rhs:.12f}")
