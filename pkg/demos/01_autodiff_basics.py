"""Tour of the autodiff core: tensors, tapes, and gradient checking.

Everything downstream (layers, training, transfer) is built on these
few primitives, so this is the place to start reading.
"""

import numpy as np

from xferad import tensor as T

# Tensors wrap numpy arrays; ops record themselves on a Tape when one is
# passed, and backward() replays the tape in reverse.
w = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
tape = T.Tape()
loss = T.sum_all(T.mul(w, w, tape), tape)   # sum(w^2)
T.backward(loss, tape)
print("loss = sum(w^2) =", float(loss.data))
print("dloss/dw =", w.grad, "(expected 2*w = [2, 4, 6])")

# A convolution is just another taped op. Here: one 3x3 all-ones kernel
# over an all-ones image computes a window sum.
x = T.Tensor(np.ones((1, 1, 5, 5)), requires_grad=True)
k = T.Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
b = T.Tensor(np.zeros(1), requires_grad=True)
tape = T.Tape()
out = T.conv2d(x, k, b, stride=1, padding=0, tape=tape)
print("\nconv output (each value sums a 3x3 window of ones):")
print(out.data[0, 0])

T.backward(T.sum_all(out, tape), tape)
print("kernel gradient (how often each tap saw a pixel):")
print(k.grad[0, 0])

# The test suite trusts none of this on faith: every backward rule is
# compared against central finite differences. Same check, by hand:
rng = np.random.default_rng(0)
a = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
m = T.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
tape = T.Tape()
T.backward(T.sum_all(T.matmul(a, m, tape), tape), tape)

eps = 1e-5
fd = np.zeros_like(a.data)
for i in np.ndindex(a.shape):
    orig = a.data[i]
    a.data[i] = orig + eps
    up = (a.data @ m.data).sum()
    a.data[i] = orig - eps
    down = (a.data @ m.data).sum()
    a.data[i] = orig
    fd[i] = (up - down) / (2 * eps)
print("\nmatmul grad vs finite differences, max abs error:",
      float(np.abs(a.grad - fd).max()))
