"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small graph, pull gradients back through it and compare them with
central finite differences.
"""

import numpy as np

from regioncl import tensor as T
from regioncl.gradcheck import grad_check

# Everything here runs in 64-bit so finite differences are meaningful.
T.set_default_dtype(np.float64)

# An affine layer on a single row: [1, 1] @ [[2, 3], [4, 5]] + [1, 1] = [7, 9]
x = T.parameter([[1.0, 1.0]])
W = T.parameter([[2.0, 3.0], [4.0, 5.0]])
b = T.parameter([1.0, 1.0])
y = T.affine(x, W, b)
print("affine:", y.data)

# backward() returns a dict keyed by the leaf tensors
grads = T.backward(T.tsum(T.square(y)))
print("dL/dW:\n", grads[W])

# A conv layer over a ramp image, followed by ReLU and global average pooling
img = np.arange(16.0).reshape(1, 4, 4)
kernel = np.full((1, 1, 2, 2), 0.25)
print("2x2 average of the ramp:\n", T.conv2d(img, kernel).data[0])

# Finite-difference check of a composite function
rng = np.random.default_rng(0)
W0 = T.Tensor(rng.standard_normal((4, 3)))
b0 = T.Tensor(rng.standard_normal(3))
target = T.Tensor(rng.standard_normal((2, 3)))


def loss(inp):
    return T.tsum(T.mul(T.softmax_row(T.affine(inp, W0, b0)), target))


print("relative error:", grad_check(loss, rng.standard_normal((2, 4))))

# cosine similarity flags zero vectors instead of dividing by zero
cos = T.cosine_similarity([[1.0, 2.0], [0.0, 0.0]], [[2.0, 1.0], [1.0, 0.0]])
print("cosine:", cos.data, "degenerate rows:", cos.flags["degenerate"])
