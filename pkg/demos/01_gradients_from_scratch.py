"""
Explicit forward/backward layers, checked against finite differences
=====================================================================

Every layer in this package carries its own hand-written backward pass; there
is no autograd. This script runs a convolution and a normalization layer
forward, pulls the analytic gradients back through them, and compares each
against a central-difference estimate.
"""

import numpy as np

from scenekd import ops
from scenekd.gradcheck import max_rel_error, numerical_grad
from scenekd.ops import ConvSpec

rng = np.random.default_rng(0)

# a small grouped convolution: 2 groups, 3x3 kernel, stride 1, padding 1
spec = ConvSpec(in_channels=4, out_channels=8, kernel_h=3, kernel_w=3,
                stride=1, padding=1, groups=2)
x = rng.standard_normal((2, 4, 6, 6))
w = rng.standard_normal((8, 2, 3, 3)) * 0.3
b = rng.standard_normal(8) * 0.1

y = ops.conv2d(x, w, b, spec)
print("conv output shape:", y.shape)

# backprop a random cotangent and compare against finite differences of the
# scalar objective sum(conv(x) * go)
go = rng.standard_normal(y.shape)
gx, gw, gb = ops.conv2d_backward(go, x, w, spec)

num_gw = numerical_grad(lambda v: float((ops.conv2d(x, v, b, spec) * go).sum()), w)
num_gx = numerical_grad(lambda v: float((ops.conv2d(v, w, b, spec) * go).sum()), x)
print("weight grad rel error:", max_rel_error(gw, num_gw))
print("input  grad rel error:", max_rel_error(gx, num_gx))

# the same treatment for global response normalization, whose backward pass is
# the trickiest in the package (it couples every spatial position per channel)
gamma = np.full(4, 0.5)
beta = np.zeros(4)
z = rng.standard_normal((2, 4, 5, 5))
cot = rng.standard_normal((2, 4, 5, 5))
gz, ggamma, gbeta = ops.grn_backward(cot, z, gamma)
num_gz = numerical_grad(lambda v: float((ops.grn(v, gamma, beta) * cot).sum()), z)
print("grn input grad rel error:", max_rel_error(gz, num_gz))
