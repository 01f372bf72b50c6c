"""
Post-training int8 quantization with batch-norm folding
=======================================================

The float network is first fused: every batch-norm folds into the preceding
convolution's weights and bias, which changes nothing numerically but leaves
a conv-only graph. Calibration batches then record activation ranges per
tensor, activations get an asymmetric per-tensor scale, weights a symmetric
per-channel scale, and inference runs on int8 values with fixed-point
requantization (a 31-bit mantissa and a shift, no float math in the conv
path). ReLU becomes a clamp at the zero point.
"""

import numpy as np

from scenekd.model import build_network, tiny_student_config
from scenekd.quantize import (activation_qparams, calibrate, dequantize,
                              fixed_point_mul, fuse_network, fused_forward,
                              quantize_multiplier, quantize_tensor)

HW = (16, 12)
rng = np.random.default_rng(0)

# -- the scalar machinery ----------------------------------------------------

qp = activation_qparams(-1.0, 2.0)
x = rng.uniform(-1, 2, 1000)
err = np.abs(x - dequantize(quantize_tensor(x, qp), qp)).max()
print(f"activation scale {qp.scale:.5f}, zero point {qp.zero_point}, "
      f"max roundtrip error {err:.5f} (bound scale/2 = {qp.scale / 2:.5f})")

mant, shift = quantize_multiplier(0.0037)
acc = rng.integers(-50000, 50000, 5)
print("fixed-point requant:", fixed_point_mul(acc, mant, shift),
      "vs float:", np.round(acc * 0.0037).astype(int))

# -- folding and integer inference -------------------------------------------

net = build_network(tiny_student_config(4), seed=0, dtype=np.float64, input_hw=HW)
for _ in range(4):  # give the norm layers non-degenerate running statistics
    net.forward(rng.standard_normal((8, 1, *HW)), train=True)

nodes = fuse_network(net)
xb = rng.standard_normal((4, 1, *HW))
drift = np.abs(fused_forward(nodes, xb) - net.forward(xb)).max()
print("norm folding max drift:", drift)

qm = calibrate(net, [rng.standard_normal((16, 1, *HW)) for _ in range(4)])
x_eval = rng.standard_normal((200, 1, *HW))
agree = (qm.int_forward(x_eval).argmax(axis=1)
         == net.forward(x_eval).argmax(axis=1)).mean()
print(f"int8 vs float argmax agreement on 200 inputs: {agree:.3f}")

# integer inference is bitwise deterministic: same input, same bytes
a, b = qm.int_forward(x_eval[:8]), qm.int_forward(x_eval[:8])
print("two int8 runs identical:", bool(np.array_equal(a, b)))
