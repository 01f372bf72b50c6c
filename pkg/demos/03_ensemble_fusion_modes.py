"""
Seven ways to fuse a teacher pool's logits
==========================================

A pool of teachers produces an (N, T, C) stack of logits. The fixed average
a1 needs no training. z1 is a learned per-sample mixture: a small network
scores each teacher and the softmaxed scores weight the stack. z2 fuses per
class with a (C, T) weight matrix initialized uniform, so it starts exactly
at a1. Multi-letter modes are the arithmetic mean of their constituents.
"""

import numpy as np

from scenekd.fusion import (FUSION_MODES, TeacherPool, Z1Head, Z2Head, fuse,
                            teacher_logits)
from scenekd.model import build_network, tiny_student_config

HW = (16, 12)
CLASSES = 4
TEACHERS = 3

pool = TeacherPool([build_network(tiny_student_config(CLASSES), seed=s,
                                  dtype=np.float64, input_hw=HW)
                    for s in range(TEACHERS)])
z1 = Z1Head(build_network(tiny_student_config(TEACHERS), seed=9,
                          dtype=np.float64, input_hw=HW))
z2 = Z2Head(TEACHERS, CLASSES, dtype=np.float64)

rng = np.random.default_rng(0)
x = rng.standard_normal((5, 1, *HW))
tl = teacher_logits(pool, x)
print("teacher logit stack:", tl.shape)

for mode in FUSION_MODES:
    out = fuse(mode, tl, x=x, z1=z1, z2=z2)
    print(f"{mode:>7}: fused logits row 0 = {np.round(out[0], 3)}")

# z1 weights live on the probability simplex: nonnegative, rows sum to one,
# so the fused logits stay inside the convex hull of the teachers'
fused, weights = z1.fuse(x, tl)
print("z1 weights row sums:", weights.sum(axis=1))
lo, hi = tl.min(axis=1), tl.max(axis=1)
print("fused within teacher hull:", bool(np.all((fused >= lo - 1e-12) & (fused <= hi + 1e-12))))

# z2 at its uniform init reproduces the plain average exactly
print("z2(init) == a1:", bool(np.allclose(z2.fuse(tl), tl.mean(axis=1), atol=1e-12)))
