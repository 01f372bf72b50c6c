"""
The compact student network and its complexity accounting
=========================================================

The student is a stem convolution followed by three stages of
expand/depthwise/project blocks with global response normalization, then
global average pooling and a linear head. Residual connections appear only
where stride is 1 and input width equals output width.

Parameters and multiply-accumulates are counted two ways: analytically from
the config, and by instrumenting an actual forward pass. They must agree
exactly.
"""

import numpy as np

from scenekd.model import (REFERENCE_INPUT_SHAPE, build_network, count_complexity,
                           default_student_config, instrumented_mac_count,
                           make_teacher_variant)

cfg = default_student_config(num_outputs=10)
print("stage widths:", cfg.channel_widths())

rep = count_complexity(cfg, REFERENCE_INPUT_SHAPE)
print(f"parameters: {rep.params:,}")
print(f"MACs at {REFERENCE_INPUT_SHAPE}: {rep.macs:,}")
print("within the edge budget (<= 66k params, <= 30M MACs):",
      rep.params <= 66_000 and rep.macs <= 30_000_000)

# the instrumented count walks a real forward pass and tallies every conv and
# linear as it executes; it must match the analytic count exactly
net = build_network(cfg, seed=0, dtype=np.float64)
x = np.random.default_rng(0).standard_normal((1, *REFERENCE_INPUT_SHAPE))
print("instrumented == analytic:", instrumented_mac_count(net, x) == rep.macs)

logits = net.forward(x)
print("logits shape:", logits.shape)

# teachers are width/depth-scaled variants of the same recipe
for mult, extra in [(1.0, (1, 0, 0)), (1.5, (0, 0, 0)), (2.0, (0, 0, 0))]:
    t = make_teacher_variant(cfg, mult, extra)
    r = count_complexity(t, REFERENCE_INPUT_SHAPE)
    print(f"teacher x{mult} +{extra}: {r.params:,} params, {r.macs:,} MACs")
