#!/usr/bin/env python3
"""What happens right after the lambda switch from 1 to 16.

Prints 100-step means of the training bpp and distortion: the last window of
stage 1, then each window of stage 2. Uses the cached sweep models.
"""
from aeic import experiments as E

_, s1 = E.stage1_model()
_, s2 = E.stage2_model(16.0)
dyn = E.pruning_dynamics(s1, s2)

print(f"{'window':>10} {'bpp':>8} {'distortion':>11}")
for i, (b, d) in enumerate(zip(dyn["bpp"], dyn["distortion"])):
    label = "pre" if i == 0 else f"+{i * 100}"
    print(f"{label:>10} {b:8.4f} {d:11.4f}")
print(f"bpp drop after 1000 steps: {1 - dyn['bpp'][-1] / dyn['bpp'][0]:.0%}")
