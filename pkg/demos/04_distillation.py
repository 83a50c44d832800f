#!/usr/bin/env python3
"""Teacher-guided training of the shallow encoder, three seeds per variant.

ME is the moderate encoder trained alone; the SE rows are the shallow encoder
from scratch, with encoder-side distillation, and with both sides. Lower
rd_loss is better. Trains on first use (a few hours on one core).
"""
import numpy as np

from aeic import experiments as E

study = E.distillation_study(seeds=(0, 1, 2))
for kind in E.VARIANTS:
    vals = study[kind]
    print(f"{kind:>14}: mean {np.mean(vals):.5f}  per seed {', '.join(f'{v:.5f}' for v in vals)}")
