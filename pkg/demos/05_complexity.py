#!/usr/bin/env python3
"""Where the multiply-accumulates go, and what that means for encode time."""
from aeic import build_model, toy_config
from aeic.analysis import bench_latency, macs_per_pixel

models = {v: build_model(toy_config(v)) for v in ("ME", "SE")}
tables = {v: macs_per_pixel(m, 256, 256) for v, m in models.items()}

print(f"{'component':>14} {'ME':>10} {'SE':>10}   (MACs per pixel at 256x256)")
for key in tables["ME"]:
    print(f"{key:>14} {tables['ME'][key]:10.2f} {tables['SE'][key]:10.2f}")

for v, m in models.items():
    t = bench_latency(m, 256, 256, reps=5)
    print(f"{v}: encode {t['encode_ms']:.1f} ms, decode {t['decode_ms']:.1f} ms (median of 5)")
