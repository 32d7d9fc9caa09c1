"""Where a GEMV-only PIM wins and where it stops winning.

Run: python demos/pim_vs_npu.py
"""

import numpy as np

from pimspec.hwmodel import SystemConfig, pim_gain
from pimspec.workload import build_model_spec, decode_table

model = build_model_spec("llama2-7b")
sys = SystemConfig()

# %% one decode pass reads every weight once
tab = decode_table(model, 512, 1)
print(f"weights streamed per pass: {tab.total('weight_bytes') / 1e9:.2f} GB")
print(f"NPU at 51.2 GB/s needs   : {tab.total('weight_bytes') / sys.dram.offchip_bw * 1e3:.1f} ms")

# %% latency and energy gain of 4 and 8 PIM dies as the verified token count grows
l_values = np.arange(1, 33)
for dies in (4, 8):
    gains = np.array([pim_gain(model, sys, dies, int(l)) for l in l_values])
    cross = l_values[gains[:, 0] < 0.95]
    print(f"\nPIM-{dies}")
    print("  L    latency  energy")
    for l in (1, 2, 4, 8, 16, 32):
        lat, en = gains[l - 1]
        print(f"  {l:<4} {lat:6.2f}x  {en:6.2f}x")
    print(f"  clearly slower than the NPU from L={cross[0]}" if cross.size else "  never slower than the NPU")

# one ALU per MPU retires one token per weight pass, so every extra token
# costs another full pass over the weights; the NPU does not care
