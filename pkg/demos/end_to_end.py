"""Five execution modes over one decode, then the default sweep's ratio table.

Run: python demos/end_to_end.py   (the sweep takes a few seconds)
"""

from collections import Counter

from pimspec.cli import ratio_table, run_sweep
from pimspec.config import default_config
from pimspec.simloop import MODES, RunConfig, run_decode

exp = default_config()
model = exp.model

# %% one point, every mode
print(f"{model.name}, 128 in / 256 out, fixed trees of 8 nodes")
for mode in MODES:
    cfg = RunConfig(mode, 128, 256, None if mode.endswith("sched") else 8, seed=1)
    rep = run_decode(cfg, model, exp.system, exp.scheduler, exp.oracle)
    sizes = Counter(r.l_spec for r in rep.records)
    print(f"  {mode:22} {rep.tokens_per_s:7.1f} tok/s {rep.tokens_per_j:6.1f} tok/J "
          f"{len(rep.records):4} iterations  L_spec used {dict(sorted(sizes.items()))}")
# the scheduler settles on the largest tree one pass of four ALUs can verify

# %% full default sweep
rows = ratio_table(run_sweep(exp))
print("\ngeomean speedup over NPU-SI / PIM-SI")
for row in rows:
    if row["model"] == "geomean":
        print(f"  {row['mode']:22} {row['speedup_vs_npu_si']:6.2f}x {row['speedup_vs_pim_si']:6.2f}x")
