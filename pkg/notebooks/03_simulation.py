"""
Monte Carlo study
=================

Run a small version of the simulation design: relative bias of the
MSE-matrix estimators, coverage and length of the intervals, and PRIAL
against the area sample means.  The acceptance presets use 20,000 truth
replications; the smoke preset here finishes in a few seconds.
"""

# %%
import numpy as np

from mner.simulation import preset, run_study

cfg = preset("smoke-k2-rho025-normal", replications_a=1000, replications_b=500)
metrics = run_study(cfg, workers=1)

# %%
rb = 100 * np.diagonal(metrics.group_mean(metrics.rb), axis1=1, axis2=2)
rbn = 100 * np.diagonal(metrics.group_mean(metrics.rb_naive), axis1=1, axis2=2)
for g in range(4):
    print(f"G{g + 1}: RB {np.round(rb[g], 1)}  naive {np.round(rbn[g], 1)}")

# %%
for row in metrics.rows("smoke"):
    print(f"G{row['group']}: PRIAL {row['prial_direct']:.1f}  CP(e1) {row['cp_e1']:.3f} "
          f"naive {row['cp_naive_e1']:.3f}  AL(e1) {row['al_e1']:.3f}")
