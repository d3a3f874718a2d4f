"""
EBLUP, MSE-matrix estimate and corrected intervals
==================================================

Fit the model, predict every area mean, attach the second-order MSE-matrix
estimate g1 + g2 + 2 g3, and build corrected and naive intervals for a
linear combination of the responses.
"""

# %%
import numpy as np

from mner import Dataset, corrected_interval, fit, msem_estimate
from mner.simulation import SimConfig, build_design, draw_effects

cfg = SimConfig(m=40, rho=0.25)
design = build_design(cfg)
rng = np.random.default_rng(1)
v = draw_effects(cfg, rng)
y = design.regressors @ cfg.beta_vector + v[design.area_index] + rng.standard_normal((design.N, 2))
data = Dataset(design, y)

fr = fit(data)
print("beta_hat", np.round(fr.beta, 3), "true", cfg.beta_vector)

# %%
preds = msem_estimate(data, fr)
for p, n in list(zip(preds, design.sizes))[::10]:
    print(f"area {p.area_id:>2} n={n:2d} theta={np.round(p.theta_hat, 3)} "
          f"sqrt diag msem={np.round(np.sqrt(np.diag(p.msem.array)), 3)}")

# %%
# Small areas borrow more from the regression: g1 falls with n, g3 is O(1/m).
for p, n in list(zip(preds, design.sizes))[::10]:
    print(f"n={n:2d} tr g1={np.trace(p.g1.array):.3f} tr g2={np.trace(p.g2.array):.4f} "
          f"tr g3={np.trace(p.g3.array):.4f}")

# %%
ell = np.array([1.0, -1.0])
comp = fr.components
for p, n in list(zip(preds, design.sizes))[::10]:
    ci, naive = corrected_interval(p, ell, 0.05, (comp.psi_hat, comp.sigma_hat, design.sizes, int(n)))
    print(f"n={n:2d} corrected [{ci.lower:.3f}, {ci.upper:.3f}] z*={ci.z_star:.4f}  "
          f"naive [{naive.lower:.3f}, {naive.upper:.3f}]")
