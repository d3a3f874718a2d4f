"""
Reference implementations
=========================

The structured estimators are checked against brute-force references: a
dense GLS solve on the full covariance, an independent scalar pipeline for
one response, and a Monte Carlo estimate of the bias of Psi0_hat.
"""

# %%
import numpy as np

from mner import dense_gls_oracle, fit, gls_fit, msem_estimate, univariate_eblup_oracle
from mner.validation import check_bias_mc, random_dataset, random_psd

rng = np.random.default_rng(3)
data = random_dataset(rng, 6, 3, 4)
psi, sigma = random_psd(rng, 3), random_psd(rng, 3)
beta_dense, _ = dense_gls_oracle(data, psi, sigma)
print("max |structured - dense|:", np.abs(gls_fit(data, psi, sigma).beta - beta_dense).max())

# %%
one = random_dataset(rng, 12, 1, 2, psi=np.eye(1), sigma=np.eye(1))
o = univariate_eblup_oracle(one)
preds = msem_estimate(one, fit(one))
print("max |msem - scalar msem|:", max(abs(p.msem.array[0, 0] - x) for p, x in zip(preds, o.msem)))

# %%
res = check_bias_mc(replications=20_000)
print(res.line())
print("exact bias\n", res.detail["bias"], "\nMonte Carlo\n", res.detail["mc_bias"])
