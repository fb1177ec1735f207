"""A walk through the tridiagonal variational family.

Each parameter chain (a flattened weight tensor, or a bias vector) gets a
multivariate normal with variances tau^2 m_i^2 and neighbour covariances
rho tau^2 |m_i| |m_{i+1}|.  Only n + 2 numbers are learned per chain: the
means m, one scale tau, one correlation rho.  This script builds the
lower-bidiagonal factor, draws samples, and cross-checks the closed-form KL
divergence against Monte Carlo.
"""

import numpy as np

from corrbnn import corrgauss, verify
from corrbnn.corrgauss import PriorSpec

np.set_printoptions(precision=4, suppress=True)

m = np.array([0.8, -1.5, 0.4, 1.1, -0.6])
tau, rho = 0.5, 0.3
print(f"chain means m = {m},  tau = {tau},  rho = {rho}")
print(f"positive-definiteness bound on |rho| for n=5: "
      f"{corrgauss.rho_bound(5):.4f}\n")

# the factor: Sigma = L L^T with L lower-bidiagonal
factor = corrgauss.build_factor(m, tau, rho)
print("factor diagonal a =", factor.a)
print("factor subdiagonal c =", factor.c)

lower = np.zeros((5, 5))
lower[np.diag_indices(5)] = factor.a
lower[np.arange(1, 5), np.arange(4)] = factor.c
sigma = lower @ lower.T
print("\nSigma = L L^T:")
print(sigma)
print("\ntarget covariance assembled directly:")
print(verify.dense_sigma(m, tau, rho))
print("\nmax abs difference:",
      np.abs(sigma - verify.dense_sigma(m, tau, rho)).max())

# sampling is a single affine map: w = m + L x, O(n) per draw
rng = np.random.default_rng(0)
draws = np.array([
    corrgauss.sample(m, factor, rng.standard_normal(5)) for _ in range(200_000)
])
print("\nempirical mean of 200k draws:", draws.mean(axis=0))
print("empirical lag-1 covariance:  ",
      np.mean((draws[:, :-1] - m[:-1]) * (draws[:, 1:] - m[1:]), axis=0))
print("target lag-1 covariance:     ",
      rho * tau**2 * np.abs(m[:-1]) * np.abs(m[1:]))

# the KL divergence to a diagonal Gaussian prior is available in closed form
prior = PriorSpec(np.zeros(5), 1.0)
analytic = corrgauss.kl_to_prior(m, tau, factor, prior)
mc, se = verify.mc_kl(m, tau, factor, prior, 500_000,
                      np.random.default_rng(1))
print(f"\nKL(q || prior): closed form {analytic:.5f}, "
      f"Monte Carlo {mc:.5f} +- {se:.5f}")
