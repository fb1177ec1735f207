"""Independent oracles used to check the variational kernel.

None of these share code with corrgauss: the covariance is assembled directly
from the variance/covariance formulas, the Cholesky factor and determinant
come from dense linear algebra, gradients from central finite differences, and
the KL divergence from Monte Carlo integration with exact log-densities.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from . import corrgauss
from .corrgauss import FactorL, PriorSpec


def finite_diff(f, point: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.empty_like(point)
    for k in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi[k] += step
        lo[k] -= step
        grad[k] = (f(hi) - f(lo)) / (2.0 * step)
    return grad


def dense_sigma(m: np.ndarray, tau: float, rho: float) -> np.ndarray:
    """Tridiagonal covariance assembled directly from the stated formulas:
    diagonal tau^2 m_i^2, first off-diagonals rho tau^2 |m_i||m_{i+1}|."""
    m = np.asarray(m, dtype=np.float64)
    sigma = np.diag(tau * tau * m * m)
    off = rho * tau * tau * np.abs(m[:-1]) * np.abs(m[1:])
    n = m.size
    idx = np.arange(n - 1)
    sigma[idx, idx + 1] = off
    sigma[idx + 1, idx] = off
    return sigma


class NotPositiveDefinite(ArithmeticError):
    pass


def reference_cholesky(sigma: np.ndarray) -> np.ndarray:
    """Standard Cholesky factor (positive diagonal) of a dense SPD matrix."""
    try:
        return linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def log_det_lu(sigma: np.ndarray) -> float:
    """log-determinant via LU decomposition (np.linalg.slogdet)."""
    sign, val = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise NotPositiveDefinite("nonpositive determinant")
    return float(val)


def mc_kl(
    m: np.ndarray,
    tau: float,
    factor: FactorL,
    prior: PriorSpec,
    sample_count: int,
    rng: np.random.Generator,
    batch: int = 200_000,
) -> tuple[float, float]:
    """Monte-Carlo estimate of E_q[ln q - ln p] with its standard error.

    Draws w = m + L x, evaluates ln q through the dense covariance (constant
    plus quadratic form via a dense solve) and ln p as a product of
    independent normals.
    """
    if sample_count < 10_000:
        raise ValueError("sample_count too small for a meaningful estimate")
    m = np.asarray(m, dtype=np.float64)
    n = m.size
    sigma = dense_sigma(m, tau, factor.rho)
    chol = reference_cholesky(sigma)
    log_det_q = 2.0 * np.sum(np.log(np.diag(chol)))
    const_q = -0.5 * (n * np.log(2.0 * np.pi) + log_det_q)
    const_p = -0.5 * n * np.log(2.0 * np.pi) - n * np.log(prior.zeta)
    inv_z2 = 1.0 / (prior.zeta * prior.zeta)

    total = 0.0
    total_sq = 0.0
    done = 0
    lower = np.zeros((n, n))
    lower[np.diag_indices(n)] = factor.a
    if n > 1:
        lower[np.arange(1, n), np.arange(n - 1)] = factor.c
    while done < sample_count:
        k = min(batch, sample_count - done)
        x = rng.standard_normal((k, n))
        w = m + x @ lower.T
        d = w - m
        z = linalg.solve_triangular(chol, d.T, lower=True)
        log_q = const_q - 0.5 * np.sum(z * z, axis=0)
        log_p = const_p - 0.5 * inv_z2 * np.sum((w - prior.mu) ** 2, axis=1)
        vals = log_q - log_p
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += k
    mean = total / sample_count
    var = total_sq / sample_count - mean * mean
    return float(mean), float(np.sqrt(max(var, 0.0) / sample_count))


# ---------------------------------------------------------------------------
# randomized check suites (run by the CLI and the acceptance tests)


def random_instance(rng: np.random.Generator, n: int):
    """A random valid (m, delta, gamma) triple away from the clamp region."""
    m = rng.uniform(0.2, 2.0, size=n) * rng.choice([-1.0, 1.0], size=n)
    delta = rng.uniform(-2.0, 1.0)
    gamma = rng.uniform(0.1, 3.0) * rng.choice([-1.0, 1.0])
    return m, float(delta), float(gamma)


def _factor_for(m, delta, gamma):
    tau = corrgauss.reparam_tau(delta)
    rho = corrgauss.reparam_rho(gamma)
    return corrgauss.build_factor(m, tau, rho), tau, rho


def rel_err(analytic, reference, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.abs(reference), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


def check_gradients_once(rng: np.random.Generator, n: int, step=1e-6,
                         tol=1e-4) -> tuple[bool, float]:
    """Check every analytic derivative of one random instance against central
    finite differences; returns (passed, worst relative error)."""
    m, delta, gamma = random_instance(rng, n)
    factor, tau, rho = _factor_for(m, delta, gamma)
    grads = corrgauss.factor_grads(m, delta, gamma, factor)
    noise = rng.standard_normal(n)
    prior = PriorSpec(rng.standard_normal(n) * 0.3, float(rng.uniform(0.5, 2.0)))

    def pack(p):
        return p[:n], float(p[n]), float(p[n + 1])

    point = np.concatenate([m, [delta, gamma]])
    worst = 0.0

    def err(analytic, fd):
        # mixed criterion: components below 1e-4 of the gradient scale are
        # compared absolutely, which keeps central-difference roundoff
        # (~1e-9 at unit function scale) from polluting the relative error
        scale = max(float(np.max(np.abs(fd))), 1.0)
        return rel_err(analytic, fd, floor=1e-4 * scale)

    # sampled chain w(p) against weight_grads
    wg = corrgauss.weight_grads(noise, grads)
    for i in range(n):
        def w_i(p, i=i):
            mm, dd, gg = pack(p)
            f, _, _ = _factor_for(mm, dd, gg)
            return corrgauss.sample(mm, f, noise)[i]

        fd = finite_diff(w_i, point, step)
        analytic = np.concatenate([wg.dw_dm[i], [wg.dw_ddelta[i]],
                                   [wg.dw_dgamma[i]]])
        worst = max(worst, err(analytic, fd))

    # chain-rule pullback of a random loss direction
    direction = rng.standard_normal(n)

    def projected(p):
        mm, dd, gg = pack(p)
        f, _, _ = _factor_for(mm, dd, gg)
        return float(direction @ corrgauss.sample(mm, f, noise))

    fd = finite_diff(projected, point, step)
    dm, ddelta, dgamma = corrgauss.chain_rule_backward(direction, wg)
    worst = max(worst, err(np.concatenate([dm, [ddelta, dgamma]]), fd))

    # KL gradient
    def kl_of(p):
        mm, dd, gg = pack(p)
        f, t, _ = _factor_for(mm, dd, gg)
        return corrgauss.kl_to_prior(mm, t, f, prior)

    fd = finite_diff(kl_of, point, step)
    dm, ddelta, dgamma = corrgauss.kl_grads(m, delta, gamma, factor, grads, prior)
    worst = max(worst, err(np.concatenate([dm, [ddelta, dgamma]]), fd))

    # fused reverse sweep of loss + KL
    nu = 0.1

    def objective(p):
        mm, dd, gg = pack(p)
        f, t, _ = _factor_for(mm, dd, gg)
        w = corrgauss.sample(mm, f, noise)
        return float(direction @ w) + nu * corrgauss.kl_to_prior(mm, t, f, prior)

    fd = finite_diff(objective, point, step)
    dm, ddelta, dgamma = corrgauss.backward_sweep(
        m, delta, gamma, factor, noise, direction, prior, nu
    )
    worst = max(worst, err(np.concatenate([dm, [ddelta, dgamma]]), fd))
    return worst <= tol, worst


def suite_gradients(seed=0, cases=100, sizes=(1, 2, 3, 8, 32), tol=1e-4):
    rng = np.random.Generator(np.random.Philox(key=seed))
    rows = []
    for case in range(cases):
        n = sizes[case % len(sizes)]
        ok, worst = check_gradients_once(rng, n, tol=tol)
        rows.append((f"gradients/case{case:03d}_n{n}", ok, f"max_rel_err={worst:.3e}"))
    return rows


def suite_kl(seed=0, configs=10, sizes=(2, 4, 8), samples=1_000_000):
    rng = np.random.Generator(np.random.Philox(key=seed + 1))
    rows = []
    for case in range(configs):
        n = sizes[case % len(sizes)]
        m, delta, gamma = random_instance(rng, n)
        factor, tau, _ = _factor_for(m, delta, gamma)
        prior = PriorSpec(rng.standard_normal(n) * 0.3,
                          float(rng.uniform(0.5, 2.0)))
        analytic = corrgauss.kl_to_prior(m, tau, factor, prior)
        est, se = mc_kl(m, tau, factor, prior, samples, rng)
        ok = abs(analytic - est) <= 3.0 * se and analytic >= 0.0
        rows.append((f"kl/case{case:03d}_n{n}", ok,
                     f"analytic={analytic:.6f} mc={est:.6f} se={se:.2e}"))
    return rows


def suite_cholesky(seed=0, cases=50, sizes=(1, 2, 3, 8, 32), tol=1e-9):
    rng = np.random.Generator(np.random.Philox(key=seed + 2))
    rows = []
    for case in range(cases):
        n = sizes[case % len(sizes)]
        m, delta, gamma = random_instance(rng, n)
        factor, tau, rho = _factor_for(m, delta, gamma)
        sigma = dense_sigma(m, tau, rho)
        ref = reference_cholesky(sigma)
        err = max(
            rel_err(np.abs(factor.a), np.abs(np.diag(ref))),
            rel_err(np.abs(factor.c), np.abs(np.diag(ref, -1))) if n > 1 else 0.0,
        )
        rows.append((f"cholesky/case{case:03d}_n{n}", err <= tol,
                     f"max_rel_err={err:.3e}"))
    return rows


def suite_sampling(seed=0, n=8, samples=1_000_000):
    rng = np.random.Generator(np.random.Philox(key=seed + 3))
    m, delta, gamma = random_instance(rng, n)
    factor, tau, rho = _factor_for(m, delta, gamma)
    x = rng.standard_normal((samples, n))
    w = m + x * factor.a
    w[:, 1:] += x[:, :-1] * factor.c
    rows = []
    mean = w.mean(axis=0)
    mean_se = w.std(axis=0, ddof=1) / np.sqrt(samples)
    ok = bool(np.all(np.abs(mean - m) <= 4.0 * mean_se))
    rows.append(("sampling/mean", ok,
                 f"max_dev_in_se={np.max(np.abs(mean - m) / mean_se):.2f}"))
    prods = (w[:, :-1] - m[:-1]) * (w[:, 1:] - m[1:])
    cov = prods.mean(axis=0)
    cov_se = prods.std(axis=0, ddof=1) / np.sqrt(samples)
    target = rho * tau * tau * np.abs(m[:-1]) * np.abs(m[1:])
    ok = bool(np.all(np.abs(cov - target) <= 4.0 * cov_se))
    rows.append(("sampling/lag1_cov", ok,
                 f"max_dev_in_se={np.max(np.abs(cov - target) / cov_se):.2f}"))
    return rows


SUITES = {
    "gradients": suite_gradients,
    "kl": suite_kl,
    "cholesky": suite_cholesky,
    "sampling": suite_sampling,
}
