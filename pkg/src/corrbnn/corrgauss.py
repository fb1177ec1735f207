"""Layer-wise multivariate normal variational distributions with tridiagonal
covariance.

The covariance of a parameter chain of length n is tridiagonal with variances
tau^2 * m_i^2 and first off-diagonals rho * tau^2 * |m_i| * |m_{i+1}|, realized
through a lower-bidiagonal factor L with Sigma = L L^T.  The factor keeps the
signed convention (diagonal entries of L may be negative), so it is a Cholesky
factor only up to signs.

Everything here operates on flat float64 vectors; how a weight tensor is
flattened into a chain is decided by the layer code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# Stabilization constants: gamma at +-0.04000533 gives |rho| ~ 0.01, delta at
# -4.600166 gives tau ~ 0.01.
GAMMA_FLOOR = 0.04000533
GAMMA_CAP = 10.0
DELTA_FLOOR = -4.600166
M_FLOOR = 1e-6

# Relative guard on the sqrt argument tau^2 m_i^2 - c_{i-1}^2; in exact
# arithmetic it stays >= tau^2 m_i^2 / 2 whenever |rho| < 1/2.
_SQRT_GUARD = 1e-12


class DegenerateFactor(ArithmeticError):
    """A sqrt argument in the factor recursion lost positivity, or a diagonal
    entry of the factor vanished."""


class InvalidRho(ValueError):
    """rho is zero or outside the positive-definiteness bound."""


@dataclass
class VariationalParams:
    """Learnable parameters of one chain: mean vector plus the unconstrained
    scale (delta -> tau via softplus) and correlation (gamma -> rho via a
    shifted sigmoid)."""

    m: np.ndarray
    delta: float
    gamma: float

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.m.copy(), float(self.delta), float(self.gamma))


@dataclass
class FactorL:
    """Lower-bidiagonal factor of the tridiagonal covariance: diagonal a,
    subdiagonal c, built for scale tau and correlation rho."""

    a: np.ndarray
    c: np.ndarray
    tau: float
    rho: float

    @property
    def n(self) -> int:
        return self.a.size


@dataclass
class PriorSpec:
    """Diagonal Gaussian prior: per-component means and one shared standard
    deviation."""

    mu: np.ndarray
    zeta: float

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("prior standard deviation must be positive")


@dataclass
class FactorGrads:
    """Dense derivative tables of the factor entries with respect to the
    variational parameters.

    ``dc_dm`` is (n-1) x n and ``da_dm`` is n x n; entries with column index
    k > i+1 are structurally zero.  ``dc_dtau``/``dc_drho`` are the inner
    recursions before the softplus/sigmoid chain factors ``w_delta`` and
    ``w_gamma`` are applied.
    """

    dc_dm: np.ndarray
    da_dm: np.ndarray
    dc_ddelta: np.ndarray
    da_ddelta: np.ndarray
    dc_dgamma: np.ndarray
    da_dgamma: np.ndarray
    dc_dtau: np.ndarray
    dc_drho: np.ndarray
    w_delta: float
    w_gamma: float


@dataclass
class WeightGrads:
    """Jacobian of a sampled chain w with respect to (m, delta, gamma) for a
    fixed standard-normal draw."""

    dw_dm: np.ndarray
    dw_ddelta: np.ndarray
    dw_dgamma: np.ndarray


def reparam_tau(delta: float) -> float:
    """Softplus map delta -> tau > 0, stable for large |delta|."""
    return float(np.logaddexp(0.0, delta))


def reparam_rho(gamma: float) -> float:
    """Shifted sigmoid map gamma -> rho in (-1/2, 1/2); odd in gamma."""
    if gamma >= 0:
        return float(0.5 - np.exp(-gamma) / (1.0 + np.exp(-gamma)))
    return float(np.exp(gamma) / (1.0 + np.exp(gamma)) - 0.5)


def rho_bound(n: int) -> float:
    """Largest |rho| guaranteeing positive definiteness for chain length n."""
    if n <= 1:
        return np.inf
    return 1.0 / (2.0 * np.cos(np.pi / (n + 1)))


def chain_weights(delta: float, gamma: float) -> tuple[float, float]:
    """Chain factors of the reparameterizations: w_delta = dtau/ddelta,
    w_gamma = drho/dgamma."""
    # sigmoid(delta) and sigmoid'(gamma), computed stably
    if delta >= 0:
        w_delta = 1.0 / (1.0 + np.exp(-delta))
    else:
        e = np.exp(delta)
        w_delta = e / (1.0 + e)
    e = np.exp(-abs(gamma))
    w_gamma = e / (1.0 + e) ** 2
    return float(w_delta), float(w_gamma)


@njit(cache=True)
def _factor_recursion(m, tau, rho):
    n = m.size
    a = np.empty(n)
    c = np.empty(n - 1)
    t2 = tau * tau
    c_prev = 0.0
    for i in range(n - 1):
        u = t2 * m[i] * m[i] - c_prev * c_prev
        if u <= _SQRT_GUARD * t2 * m[i] * m[i]:
            return a, c, i
        ci = rho * t2 * m[i] * m[i + 1] / np.sqrt(u)
        c[i] = ci
        a[i] = rho * t2 * abs(m[i]) * abs(m[i + 1]) / ci
        c_prev = ci
    u = t2 * m[n - 1] * m[n - 1] - c_prev * c_prev
    if u <= _SQRT_GUARD * t2 * m[n - 1] * m[n - 1]:
        return a, c, n - 1
    a[n - 1] = np.sqrt(u)
    return a, c, -1


def build_factor(m: np.ndarray, tau: float, rho: float) -> FactorL:
    """Run the recursion producing the lower-bidiagonal factor of the
    tridiagonal covariance.

    Keeps the signed convention: c_i carries the sign of m_i * m_{i+1} and
    a_i (i < n) the sign of sign(m_i m_{i+1}), so L L^T still has the
    absolute-value off-diagonals rho tau^2 |m_i||m_{i+1}|.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.size
    if n == 0:
        raise ValueError("empty chain")
    if np.any(m == 0.0):
        raise ValueError("all chain means must be nonzero")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if rho == 0.0:
        raise InvalidRho("rho must be nonzero (use the stabilized gamma floor)")
    if abs(rho) >= rho_bound(n):
        raise InvalidRho(
            f"|rho|={abs(rho):g} exceeds the positive-definiteness bound "
            f"{rho_bound(n):g} for n={n}"
        )
    if n == 1:
        return FactorL(tau * np.abs(m), np.empty(0), float(tau), float(rho))
    a, c, bad = _factor_recursion(m, float(tau), float(rho))
    if bad >= 0:
        raise DegenerateFactor(f"sqrt argument lost positivity at index {bad}")
    return FactorL(a, c, float(tau), float(rho))


def sample(m: np.ndarray, factor: FactorL, noise: np.ndarray) -> np.ndarray:
    """Affine draw w = m + L x for a standard-normal vector x."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size != factor.n:
        raise ValueError("noise length must match the chain length")
    w = m + factor.a * noise
    if factor.n > 1:
        w[1:] += factor.c * noise[:-1]
    return w


def log_det_sigma(factor: FactorL) -> float:
    """log det(L L^T) = sum_i log a_i^2."""
    if np.any(factor.a == 0.0):
        raise DegenerateFactor("zero diagonal entry in factor")
    return float(np.sum(np.log(factor.a * factor.a)))


def kl_to_prior(m: np.ndarray, tau: float, factor: FactorL, prior: PriorSpec) -> float:
    """KL divergence from the chain's distribution to its diagonal Gaussian
    prior, including the additive constant (so the value itself, not just its
    gradient, can be checked by Monte Carlo)."""
    n = m.size
    z2 = prior.zeta * prior.zeta
    return 0.5 * (
        n * np.log(z2)
        - log_det_sigma(factor)
        + (tau * tau / z2) * float(m @ m)
        + float((m - prior.mu) @ (m - prior.mu)) / z2
        - n
    )


def factor_grads(
    m: np.ndarray, delta: float, gamma: float, factor: FactorL
) -> FactorGrads:
    """Dense derivative tables of every c_i and a_i with respect to m, delta,
    and gamma, following the recursive case splits.

    Quadratic in the chain length; meant for small chains and as the reference
    the O(n) reverse sweep is checked against.
    """
    n = m.size
    tau, rho = factor.tau, factor.rho
    a, c = factor.a, factor.c
    t2 = tau * tau
    w_delta, w_gamma = chain_weights(delta, gamma)

    dc_dm = np.zeros((max(n - 1, 0), n))
    da_dm = np.zeros((n, n))
    dc_dtau = np.zeros(max(n - 1, 0))
    dc_drho = np.zeros(max(n - 1, 0))
    da_dtau = np.zeros(n)
    da_drho = np.zeros(n)

    for i in range(n - 1):
        c_prev = c[i - 1] if i > 0 else 0.0
        u = t2 * m[i] * m[i] - c_prev * c_prev
        su = np.sqrt(u)
        if u <= 0:
            raise DegenerateFactor("nonpositive sqrt argument in gradient pass")
        # d c_i / d m_k
        if i > 0:
            dc_dm[i, :i] = (
                rho * t2 * m[i] * m[i + 1] * u ** -1.5 * c_prev * dc_dm[i - 1, :i]
            )
        v = rho * t2 * m[i + 1]
        dprev_i = dc_dm[i - 1, i] if i > 0 else 0.0
        dc_dm[i, i] = v * (
            1.0 / su - m[i] * u ** -1.5 * (t2 * m[i] - c_prev * dprev_i)
        )
        dc_dm[i, i + 1] = rho * t2 * m[i] / su
        # inner tau / rho recursions
        t_prev = dc_dtau[i - 1] if i > 0 else 0.0
        r_prev = dc_drho[i - 1] if i > 0 else 0.0
        dc_dtau[i] = rho * tau * m[i] * m[i + 1] * (
            2.0 / su - tau * u ** -1.5 * (tau * m[i] * m[i] - c_prev * t_prev)
        )
        dc_drho[i] = t2 * m[i] * m[i + 1] * (1.0 / su + rho * u ** -1.5 * c_prev * r_prev)
        # d a_i / d .
        absm = abs(m[i]) * abs(m[i + 1])
        ci2 = c[i] * c[i]
        if i > 0:
            da_dm[i, :i] = -rho * t2 * absm / ci2 * dc_dm[i, :i]
        da_dm[i, i] = (
            rho * t2 * abs(m[i + 1]) * (np.sign(m[i]) * c[i] - abs(m[i]) * dc_dm[i, i]) / ci2
        )
        da_dm[i, i + 1] = (
            rho * t2 * abs(m[i]) * (np.sign(m[i + 1]) * c[i] - abs(m[i + 1]) * dc_dm[i, i + 1]) / ci2
        )
        da_dtau[i] = rho * tau * absm * (2.0 * c[i] - tau * dc_dtau[i]) / ci2
        da_drho[i] = t2 * absm * (c[i] - rho * dc_drho[i]) / ci2

    # last diagonal entry a_n = sqrt(y)
    last = n - 1
    c_prev = c[last - 1] if last > 0 else 0.0
    y = t2 * m[last] * m[last] - c_prev * c_prev
    sy = np.sqrt(y)
    if last > 0:
        da_dm[last, :last] = -c_prev / sy * dc_dm[last - 1, :last]
        da_dm[last, last] = (t2 * m[last] - c_prev * dc_dm[last - 1, last]) / sy
        da_dtau[last] = (tau * m[last] * m[last] - c_prev * dc_dtau[last - 1]) / sy
        da_drho[last] = -c_prev * dc_drho[last - 1] / sy
    else:
        da_dm[0, 0] = tau * np.sign(m[0])
        da_dtau[0] = abs(m[0])

    return FactorGrads(
        dc_dm=dc_dm,
        da_dm=da_dm,
        dc_ddelta=w_delta * dc_dtau,
        da_ddelta=w_delta * da_dtau,
        dc_dgamma=w_gamma * dc_drho,
        da_dgamma=w_gamma * da_drho,
        dc_dtau=dc_dtau,
        dc_drho=dc_drho,
        w_delta=w_delta,
        w_gamma=w_gamma,
    )


def weight_grads(noise: np.ndarray, grads: FactorGrads) -> WeightGrads:
    """Jacobian of the sampled chain: dw_i/dm_k = [k=i] + dc_{i-1}/dm_k x_{i-1}
    + da_i/dm_k x_i, analogously for delta and gamma."""
    n = grads.da_dm.shape[0]
    dw_dm = np.eye(n) + grads.da_dm * noise[:, None]
    dw_ddelta = grads.da_ddelta * noise
    dw_dgamma = grads.da_dgamma * noise
    if n > 1:
        dw_dm[1:, :] += grads.dc_dm * noise[:-1, None]
        dw_ddelta[1:] += grads.dc_ddelta * noise[:-1]
        dw_dgamma[1:] += grads.dc_dgamma * noise[:-1]
    return WeightGrads(dw_dm, dw_ddelta, dw_dgamma)


def chain_rule_backward(
    dL_dw: np.ndarray, wgrads: WeightGrads
) -> tuple[np.ndarray, float, float]:
    """Pull a loss gradient on the sampled chain back to (m, delta, gamma)."""
    dL_dm = wgrads.dw_dm.T @ dL_dw
    return dL_dm, float(wgrads.dw_ddelta @ dL_dw), float(wgrads.dw_dgamma @ dL_dw)


def kl_grads(
    m: np.ndarray,
    delta: float,
    gamma: float,
    factor: FactorL,
    grads: FactorGrads,
    prior: PriorSpec,
) -> tuple[np.ndarray, float, float]:
    """Gradient of kl_to_prior with respect to (m, delta, gamma)."""
    if np.any(factor.a == 0.0):
        raise DegenerateFactor("zero diagonal entry in factor")
    inv_a = 1.0 / factor.a
    z2 = prior.zeta * prior.zeta
    t2 = factor.tau * factor.tau
    d_m = -grads.da_dm.T @ inv_a + (t2 / z2) * m + (m - prior.mu) / z2
    d_delta = -float(inv_a @ grads.da_ddelta) + grads.w_delta * (
        factor.tau / z2
    ) * float(m @ m)
    d_gamma = -float(inv_a @ grads.da_dgamma)
    return d_m, d_delta, d_gamma


def stabilize_params(
    params: VariationalParams, rng: np.random.Generator
) -> VariationalParams:
    """Push parameters away from the degenerate region before a forward pass.

    gamma too close to zero is kicked to +-GAMMA_FLOOR with equal probability
    and clamped to [-GAMMA_CAP, GAMMA_CAP]; delta is floored; mean components
    too close to zero are kicked to +-M_FLOOR with equal probability.
    """
    out = params.copy()
    if -GAMMA_FLOOR < out.gamma < GAMMA_FLOOR:
        out.gamma = GAMMA_FLOOR if rng.random() < 0.5 else -GAMMA_FLOOR
    out.gamma = min(max(out.gamma, -GAMMA_CAP), GAMMA_CAP)
    if out.delta < DELTA_FLOOR:
        out.delta = DELTA_FLOOR
    tiny = np.abs(out.m) < M_FLOOR
    if np.any(tiny):
        signs = np.where(rng.random(int(tiny.sum())) < 0.5, M_FLOOR, -M_FLOOR)
        out.m[tiny] = signs
    return out


@njit(cache=True)
def _reverse_sweep(m, tau, rho, a, c, x, g, kl_scale, mu, inv_z2, out_dm):
    """Reverse-mode pass through the factor recursion and the affine sample.

    Accumulates d(loss)/dm into out_dm (seeded with the identity part g) and
    returns the adjoints of tau and rho.  With kl_scale > 0 the gradient of
    kl_scale * KL(q || prior) is folded into the same sweep.  O(n).
    """
    n = m.size
    t2 = tau * tau
    tau_bar = 0.0
    rho_bar = 0.0
    for i in range(n):
        out_dm[i] = g[i]
    if kl_scale != 0.0:
        nrm2 = 0.0
        for i in range(n):
            out_dm[i] += kl_scale * inv_z2 * (t2 * m[i] + (m[i] - mu[i]))
            nrm2 += m[i] * m[i]
        tau_bar += kl_scale * tau * inv_z2 * nrm2

    # last stage: a_{n-1} = sqrt(u)
    abar = g[n - 1] * x[n - 1]
    if kl_scale != 0.0:
        abar += -kl_scale / a[n - 1]
    ubar = abar / (2.0 * a[n - 1])
    out_dm[n - 1] += ubar * 2.0 * t2 * m[n - 1]
    tau_bar += ubar * 2.0 * tau * m[n - 1] * m[n - 1]
    cbar = 0.0
    if n > 1:
        cbar = g[n - 1] * x[n - 2] + ubar * (-2.0 * c[n - 2])

    for i in range(n - 2, -1, -1):
        abar = g[i] * x[i]
        if kl_scale != 0.0:
            abar += -kl_scale / a[i]
        ci = c[i]
        si = 1.0 if m[i] >= 0 else -1.0
        sj = 1.0 if m[i + 1] >= 0 else -1.0
        absm = abs(m[i]) * abs(m[i + 1])
        # a_i = rho t2 |m_i||m_{i+1}| / c_i
        out_dm[i] += abar * rho * t2 * si * abs(m[i + 1]) / ci
        out_dm[i + 1] += abar * rho * t2 * abs(m[i]) * sj / ci
        tau_bar += abar * 2.0 * rho * tau * absm / ci
        rho_bar += abar * t2 * absm / ci
        cbar += abar * (-rho * t2 * absm / (ci * ci))
        # c_i = rho t2 m_i m_{i+1} / sqrt(u)
        cim1 = c[i - 1] if i > 0 else 0.0
        u = t2 * m[i] * m[i] - cim1 * cim1
        s = np.sqrt(u)
        out_dm[i] += cbar * rho * t2 * m[i + 1] / s
        out_dm[i + 1] += cbar * rho * t2 * m[i] / s
        tau_bar += cbar * 2.0 * rho * tau * m[i] * m[i + 1] / s
        rho_bar += cbar * t2 * m[i] * m[i + 1] / s
        ubar = -cbar * ci / (2.0 * u)
        out_dm[i] += ubar * 2.0 * t2 * m[i]
        tau_bar += ubar * 2.0 * tau * m[i] * m[i]
        if i > 0:
            cbar = ubar * (-2.0 * c[i - 1]) + g[i] * x[i - 1]
    return tau_bar, rho_bar


def backward_sweep(
    m: np.ndarray,
    delta: float,
    gamma: float,
    factor: FactorL,
    noise: np.ndarray,
    dL_dw: np.ndarray,
    prior: PriorSpec | None = None,
    kl_scale: float = 0.0,
) -> tuple[np.ndarray, float, float]:
    """Gradient of L(w(m, delta, gamma)) + kl_scale * KL with respect to
    (m, delta, gamma) in O(n), for the fixed noise draw that produced w.

    Equivalent to factor_grads -> weight_grads -> chain_rule_backward (+
    kl_grads) but without materializing the quadratic tables; this is the
    route the layers use.
    """
    if kl_scale != 0.0 and prior is None:
        raise ValueError("prior required when kl_scale is nonzero")
    mu = prior.mu if prior is not None else np.zeros(1)
    inv_z2 = 1.0 / (prior.zeta * prior.zeta) if prior is not None else 0.0
    dm = np.empty_like(m)
    tau_bar, rho_bar = _reverse_sweep(
        np.ascontiguousarray(m, dtype=np.float64),
        factor.tau,
        factor.rho,
        factor.a,
        factor.c,
        np.ascontiguousarray(noise, dtype=np.float64),
        np.ascontiguousarray(dL_dw, dtype=np.float64),
        float(kl_scale),
        np.ascontiguousarray(mu, dtype=np.float64),
        inv_z2,
        dm,
    )
    w_delta, w_gamma = chain_weights(delta, gamma)
    return dm, w_delta * tau_bar, w_gamma * rho_bar
