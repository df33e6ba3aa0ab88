"""Tractable 1-D Gaussian diffusion chains for sandwiching log-likelihood.

A chain pairs the usual variance-schedule forward process with a
linear-Gaussian reverse model, so the model marginal, the variational
lower bound, and a chi-square upper bound are all computable: the first
two in closed form, the third by Monte Carlo with a delta-method error
bar.  ``matched`` builds the reverse model as the exact posterior of the
forward process under a Gaussian data distribution, which collapses both
bounds onto the true log-likelihood and anchors every tolerance used in
the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - (x - mean) ** 2 / (2.0 * var)


@dataclass
class GaussianChain:
    """1-D diffusion chain with analytic forward and linear reverse model.

    Forward: q(y_t | y_{t-1}) = N(sqrt(1 - beta_t) y_{t-1}, beta_t).
    Reverse: p(y_{t-1} | y_t) = N(rev_a[t-1] y_t + rev_b[t-1], rev_var[t-1])
    with prior p(y_T) = N(prior_mean, prior_var).  ``mu_star`` and
    ``var_star`` record the data distribution a matched chain was built
    from (informational for mismatched chains).
    """

    T: int
    betas: np.ndarray
    rev_a: np.ndarray
    rev_b: np.ndarray
    rev_var: np.ndarray
    prior_mean: float
    prior_var: float
    mu_star: float = 0.0
    var_star: float = 1.0
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.T < 1 or self.T > 5:
            raise ValueError("GaussianChain: T must be in [1, 5]")
        if self.betas.shape != (self.T,):
            raise ValueError("GaussianChain: betas must have length T")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("GaussianChain: betas must lie in (0, 1)")
        for name in ("rev_a", "rev_b", "rev_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise ValueError(f"GaussianChain: {name} must have length T")
            setattr(self, name, arr)
        if not np.all(self.rev_var > 0) or self.prior_var <= 0:
            raise ValueError("GaussianChain: variances must be positive")
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @classmethod
    def matched(cls, T, betas, mu_star=0.0, var_star=1.0):
        """Reverse model set to the exact posterior under y0 ~ N(mu*, var*)."""
        betas = np.asarray(betas, dtype=np.float64)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        m = np.sqrt(abar) * mu_star
        v = abar * var_star + (1.0 - abar)
        alpha = 1.0 - betas
        rev_a = np.empty(T)
        rev_b = np.empty(T)
        rev_var = np.empty(T)
        for t in range(1, T + 1):
            cov = math.sqrt(alpha[t - 1]) * v[t - 1]
            rev_a[t - 1] = cov / v[t]
            rev_b[t - 1] = m[t - 1] - rev_a[t - 1] * m[t]
            rev_var[t - 1] = v[t - 1] - cov ** 2 / v[t]
        return cls(T=T, betas=betas, rev_a=rev_a, rev_b=rev_b, rev_var=rev_var,
                   prior_mean=float(m[T]), prior_var=float(v[T]),
                   mu_star=mu_star, var_star=var_star)


def model_marginal(chain: GaussianChain) -> tuple[float, float]:
    """Mean and variance of the model's y0 marginal, by composing the
    reverse chain's affine-Gaussian kernels from the prior down."""
    m, v = chain.prior_mean, chain.prior_var
    for t in range(chain.T, 0, -1):
        a, b, s2 = chain.rev_a[t - 1], chain.rev_b[t - 1], chain.rev_var[t - 1]
        m = a * m + b
        v = a * a * v + s2
    return float(m), float(v)


def exact_loglik(chain: GaussianChain, y0: float) -> float:
    """Exact log p(y0) under the reverse model."""
    m, v = model_marginal(chain)
    return float(_norm_logpdf(y0, m, v))


def elbo_exact(chain: GaussianChain, y0: float) -> float:
    """Closed-form variational lower bound on log p(y0).

    Reconstruction minus prior KL minus the expected per-step posterior
    KLs, every expectation taken analytically under the forward process.
    """
    abar = chain.alpha_bar
    alpha = 1.0 - chain.betas
    a1, b1, s21 = chain.rev_a[0], chain.rev_b[0], chain.rev_var[0]
    m1 = math.sqrt(abar[1]) * y0
    v1 = 1.0 - abar[1]
    delta = y0 - a1 * m1 - b1
    recon = -0.5 * math.log(2.0 * math.pi * s21) - (delta ** 2 + a1 ** 2 * v1) / (2.0 * s21)

    mt = math.sqrt(abar[chain.T]) * y0
    vt = 1.0 - abar[chain.T]
    prior_kl = 0.5 * (math.log(chain.prior_var / vt)
                      + (vt + (mt - chain.prior_mean) ** 2) / chain.prior_var - 1.0)

    interior = 0.0
    for t in range(2, chain.T + 1):
        bt = chain.betas[t - 1]
        btilde = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * bt
        c = math.sqrt(alpha[t - 1]) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
        d = math.sqrt(abar[t - 1]) * bt / (1.0 - abar[t])
        a, b, s2 = chain.rev_a[t - 1], chain.rev_b[t - 1], chain.rev_var[t - 1]
        m_t = math.sqrt(abar[t]) * y0
        v_t = 1.0 - abar[t]
        sq_mean_gap = ((c - a) * m_t + d * y0 - b) ** 2 + (c - a) ** 2 * v_t
        interior += (0.5 * math.log(s2 / btilde)
                     + (btilde + sq_mean_gap) / (2.0 * s2) - 0.5)
    return float(recon - prior_kl - interior)


@dataclass
class BoundEstimates:
    """Lower bound, exact value, and Monte-Carlo upper bound for one input."""

    elbo: float
    exact: float
    cubo: float
    cubo_stderr: float
    n_samples: int

    def sandwich_holds(self, sigmas: float = 3.0, slack: float = 1e-9) -> bool:
        return (self.elbo <= self.exact + slack
                and self.exact <= self.cubo + sigmas * self.cubo_stderr + slack)


def cubo_estimate(chain: GaussianChain, y0: float, n: int,
                  rng: np.random.Generator) -> tuple[float, float]:
    """Chi-square upper bound 0.5 * log E_q[w^2] with w = p(y0, path) / q(path | y0).

    Paths are drawn from the forward process; the bound and its
    delta-method standard error are computed in log space.
    """
    if n < 2:
        raise ValueError("cubo_estimate: need at least 2 samples")
    alpha = 1.0 - chain.betas
    log_q = np.zeros(n)
    log_p = np.zeros(n)
    prev = np.full(n, float(y0))
    ys = [prev]
    for t in range(1, chain.T + 1):
        mean = math.sqrt(alpha[t - 1]) * prev
        cur = mean + math.sqrt(chain.betas[t - 1]) * rng.standard_normal(n)
        log_q += _norm_logpdf(cur, mean, chain.betas[t - 1])
        ys.append(cur)
        prev = cur
    log_p += _norm_logpdf(ys[chain.T], chain.prior_mean, chain.prior_var)
    for t in range(chain.T, 0, -1):
        a, b, s2 = chain.rev_a[t - 1], chain.rev_b[t - 1], chain.rev_var[t - 1]
        log_p += _norm_logpdf(ys[t - 1], a * ys[t] + b, s2)
    two_lw = 2.0 * (log_p - log_q)
    c = two_lw.max()
    u = np.exp(two_lw - c)
    m = u.mean()
    cubo = 0.5 * (c + math.log(m))
    stderr = u.std(ddof=1) / (2.0 * math.sqrt(n) * m)
    return float(cubo), float(stderr)


def estimate_bounds(chain: GaussianChain, y0: float, n: int,
                    rng: np.random.Generator) -> BoundEstimates:
    cubo, stderr = cubo_estimate(chain, y0, n, rng)
    return BoundEstimates(elbo=elbo_exact(chain, y0), exact=exact_loglik(chain, y0),
                          cubo=cubo, cubo_stderr=stderr, n_samples=n)


@dataclass
class JointDecomposition:
    """Two per-input lower bounds plus the Monte-Carlo coupling term."""

    elbo_a: float
    elbo_b: float
    mi_term: float
    mi_stderr: float

    @property
    def joint(self) -> float:
        return self.elbo_a + self.elbo_b + self.mi_term


def joint_positive_decomposition(chain: GaussianChain, y0: float, y0p: float,
                                 rho: float, n: int, rng: np.random.Generator,
                                 t: int | None = None) -> JointDecomposition:
    """Decompose a joint lower bound over a correlated input pair.

    The noised values y_t and y_t' share their noise draw through a common
    component with correlation ``rho`` in [0, 1).  The coupling term is the
    Monte-Carlo average of the pointwise log density ratio
    log q(y_t, y_t') - log q(y_t) - log q(y_t'), whose expectation for this
    bivariate Gaussian coupling is -0.5 * log(1 - rho^2).  Independent
    draws (rho = 0) make the term identically zero.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("joint_positive_decomposition: rho must be in [0, 1)")
    if t is None:
        t = chain.T
    if not 1 <= t <= chain.T:
        raise ValueError("joint_positive_decomposition: t out of range")
    g = rng.standard_normal(n)
    u1 = rng.standard_normal(n)
    u2 = rng.standard_normal(n)
    sr = math.sqrt(rho)
    sq = math.sqrt(1.0 - rho)
    z1 = sr * g + sq * u1
    z2 = sr * g + sq * u2
    if rho == 0.0:
        ratio = np.zeros(n)
    else:
        one_minus = 1.0 - rho * rho
        ratio = (-0.5 * math.log(one_minus)
                 - (rho * rho * (z1 ** 2 + z2 ** 2) - 2.0 * rho * z1 * z2)
                 / (2.0 * one_minus))
    mi = float(ratio.mean())
    stderr = float(ratio.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return JointDecomposition(elbo_a=elbo_exact(chain, y0),
                              elbo_b=elbo_exact(chain, y0p),
                              mi_term=mi, mi_stderr=stderr)


def standard_chains() -> list[tuple[str, GaussianChain, float]]:
    """Named chain configurations spanning matched and mismatched cases."""
    configs = []
    betas3 = np.array([0.1, 0.2, 0.3])
    configs.append(("matched-T3", GaussianChain.matched(3, betas3, 0.5, 1.5), 0.7))

    shifted = GaussianChain.matched(3, betas3, 0.0, 1.0)
    shifted = GaussianChain(T=3, betas=betas3, rev_a=shifted.rev_a,
                            rev_b=shifted.rev_b + 0.3, rev_var=shifted.rev_var,
                            prior_mean=shifted.prior_mean, prior_var=shifted.prior_var)
    configs.append(("mean-shift-T3", shifted, 0.2))

    betas4 = np.array([0.05, 0.1, 0.2, 0.3])
    inflated = GaussianChain.matched(4, betas4, 0.0, 2.0)
    inflated = GaussianChain(T=4, betas=betas4, rev_a=inflated.rev_a,
                             rev_b=inflated.rev_b, rev_var=inflated.rev_var * 1.4,
                             prior_mean=inflated.prior_mean, prior_var=inflated.prior_var)
    configs.append(("var-inflate-T4", inflated, -0.5))

    betas5 = np.array([0.05, 0.1, 0.15, 0.2, 0.25])
    prior_off = GaussianChain.matched(5, betas5, 1.0, 1.0)
    prior_off = GaussianChain(T=5, betas=betas5, rev_a=prior_off.rev_a,
                              rev_b=prior_off.rev_b, rev_var=prior_off.rev_var,
                              prior_mean=prior_off.prior_mean + 0.5,
                              prior_var=prior_off.prior_var * 1.2)
    configs.append(("prior-shift-T5", prior_off, 1.3))

    betas2 = np.array([0.2, 0.4])
    mixed = GaussianChain.matched(2, betas2, -0.5, 0.8)
    mixed = GaussianChain(T=2, betas=betas2, rev_a=mixed.rev_a * 0.9,
                          rev_b=mixed.rev_b - 0.2, rev_var=mixed.rev_var * 1.2,
                          prior_mean=mixed.prior_mean, prior_var=mixed.prior_var)
    configs.append(("mixed-T2", mixed, -0.1))
    return configs
