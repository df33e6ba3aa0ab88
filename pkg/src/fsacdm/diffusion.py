"""Forward noising process, stochastic bound estimator, contrastive terms,
and the combined training objective.

The objective couples four pieces on a shared timestep and noise draw per
item: the alignment loss from the encoders, stochastic lower-bound
estimates for the clean image and an augmented positive view, an
exponentiated bound term that pushes down the likelihood of mismatched
negatives, and an InfoNCE score over the noised samples themselves.
Setting the negative-term weight to zero disables every use of negatives,
making the result bitwise independent of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import FLOAT, NumericsError

CL_DENOMINATORS = ("with_positive", "negatives_only")


@dataclass
class NoiseSchedule:
    """Linear variance schedule with the convention alpha_bar[0] = 1.

    Arrays are indexed by timestep: entry t covers step t for t in [1, T],
    and index 0 is a placeholder (beta[0] = 0) so formulas read naturally.
    """

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    beta_tilde: torch.Tensor

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ValueError("NoiseSchedule: T must be >= 1")
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError("NoiseSchedule: need 0 < beta_start <= beta_end < 1")
        steps = torch.linspace(beta_start, beta_end, T, dtype=FLOAT)
        beta = torch.cat([torch.zeros(1, dtype=FLOAT), steps])
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        # posterior variance of y_{t-1} given (y_t, y0); zero at t = 1
        beta_tilde = torch.zeros(T + 1, dtype=FLOAT)
        for t in range(1, T + 1):
            beta_tilde[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]
        return cls(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def forward_sample(sched: NoiseSchedule, y0: torch.Tensor, t,
                   eps: torch.Tensor) -> torch.Tensor:
    """Noised sample sqrt(abar_t) y0 + sqrt(1 - abar_t) eps; t may be a
    scalar or a per-item tensor broadcast over leading batch dims."""
    t = torch.as_tensor(t, dtype=torch.long)
    abar = sched.alpha_bar[t]
    while abar.dim() < y0.dim():
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * y0 + torch.sqrt(1.0 - abar) * eps


def posterior_mean(sched: NoiseSchedule, y0, y_t, t: int) -> torch.Tensor:
    """Mean of q(y_{t-1} | y_t, y0)."""
    abar_t = sched.alpha_bar[t]
    abar_prev = sched.alpha_bar[t - 1]
    coef0 = torch.sqrt(abar_prev) * sched.beta[t] / (1.0 - abar_t)
    coef_t = torch.sqrt(sched.alpha[t]) * (1.0 - abar_prev) / (1.0 - abar_t)
    return coef0 * y0 + coef_t * y_t


def model_mean(sched: NoiseSchedule, y_t, eps_hat, t: int) -> torch.Tensor:
    """Reverse-step mean implied by a noise estimate."""
    return (y_t - sched.beta[t] / torch.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) \
        / torch.sqrt(sched.alpha[t])


def elbo_terms(eps_fn, sched: NoiseSchedule, y0: torch.Tensor, t: torch.Tensor,
               eps: torch.Tensor) -> torch.Tensor:
    """Single-timestep stochastic lower-bound estimate per batch item.

    For the sampled step the contribution is the Gaussian reconstruction
    log-density at t = 1 (decoder variance beta_1, since the posterior
    variance degenerates there), minus the prior KL at t = T, and minus
    T times the posterior-vs-model KL elsewhere, where both Gaussians
    share the posterior variance so the KL is a scaled squared mean gap.

    ``eps_fn(y_t, t)`` evaluates the noise model on the whole batch.
    Returns a (B,) tensor.
    """
    b = y0.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(b)
    if bool((t < 1).any()) or bool((t > sched.T).any()):
        raise ValueError("elbo_terms: t out of [1, T]")
    y_t = forward_sample(sched, y0, t, eps)
    eps_hat = eps_fn(y_t, t)
    d = y0[0].numel()
    out = []
    for i in range(b):
        ti = int(t[i])
        if ti == sched.T:
            abar = sched.alpha_bar[ti]
            # KL(q(y_T | y0) || N(0, I)), constant in the model parameters
            kl = 0.5 * (abar * y0[i].reshape(-1) ** 2 + (1.0 - abar) - 1.0
                        - torch.log(1.0 - abar)).sum()
            out.append(-kl)
        elif ti == 1:
            mu = model_mean(sched, y_t[i], eps_hat[i], 1)
            var = sched.beta[1]
            log_p = (-0.5 * d * math.log(2.0 * math.pi * float(var))
                     - ((y0[i] - mu) ** 2).sum() / (2.0 * var))
            out.append(log_p)
        else:
            mu_post = posterior_mean(sched, y0[i], y_t[i], ti)
            mu_model = model_mean(sched, y_t[i], eps_hat[i], ti)
            kl = ((mu_post - mu_model) ** 2).sum() / (2.0 * sched.beta_tilde[ti])
            out.append(-sched.T * kl)
    return torch.stack(out)


# --- contrastive machinery --------------------------------------------------


def translate_blur(y0: np.ndarray, dx: int, dy: int, blur: bool) -> np.ndarray:
    """Shift by (dx, dy) with zero padding, then optional radius-1 box blur."""
    out = np.zeros_like(y0)
    h, w = y0.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = y0[src_r, src_c]
    if blur:
        padded = np.pad(out, 1)
        acc = np.zeros_like(out)
        for rr in range(3):
            for cc in range(3):
                acc += padded[rr:rr + h, cc:cc + w]
        out = acc / 9.0
    return out


def make_positive(y0: np.ndarray, rng: np.random.Generator,
                  max_attempts: int = 8) -> np.ndarray:
    """Augmented view: translation up to 2 px each axis plus coin-flip blur.

    A draw that clips away more than 5% of the ink is rejected and redrawn;
    after ``max_attempts`` rejections the original image is returned.
    """
    ink = y0.sum()
    for _ in range(max_attempts):
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        blur = bool(rng.random() < 0.5)
        shifted = translate_blur(y0, dx, dy, blur=False)
        if ink > 0 and shifted.sum() < 0.95 * ink:
            continue
        return translate_blur(y0, dx, dy, blur) if blur else shifted
    return y0.copy()


def sample_negatives(batch_size: int, anchor_index: int, k: int,
                     rng: np.random.Generator) -> list[int]:
    """K distinct batch positions other than the anchor's."""
    if batch_size <= k:
        raise ValueError(f"sample_negatives: need batch > K, got {batch_size} <= {k}")
    others = [i for i in range(batch_size) if i != anchor_index]
    picked = rng.choice(len(others), size=k, replace=False)
    return [others[int(i)] for i in picked]


def contrastive_loss(z_anchor: torch.Tensor, z_pos: torch.Tensor,
                     z_negs: torch.Tensor, tau: float,
                     denominator: str = "with_positive") -> torch.Tensor:
    """InfoNCE log-score of the positive pair against the negatives.

    All inputs are flattened to unit vectors; similarities are inner
    products divided by the temperature.  With the positive included in
    the denominator the value is strictly negative; the alternative uses
    negatives only.  An empty negative set is only meaningful with the
    positive included, where the score is exactly zero.
    """
    if denominator not in CL_DENOMINATORS:
        raise ValueError(f"contrastive_loss: unknown denominator {denominator!r}")
    if tau <= 0:
        raise ValueError("contrastive_loss: tau must be positive")
    za = _unit(z_anchor.reshape(-1))
    zp = _unit(z_pos.reshape(-1))
    zn = z_negs.reshape(z_negs.shape[0], -1) if z_negs.numel() else z_negs.reshape(0, za.shape[0])
    if zn.shape[0] == 0 and denominator == "negatives_only":
        raise ValueError("contrastive_loss: negatives_only needs at least one negative")
    s_pos = (za * zp).sum() / tau
    sims = [s_pos] if denominator == "with_positive" else []
    for row in zn:
        sims.append((za * _unit(row)).sum() / tau)
    return s_pos - torch.logsumexp(torch.stack(sims), dim=0)


def _unit(z: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(z)
    if float(norm.detach()) < 1e-12:
        raise NumericsError("contrastive_loss: zero-norm sample")
    return z / norm


@dataclass
class LossWeights:
    """Scalar weights of the combined objective."""

    lam: float = 0.005
    beta_fa: float = 0.02
    tau: float = 0.5
    num_negatives: int = 5
    exp_clamp: float = 10.0
    cl_denominator: str = "with_positive"

    def __post_init__(self):
        if self.cl_denominator not in CL_DENOMINATORS:
            raise ValueError(f"LossWeights: bad cl_denominator {self.cl_denominator!r}")
        if self.lam < 0 or self.beta_fa < 0 or self.tau <= 0:
            raise ValueError("LossWeights: lam, beta_fa must be >= 0 and tau > 0")


@dataclass
class LossBundle:
    """Components of one objective evaluation, batch-averaged."""

    l_fa: torch.Tensor
    elbo_anchor: torch.Tensor
    elbo_pos: torch.Tensor
    eubo_neg_term: torch.Tensor
    l_cl: torch.Tensor
    total: torch.Tensor

    FIELDS = ("l_fa", "elbo_anchor", "elbo_pos", "eubo_neg_term", "l_cl", "total")

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.FIELDS}


def total_loss(eps_fn, sched: NoiseSchedule, weights: LossWeights,
               y0: torch.Tensor, y0_pos: torch.Tensor,
               y0_negs: torch.Tensor | None, l_fa: torch.Tensor,
               t: torch.Tensor, eps: torch.Tensor,
               cond_index=None) -> LossBundle:
    """Combined objective over a batch with shared per-item (t, eps) draws.

    ``y0``/``y0_pos`` are (B, H, W); ``y0_negs`` is (B, K, H, W), each row
    holding other images evaluated against item b's condition.  ``eps_fn``
    takes a stacked image tensor plus matching timesteps and an index
    selecting which item's condition each entry uses.

    total = beta_fa * l_fa - elbo_anchor - elbo_pos
            + lam * eubo_neg_term - l_cl

    where eubo_neg_term averages exp(min(2 * elbo_neg, exp_clamp)) over
    negatives.  With lam = 0 the negatives are never touched: the bound
    term and the contrastive term are exactly zero.
    """
    b = y0.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(b)
    use_negs = weights.lam != 0.0
    if use_negs:
        if y0_negs is None:
            raise ValueError("total_loss: lam > 0 requires negatives")
        k = y0_negs.shape[1]
        stack = torch.cat([y0, y0_pos, y0_negs.reshape(b * k, *y0.shape[1:])])
        stack_t = torch.cat([t, t, t.repeat_interleave(k)])
        index = torch.cat([torch.arange(b), torch.arange(b),
                           torch.arange(b).repeat_interleave(k)])
        stack_eps = torch.cat([eps, eps, eps.repeat_interleave(k, dim=0)])
    else:
        k = 0
        stack = torch.cat([y0, y0_pos])
        stack_t = torch.cat([t, t])
        index = torch.cat([torch.arange(b), torch.arange(b)])
        stack_eps = torch.cat([eps, eps])

    fn = (lambda y_t, tt: eps_fn(y_t, tt, index)) if cond_index is None else \
         (lambda y_t, tt: eps_fn(y_t, tt, cond_index[index]))
    elbos = elbo_terms(fn, sched, stack, stack_t, stack_eps)
    elbo_anchor = elbos[:b].mean()
    elbo_pos = elbos[b:2 * b].mean()

    if use_negs:
        elbo_negs = elbos[2 * b:].reshape(b, k)
        eubo = torch.exp(torch.clamp(2.0 * elbo_negs, max=weights.exp_clamp)).mean()
        y_t_all = forward_sample(sched, stack, stack_t, stack_eps)
        cls = []
        for i in range(b):
            z_a = y_t_all[i]
            z_p = y_t_all[b + i]
            z_n = y_t_all[2 * b + i * k: 2 * b + (i + 1) * k]
            cls.append(contrastive_loss(z_a, z_p, z_n, weights.tau,
                                        weights.cl_denominator))
        l_cl = torch.stack(cls).mean()
    else:
        eubo = y0.new_zeros(())
        l_cl = y0.new_zeros(())

    total = (weights.beta_fa * l_fa - elbo_anchor - elbo_pos
             + weights.lam * eubo - l_cl)
    return LossBundle(l_fa=l_fa, elbo_anchor=elbo_anchor, elbo_pos=elbo_pos,
                      eubo_neg_term=eubo, l_cl=l_cl, total=total)


def ddpm_sample(eps_fn, sched: NoiseSchedule, shape: tuple[int, ...],
                rng: np.random.Generator) -> torch.Tensor:
    """Ancestral sampling from pure noise down to a [0, 1]-clipped image.

    ``eps_fn(y_t, t)`` evaluates the noise model for scalar t across the
    batch.  No noise is added on the final step; all randomness comes from
    the supplied generator, so a fixed stream gives bitwise-identical
    output.
    """
    y = torch.from_numpy(rng.standard_normal(size=shape)).to(FLOAT)
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(y, t)
        mean = model_mean(sched, y, eps_hat, t)
        if t > 1:
            xi = torch.from_numpy(rng.standard_normal(size=shape)).to(FLOAT)
            y = mean + torch.sqrt(sched.beta_tilde[t]) * xi
        else:
            y = mean
    return torch.clamp(y, 0.0, 1.0)
