"""Shared numeric primitives: keyed random streams, stable softmax,
Gaussian KL, and a finite-difference gradient checker.

Every source of randomness in the package flows through :func:`stream`,
which maps ``(seed, tag, *indices)`` to an independent counter-based
generator.  Draws therefore depend only on the key, never on call order,
which is what makes training runs and corpus builds bitwise repeatable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

FLOAT = torch.float64


class NumericsError(RuntimeError):
    """A numeric contract was violated (non-finite values, bad variance)."""


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return an independent Philox generator keyed by (seed, tag, indices).

    The key is derived by hashing the textual form of the inputs, so any
    distinct combination yields a statistically independent stream and the
    same combination always yields the same draws.
    """
    material = repr((int(seed), str(tag), tuple(int(i) for i in indices)))
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def normal_tensor(seed: int, tag: str, indices: tuple[int, ...], shape) -> torch.Tensor:
    """Standard normal draws from a keyed stream, as a float64 tensor."""
    g = stream(seed, tag, *indices)
    return torch.from_numpy(g.standard_normal(size=shape)).to(FLOAT)


def softmax_rows(logits):
    """Row-wise softmax along the last axis with max subtraction.

    Accepts a numpy array or torch tensor of rank >= 1 and returns the
    same kind.  Non-finite input is rejected rather than propagated.
    """
    if isinstance(logits, np.ndarray):
        if not np.all(np.isfinite(logits)):
            raise NumericsError("softmax_rows: non-finite input")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if not torch.all(torch.isfinite(logits)):
        raise NumericsError("softmax_rows: non-finite input")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def masked_softmax_rows(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax along the last axis where ``mask`` marks valid positions.

    Masked positions receive a large negative logit offset, which gives them
    exactly zero weight in float64 while keeping the op differentiable.
    """
    if mask is None:
        return softmax_rows(logits)
    offset = torch.where(mask, torch.zeros_like(logits), torch.full_like(logits, -1e9))
    return softmax_rows(logits + offset)


def gaussian_kl(mu_q, var_q, mu_p, var_p):
    """KL divergence between diagonal Gaussians, summed over elements.

    KL(N(mu_q, var_q) || N(mu_p, var_p))
      = sum 0.5 * (log(var_p/var_q) + (var_q + (mu_q - mu_p)^2) / var_p - 1)

    Scalars and broadcastable tensors are both accepted; the result is a
    0-dim float64 tensor.  Non-positive variances are rejected.
    """
    mu_q = torch.as_tensor(mu_q, dtype=FLOAT)
    var_q = torch.as_tensor(var_q, dtype=FLOAT)
    mu_p = torch.as_tensor(mu_p, dtype=FLOAT)
    var_p = torch.as_tensor(var_p, dtype=FLOAT)
    if not (torch.all(var_q > 0) and torch.all(var_p > 0)):
        raise NumericsError("gaussian_kl: variances must be positive")
    terms = 0.5 * (torch.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0)
    terms = torch.broadcast_tensors(terms, mu_q + mu_p)[0]
    return terms.sum()


@dataclass
class GradReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    worst_index: int
    n_params: int


def grad_check(
    loss: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-5,
) -> GradReport:
    """Compare reverse-mode gradients of ``loss`` against central differences.

    ``loss`` maps a flat float64 parameter vector to a scalar.  For each
    coordinate i the numeric derivative is
    ``(loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps)`` and the relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.

    A non-finite loss at any probe point is an error, not a skip.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    base = params.detach().clone().to(FLOAT)

    p = base.clone().requires_grad_(True)
    value = loss(p)
    if not torch.isfinite(value):
        raise NumericsError("grad_check: non-finite loss at base point")
    (analytic,) = torch.autograd.grad(value, p)
    analytic = analytic.detach()

    max_rel = 0.0
    worst = -1
    for i in range(base.numel()):
        shift = torch.zeros_like(base)
        shift.view(-1)[i] = eps
        with torch.no_grad():
            hi = loss(base + shift)
            lo = loss(base - shift)
        if not (torch.isfinite(hi) and torch.isfinite(lo)):
            raise NumericsError(f"grad_check: non-finite loss at perturbed coordinate {i}")
        numeric = (hi - lo).item() / (2.0 * eps)
        a = analytic.view(-1)[i].item()
        denom = max(abs(a), abs(numeric), 1e-8)
        rel = abs(a - numeric) / denom
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradReport(max_rel_err=max_rel, worst_index=worst, n_params=base.numel())
