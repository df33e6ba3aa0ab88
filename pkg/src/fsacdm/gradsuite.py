"""Registry of differentiable losses wired to the finite-difference checker.

Each entry builds a scalar loss over a flat parameter vector on a small
randomized instance.  Module-backed losses are evaluated functionally, so
the probe vector stays on the autograd tape for the analytic side while
central differences perturb the same coordinates.  The registry backs both
the gradient tests and the ``gradcheck`` command.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import diffusion
from .ccam import UNetEps
from .encoders import fa_loss
from .model import FsaCdm, init_module
from .numerics import GradReport, grad_check, normal_tensor


@dataclass
class RegisteredLoss:
    name: str
    threshold: float
    build: object  # callable(seed) -> (loss_fn, params)
    eps: float = 1e-5


def _vector_to(shapes, vec):
    out = []
    off = 0
    for shape in shapes:
        n = 1
        for s in shape:
            n *= s
        out.append(vec[off:off + n].reshape(shape))
        off += n
    return out


class _Probe(nn.Module):
    """Wraps a module and a closure so the whole computation is one forward."""

    def __init__(self, inner: nn.Module, fn):
        super().__init__()
        self.inner = inner
        self._fn = fn

    def forward(self):
        return self._fn(self.inner)


def module_loss(inner: nn.Module, fn):
    """Loss over the module's flattened parameters, evaluated functionally.

    Returns (loss_fn, flat_params); ``fn(inner)`` must produce the scalar.
    """
    probe = _Probe(inner, fn)
    named = sorted(probe.named_parameters(), key=lambda kv: kv[0])
    names = [n for n, _ in named]
    shapes = [tuple(p.shape) for _, p in named]
    flat = torch.cat([p.detach().reshape(-1) for _, p in named])

    def loss(vec):
        pieces = _vector_to(shapes, vec)
        return torch.func.functional_call(probe, dict(zip(names, pieces)), ())

    return loss, flat


def _build_fa(seed: int):
    shape = (3, 4)
    c0 = normal_tensor(seed, "grad-fa-c", (), shape)
    t0 = normal_tensor(seed, "grad-fa-t", (), shape)
    params = torch.cat([c0.reshape(-1), t0.reshape(-1)])

    def loss(p):
        c, t = _vector_to([shape, shape], p)
        return fa_loss(c, t)

    return loss, params


def _build_cl(seed: int):
    d = 6
    za = normal_tensor(seed, "grad-cl-a", (), (d,))
    zp = normal_tensor(seed, "grad-cl-p", (), (d,))
    zn = normal_tensor(seed, "grad-cl-n", (), (3, d))
    params = torch.cat([za, zp, zn.reshape(-1)])

    def loss(p):
        a, pos, negs = _vector_to([(d,), (d,), (3, d)], p)
        return diffusion.contrastive_loss(a, pos, negs, tau=0.5)

    return loss, params


def _build_unet(seed: int):
    net = UNetEps(channels=(2, 3, 4), d_markup=5, ccam_blocks=1,
                  crossattn_blocks=2, temb_dim=8)
    init_module(net, seed + 101)
    y = normal_tensor(seed, "grad-unet-y", (), (2, 1, 8, 16))
    cond = normal_tensor(seed, "grad-unet-c", (), (2, 3, 5))
    tsteps = torch.tensor([1, 2])
    probe = normal_tensor(seed, "grad-unet-r", (), (2, 1, 8, 16))
    return module_loss(net, lambda m: (m(y, tsteps, cond) * probe).sum())


def _build_total(seed: int):
    model = FsaCdm(vocab=("a", "b", "+", "1"), d_model=6, conv_channels=(2, 3, 4, 4),
                   unet_channels=(2, 2, 3), ccam_blocks=1, crossattn_blocks=1,
                   max_len=8, seed=seed)
    sched = diffusion.NoiseSchedule.linear(1)
    weights = diffusion.LossWeights(lam=0.005, num_negatives=1, beta_fa=0.02)
    token_seqs = [("a", "+", "b"), ("1", "b", "a")]
    y0 = (normal_tensor(seed, "grad-tot-y0", (), (2, 4, 8)) * 0.2 + 0.5).clamp(0.05, 0.95)
    y0_pos = (y0 + 0.02).clamp(0.0, 1.0)
    y0_negs = y0.flip(0)[:, None]
    eps = normal_tensor(seed, "grad-tot-eps", (), (2, 4, 8))
    t = torch.tensor([1, 1])

    def fn(m):
        cond, mask = m.encode_condition(token_seqs)
        l_fa = m.alignment_loss(y0, token_seqs)
        bundle = diffusion.total_loss(m.eps_model(cond, mask), sched, weights,
                                      y0, y0_pos, y0_negs, l_fa, t, eps)
        return bundle.total

    return module_loss(model, fn)


REGISTRY = (
    RegisteredLoss("l_fa", 1e-4, _build_fa),
    RegisteredLoss("l_cl", 1e-4, _build_cl),
    # Deeper stack; wider step keeps cancellation noise under the threshold.
    RegisteredLoss("unet_eps", 1e-3, _build_unet, eps=1e-4),
    RegisteredLoss("total_loss_T1", 1e-4, _build_total),
)


def run_registered(seed: int = 0):
    """Run every registered loss through grad_check; returns result rows."""
    rows: list[tuple[str, GradReport, float, bool]] = []
    for entry in REGISTRY:
        loss, params = entry.build(seed)
        report = grad_check(loss, params, eps=entry.eps)
        rows.append((entry.name, report, entry.threshold,
                     report.max_rel_err <= entry.threshold))
    return rows
