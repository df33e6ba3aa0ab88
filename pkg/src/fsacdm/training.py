"""Training loop: deterministic batching, Adam updates, CSV loss logging,
and resumable checkpoints.

All stochastic draws are keyed by (seed, purpose, step[, item]), so a run
is a pure function of its config and a resumed run continues bitwise
identically to an uninterrupted one.  The optimizer keeps its moments as
named tensors that serialize into the same checkpoint as the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .checkpoint import CheckpointError, load_into_model, save_checkpoint
from .config import RunConfig
from .corpus import read_corpus
from .model import FsaCdm
from .numerics import FLOAT, NumericsError, stream

LOG_HEADER = "step,l_fa,elbo_anchor,elbo_pos,eubo_neg_term,l_cl,total"


class Adam(object):
    """Plain Adam with bias correction and serializable state."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.t"] = torch.tensor([float(self.t)], dtype=FLOAT)
        return out

    def load_state(self, data: dict[str, np.ndarray]):
        for name in self.params:
            for prefix, store in (("adam.m.", self.m), ("adam.v.", self.v)):
                key = prefix + name
                if key not in data:
                    raise CheckpointError(f"checkpoint missing optimizer state {key}")
                arr = data[key]
                if tuple(arr.shape) != tuple(store[name].shape):
                    raise CheckpointError(f"optimizer state shape mismatch for {key}")
                store[name] = torch.from_numpy(arr.copy()).to(FLOAT)
        self.t = int(data["adam.t"][0])


@dataclass
class TrainResult:
    steps_run: int
    log_path: str
    checkpoint_path: str
    first_total: float
    last_total: float


def build_model(cfg: RunConfig) -> FsaCdm:
    return FsaCdm(vocab=cfg.vocab, d_model=cfg.d_model,
                  conv_channels=cfg.conv_channels, unet_channels=cfg.unet_channels,
                  ccam_blocks=cfg.ccam_blocks, crossattn_blocks=cfg.crossattn_blocks,
                  seed=cfg.seed)


def _weights(cfg: RunConfig) -> diffusion.LossWeights:
    return diffusion.LossWeights(lam=cfg.lam, beta_fa=cfg.beta_fa, tau=cfg.tau,
                                 num_negatives=cfg.num_negatives,
                                 exp_clamp=cfg.exp_clamp,
                                 cl_denominator=cfg.cl_denominator)


def train_step(model: FsaCdm, optimizer: Adam, sched, weights, cfg: RunConfig,
               docs, images: torch.Tensor, step: int) -> diffusion.LossBundle:
    """One optimization step; all draws keyed by the absolute step number."""
    n_docs = len(docs)
    if cfg.batch > n_docs:
        raise ValueError(f"batch {cfg.batch} exceeds corpus size {n_docs}")
    if cfg.batch == n_docs:
        batch_idx = np.arange(n_docs)
    else:
        batch_idx = stream(cfg.seed, "batch", step).choice(n_docs, size=cfg.batch,
                                                           replace=False)
    b = cfg.batch
    y0_np = images.numpy()[batch_idx]
    y0 = torch.from_numpy(np.ascontiguousarray(y0_np)).to(FLOAT)
    token_seqs = [docs[int(i)].tokens for i in batch_idx]

    pos_np = np.stack([
        diffusion.make_positive(y0_np[i], stream(cfg.seed, "aug", step, i))
        for i in range(b)])
    y0_pos = torch.from_numpy(pos_np).to(FLOAT)

    t_draw = stream(cfg.seed, "tstep", step).integers(1, cfg.T + 1, size=b)
    t = torch.from_numpy(np.ascontiguousarray(t_draw))
    eps = torch.from_numpy(stream(cfg.seed, "eps", step).standard_normal(
        size=(b, cfg.image_height, cfg.image_width))).to(FLOAT)

    if weights.lam != 0.0:
        negs = np.stack([
            y0_np[diffusion.sample_negatives(b, i, weights.num_negatives,
                                             stream(cfg.seed, "negsel", step, i))]
            for i in range(b)])
        y0_negs = torch.from_numpy(negs).to(FLOAT)
    else:
        y0_negs = None

    cond, mask = model.encode_condition(token_seqs)
    l_fa = model.alignment_loss(y0, token_seqs)
    bundle = diffusion.total_loss(model.eps_model(cond, mask), sched, weights,
                                  y0, y0_pos, y0_negs, l_fa, t, eps)
    if not torch.isfinite(bundle.total):
        raise NumericsError(f"non-finite loss at step {step}: {bundle.values()}")
    optimizer.zero_grad()
    bundle.total.backward()
    optimizer.step()
    return bundle


def _format_row(step: int, bundle: diffusion.LossBundle) -> str:
    vals = bundle.values()
    return ",".join([str(step)] + [repr(vals[k]) for k in diffusion.LossBundle.FIELDS])


def train(cfg: RunConfig, resume: str | None = None,
          progress=None) -> TrainResult:
    """Run the full loop, writing loss_log.csv and model.fsac in run_dir."""
    torch.set_num_threads(cfg.threads)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    docs, images_np = read_corpus(cfg.corpus_dir)
    images = torch.from_numpy(images_np).to(FLOAT)

    model = build_model(cfg)
    optimizer = Adam(model.param_tensors(), lr=cfg.lr)
    sched = diffusion.NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    weights = _weights(cfg)

    start_step = 0
    log_path = run_dir / "loss_log.csv"
    ckpt_path = run_dir / "model.fsac"
    if resume is not None:
        data = load_into_model(resume, model)
        optimizer.load_state(data)
        if "meta.step" not in data:
            raise CheckpointError(f"{resume}: missing meta.step")
        start_step = int(data["meta.step"][0])
        log_f = open(log_path, "a", encoding="utf-8")
    else:
        log_f = open(log_path, "w", encoding="utf-8")
        log_f.write(LOG_HEADER + "\n")

    first_total = math.nan
    last_total = math.nan
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            bundle = train_step(model, optimizer, sched, weights, cfg, docs,
                                images, step)
            total = float(bundle.total.detach())
            if math.isnan(first_total):
                first_total = total
            last_total = total
            log_f.write(_format_row(step, bundle) + "\n")
            log_f.flush()
            if progress is not None:
                progress(step, bundle)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                _save(ckpt_path, model, optimizer, step)
    finally:
        log_f.close()
    return TrainResult(steps_run=cfg.steps - start_step, log_path=str(log_path),
                       checkpoint_path=str(ckpt_path), first_total=first_total,
                       last_total=last_total)


def _save(path, model: FsaCdm, optimizer: Adam, step: int) -> None:
    tensors: dict[str, torch.Tensor] = dict(model.param_tensors())
    tensors.update(optimizer.state_tensors())
    tensors["meta.step"] = torch.tensor([float(step)], dtype=FLOAT)
    save_checkpoint(path, tensors)


def sample_documents(model: FsaCdm, cfg: RunConfig, token_seqs,
                     purpose: str = "sample") -> torch.Tensor:
    """Ancestral samples for a list of token sequences, (B, H, W) in [0, 1]."""
    sched = diffusion.NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    cond, mask = model.encode_condition(token_seqs)
    fn = model.eps_model(cond, mask)
    rng = stream(cfg.seed, purpose)
    with torch.no_grad():
        out = diffusion.ddpm_sample(
            lambda y, t: fn(y, torch.full((y.shape[0],), t, dtype=torch.long)),
            sched, (len(token_seqs), cfg.image_height, cfg.image_width), rng)
    return out
