"""Full model assembly: encoders plus the conditional U-Net, with
deterministic parameter initialization from keyed streams.

Every parameter is (re)initialized from a stream keyed by its qualified
name, so two models built with the same seed and architecture are bitwise
identical regardless of construction order or process history.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .ccam import UNetEps
from .encoders import BiRecurrent, Cam, ConvStack, MapToSequence, MarkupEncoder, fa_loss
from .numerics import FLOAT, stream


def init_module(module: nn.Module, seed: int) -> nn.Module:
    """Overwrite all parameters deterministically.

    Weights with rank >= 2 get centered normals scaled by 1/sqrt(fan_in);
    rank-1 parameters (biases, scoring vectors) are zeroed.  Embedding
    tables count as rank 2 and use their feature width as fan-in.
    """
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                g = stream(seed, f"init:{name}")
                vals = g.standard_normal(size=tuple(p.shape)) / np.sqrt(fan_in)
                p.copy_(torch.from_numpy(vals).to(FLOAT))
            else:
                p.zero_()
    return module


class FsaCdm(nn.Module):
    """Markup encoder, visual alignment pipeline, and noise model."""

    def __init__(self, vocab, d_model=64, conv_channels=(16, 32, 64, 64),
                 unet_channels=(8, 16, 32), ccam_blocks=2, crossattn_blocks=2,
                 max_len=48, seed=0):
        super().__init__()
        self.d_model = d_model
        self.markup = MarkupEncoder(vocab, d_model, max_len)
        self.conv = ConvStack(conv_channels)
        self.to_seq = MapToSequence(self.conv.out_channels, d_model)
        self.context = BiRecurrent(d_model)
        self.cam = Cam(d_model)
        self.unet = UNetEps(unet_channels, d_model, ccam_blocks, crossattn_blocks)
        init_module(self, seed)

    def encode_condition(self, token_seqs) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad per-document embeddings to (B, N_max, D) with a validity mask."""
        embeds = [self.markup(toks) for toks in token_seqs]
        n_max = max(e.shape[0] for e in embeds)
        cond = torch.zeros(len(embeds), n_max, self.d_model, dtype=FLOAT)
        mask = torch.zeros(len(embeds), n_max, dtype=torch.bool)
        for i, e in enumerate(embeds):
            cond[i, : e.shape[0]] = e
            mask[i, : e.shape[0]] = True
        return cond, mask

    def visual_sequence(self, images: torch.Tensor) -> torch.Tensor:
        """Images (B, H, W) to contextualized sequences (B, M, D)."""
        return self.context(self.to_seq(self.conv(images)))

    def alignment_loss(self, images: torch.Tensor, token_seqs) -> torch.Tensor:
        """Batch-mean alignment loss between attended reads and embeddings."""
        h = self.visual_sequence(images)
        losses = []
        for i, toks in enumerate(token_seqs):
            t_emb = self.markup(toks)
            c = self.cam(t_emb, h[i])
            losses.append(fa_loss(c, t_emb))
        return torch.stack(losses).mean()

    def eps_model(self, cond: torch.Tensor, mask: torch.Tensor):
        """Noise-model closure over a fixed padded condition batch.

        The returned function accepts (y_t, t, index) where ``index`` maps
        each stacked entry to the condition row it should attend to; with
        two arguments the conditions are used in order.
        """
        def fn(y_t, tsteps, index=None):
            if index is None:
                c, m = cond, mask
            else:
                c, m = cond[index], mask[index]
            return self.unet(y_t[:, None] if y_t.dim() == 3 else y_t,
                             tsteps, c, m)[:, 0]
        return fn

    def param_tensors(self) -> dict[str, torch.Tensor]:
        return dict(sorted(self.named_parameters(), key=lambda kv: kv[0]))
