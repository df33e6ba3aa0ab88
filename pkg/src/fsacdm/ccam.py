"""Attention blocks for the denoiser: self-attention, character-aware and
context-aware cross attention, their fused combination, and the U-Net
noise estimator that hosts them.

The fused block runs self-attention first, then reads the markup sequence
two ways in parallel: per-position queries (character-aware) and queries
derived from a global-context relation matrix (context-aware, attending
over the concatenated visual and markup rows).  The two reads are summed,
linearly fused, and added back onto the self-attended features.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .numerics import FLOAT, masked_softmax_rows, softmax_rows


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x[None], True
    return x, False


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with residual add.

    The value projection maps back to the input width, so a length-1
    sequence reduces to its own value projection plus the residual.
    """

    def __init__(self, c: int, d_k: int | None = None):
        super().__init__()
        self.d_k = d_k or c
        self.w_q = nn.Linear(c, self.d_k, bias=False, dtype=FLOAT)
        self.w_k = nn.Linear(c, self.d_k, bias=False, dtype=FLOAT)
        self.w_v = nn.Linear(c, c, bias=False, dtype=FLOAT)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        v, squeeze = _as_batched(v)
        attn = softmax_rows(self.w_q(v) @ self.w_k(v).transpose(-1, -2)
                            / math.sqrt(self.d_k))
        out = attn @ self.w_v(v) + v
        return out[0] if squeeze else out


class CharacterAttention(nn.Module):
    """Visual positions query the markup token sequence directly."""

    def __init__(self, c: int, d_markup: int, d_k: int, d_v: int):
        super().__init__()
        self.d_k = d_k
        self.w_q = nn.Linear(c, d_k, bias=False, dtype=FLOAT)
        self.w_k = nn.Linear(d_markup, d_k, bias=False, dtype=FLOAT)
        self.w_v = nn.Linear(d_markup, d_v, bias=False, dtype=FLOAT)

    def forward(self, v_sa, t_markup, key_mask=None):
        v_sa, squeeze = _as_batched(v_sa)
        t_markup, _ = _as_batched(t_markup)
        logits = self.w_q(v_sa) @ self.w_k(t_markup).transpose(-1, -2) / math.sqrt(self.d_k)
        mask = None if key_mask is None else key_mask[:, None, :].expand_as(logits)
        out = masked_softmax_rows(logits, mask) @ self.w_v(t_markup)
        return out[0] if squeeze else out


class ContextQueries(nn.Module):
    """Relation matrix from pooled global context, projected to queries.

    Position weights come from a learned scoring vector, the pooled context
    is transformed and multiplied elementwise into each position, and the
    resulting relation rows are projected to query width.  A constant
    input yields identical relation rows at every position.
    """

    def __init__(self, c: int, d_q: int):
        super().__init__()
        self.score = nn.Parameter(torch.zeros(c, dtype=FLOAT))
        self.transform = nn.Linear(c, c, dtype=FLOAT)
        self.psi = nn.Linear(c, d_q, bias=False, dtype=FLOAT)

    def relation(self, v: torch.Tensor) -> torch.Tensor:
        v, squeeze = _as_batched(v)
        weights = softmax_rows(v @ self.score)
        pooled = (weights[:, :, None] * v).sum(dim=1)
        r = v * self.transform(pooled)[:, None, :]
        return r[0] if squeeze else r

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.psi(self.relation(v))


class ContextAttention(nn.Module):
    """Relation queries attend over concatenated visual and markup rows.

    Keys and values are two different projections of the same concatenated
    row set.  When the markup width differs from the visual width the
    markup rows pass through a learned projection first; with equal widths
    the concatenation is direct.
    """

    def __init__(self, c: int, d_markup: int, d_k: int, d_v: int):
        super().__init__()
        self.d_k = d_k
        self.markup_proj = (None if d_markup == c
                            else nn.Linear(d_markup, c, bias=False, dtype=FLOAT))
        self.psi_k = nn.Linear(c, d_k, bias=False, dtype=FLOAT)
        self.psi_v = nn.Linear(c, d_v, bias=False, dtype=FLOAT)

    def forward(self, q_cu, v, t_markup, markup_mask=None):
        q_cu, squeeze = _as_batched(q_cu)
        v, _ = _as_batched(v)
        t_markup, _ = _as_batched(t_markup)
        t_rows = t_markup if self.markup_proj is None else self.markup_proj(t_markup)
        rows = torch.cat([v, t_rows], dim=1)
        logits = q_cu @ self.psi_k(rows).transpose(-1, -2) / math.sqrt(self.d_k)
        if markup_mask is None:
            mask = None
        else:
            visual_ok = torch.ones(v.shape[:2], dtype=torch.bool, device=v.device)
            mask = torch.cat([visual_ok, markup_mask], dim=1)[:, None, :].expand_as(logits)
        out = masked_softmax_rows(logits, mask) @ self.psi_v(rows)
        return out[0] if squeeze else out


class CcamBlock(nn.Module):
    """Self-attention plus parallel character- and context-aware reads.

    v_sa = SA(v); out = v_sa + fuse(ChA(v_sa, t) + CoA(Q(v_sa), v_sa, t)).
    Zeroing the fusion weight degenerates the block to plain
    self-attention.
    """

    def __init__(self, c: int, d_markup: int, d_attn: int | None = None):
        super().__init__()
        d = d_attn or c
        self.sa = SelfAttention(c)
        self.cha = CharacterAttention(c, d_markup, d, d)
        self.queries = ContextQueries(c, d)
        self.coa = ContextAttention(c, d_markup, d, d)
        self.fuse = nn.Linear(d, c, bias=False, dtype=FLOAT)

    def forward(self, v, t_markup, markup_mask=None):
        v, squeeze = _as_batched(v)
        t_markup, _ = _as_batched(t_markup)
        v_sa = self.sa(v)
        cha = self.cha(v_sa, t_markup, markup_mask)
        coa = self.coa(self.queries(v_sa), v_sa, t_markup, markup_mask)
        out = v_sa + self.fuse(cha + coa)
        return out[0] if squeeze else out


class CrossAttentionLayer(nn.Module):
    """Conventional residual cross attention from visual rows to markup."""

    def __init__(self, c: int, d_markup: int, d_attn: int | None = None):
        super().__init__()
        d = d_attn or c
        self.d_k = d
        self.w_q = nn.Linear(c, d, bias=False, dtype=FLOAT)
        self.w_k = nn.Linear(d_markup, d, bias=False, dtype=FLOAT)
        self.w_v = nn.Linear(d_markup, d, bias=False, dtype=FLOAT)
        self.w_o = nn.Linear(d, c, bias=False, dtype=FLOAT)

    def forward(self, v, t_markup, key_mask=None):
        logits = self.w_q(v) @ self.w_k(t_markup).transpose(-1, -2) / math.sqrt(self.d_k)
        mask = None if key_mask is None else key_mask[:, None, :].expand_as(logits)
        return v + self.w_o(masked_softmax_rows(logits, mask) @ self.w_v(t_markup))


def timestep_embedding(tsteps: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    if dim % 2:
        raise ValueError("timestep_embedding: dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=FLOAT)
                      / max(half - 1, 1))
    angles = tsteps.to(FLOAT)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, dtype=FLOAT)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, dtype=FLOAT)
        self.temb_proj = nn.Linear(temb_dim, ch, dtype=FLOAT)

    def forward(self, x, temb):
        h = self.conv1(F.silu(x))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        return x + self.conv2(F.silu(h))


class _AttnSite(nn.Module):
    """Runs a row-sequence attention module over a flattened feature map."""

    def __init__(self, inner: nn.Module):
        super().__init__()
        self.inner = inner

    def forward(self, x, cond, cond_mask):
        b, c, h, w = x.shape
        rows = x.reshape(b, c, h * w).transpose(1, 2)
        rows = self.inner(rows, cond, cond_mask)
        return rows.transpose(1, 2).reshape(b, c, h, w)


class UNetEps(nn.Module):
    """3-level conditional U-Net predicting the injected noise.

    Fused attention blocks sit at the bottleneck; conventional cross
    attention layers are spread over the decoder, deepest level first.
    Spatial dims must be divisible by 4.
    """

    def __init__(self, channels: tuple[int, int, int] = (8, 16, 32),
                 d_markup: int = 64, ccam_blocks: int = 2,
                 crossattn_blocks: int = 2, temb_dim: int = 32):
        super().__init__()
        c0, c1, c2 = channels
        self.temb_dim = temb_dim
        self.in_conv = nn.Conv2d(1, c0, 3, padding=1, dtype=FLOAT)
        self.enc0 = _ResBlock(c0, temb_dim)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1, dtype=FLOAT)
        self.enc1 = _ResBlock(c1, temb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, dtype=FLOAT)
        self.mid_in = _ResBlock(c2, temb_dim)
        self.mid_attn = nn.ModuleList(
            [_AttnSite(CcamBlock(c2, d_markup)) for _ in range(ccam_blocks)])
        self.mid_out = _ResBlock(c2, temb_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1, dtype=FLOAT)
        self.merge1 = nn.Conv2d(2 * c1, c1, 3, padding=1, dtype=FLOAT)
        n_deep = (crossattn_blocks + 1) // 2
        self.dec1_attn = nn.ModuleList(
            [_AttnSite(CrossAttentionLayer(c1, d_markup)) for _ in range(n_deep)])
        self.dec1 = _ResBlock(c1, temb_dim)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1, dtype=FLOAT)
        self.merge0 = nn.Conv2d(2 * c0, c0, 3, padding=1, dtype=FLOAT)
        self.dec0_attn = nn.ModuleList(
            [_AttnSite(CrossAttentionLayer(c0, d_markup))
             for _ in range(crossattn_blocks - n_deep)])
        self.dec0 = _ResBlock(c0, temb_dim)
        self.out_conv = nn.Conv2d(c0, 1, 3, padding=1, dtype=FLOAT)

    def forward(self, y, tsteps, cond, cond_mask=None):
        if y.dim() == 3:
            y = y[:, None]
        b, _, h, w = y.shape
        if h % 4 or w % 4:
            raise ValueError(f"UNetEps: spatial dims {h}x{w} not divisible by 4")
        if not torch.is_tensor(tsteps):
            tsteps = torch.full((b,), int(tsteps), dtype=torch.long)
        temb = timestep_embedding(tsteps, self.temb_dim)

        x0 = self.enc0(self.in_conv(y.to(FLOAT)), temb)
        x1 = self.enc1(self.down0(x0), temb)
        x2 = self.mid_in(self.down1(x1), temb)
        for site in self.mid_attn:
            x2 = site(x2, cond, cond_mask)
        x2 = self.mid_out(x2, temb)

        u1 = self.up1(F.interpolate(x2, scale_factor=2, mode="nearest"))
        u1 = self.merge1(torch.cat([u1, x1], dim=1))
        for site in self.dec1_attn:
            u1 = site(u1, cond, cond_mask)
        u1 = self.dec1(u1, temb)

        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.merge0(torch.cat([u0, x0], dim=1))
        for site in self.dec0_attn:
            u0 = site(u0, cond, cond_mask)
        u0 = self.dec0(u0, temb)
        return self.out_conv(u0)
