"""Markup and image encoders feeding the alignment objective.

The markup side embeds tokens with learned positional offsets.  The image
side runs a strided residual conv stack, collapses the feature map into a
left-to-right sequence (one entry per feature column), and contextualizes
it with a bidirectional LSTM.  A single-head cross attention then reads
the visual sequence once per markup token, and ``fa_loss`` scores how well
each attended read lines up with its own token embedding while staying
apart from the others.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import FLOAT, softmax_rows


class VocabError(ValueError):
    """A token outside the closed vocabulary was passed to the encoder."""


class MarkupEncoder(nn.Module):
    """Token plus position embedding table producing (N, D) sequences."""

    def __init__(self, vocab: tuple[str, ...], d_model: int, max_len: int = 48):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.max_len = max_len
        self.tok_emb = nn.Parameter(torch.zeros(len(self.vocab), d_model, dtype=FLOAT))
        self.pos_emb = nn.Parameter(torch.zeros(max_len, d_model, dtype=FLOAT))

    def forward(self, tokens) -> torch.Tensor:
        if len(tokens) == 0:
            raise VocabError("empty token sequence")
        if len(tokens) > self.max_len:
            raise VocabError(f"sequence of {len(tokens)} exceeds max length {self.max_len}")
        try:
            ids = [self.index[t] for t in tokens]
        except KeyError as e:
            raise VocabError(f"token {e.args[0]!r} not in vocabulary") from None
        idx = torch.tensor(ids, dtype=torch.long)
        return self.tok_emb[idx] + self.pos_emb[: len(ids)]


class _DownBlock(nn.Module):
    """Strided conv followed by a same-size residual refinement conv."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, dtype=FLOAT)
        self.refine = nn.Conv2d(c_out, c_out, 3, padding=1, dtype=FLOAT)

    def forward(self, x):
        h = torch.nn.functional.silu(self.down(x))
        return h + torch.nn.functional.silu(self.refine(h))


class ConvStack(nn.Module):
    """Four-layer strided conv encoder; 32x128 inputs give (C, 4, 16) maps.

    Every nonlinearity maps zero to zero, so with zero biases an all-zero
    image produces an all-zero feature map.
    """

    def __init__(self, channels: tuple[int, int, int, int] = (16, 32, 64, 64)):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.blocks = nn.ModuleList([
            _DownBlock(1, c0, 2),
            _DownBlock(c0, c1, 2),
            _DownBlock(c1, c2, 2),
            _DownBlock(c2, c3, 1),
        ])
        self.out_channels = c3

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() == 2:
            img = img[None, None]
        elif img.dim() == 3:
            img = img[:, None]
        x = img.to(FLOAT)
        for block in self.blocks:
            x = block(x)
        return x


class MapToSequence(nn.Module):
    """1x1 conv to the model width, then mean pool over the height axis.

    Output token m depends only on feature column m, so shifting input
    activations one column moves the response one token.
    """

    def __init__(self, c_in: int, d_model: int):
        super().__init__()
        self.proj = nn.Conv2d(c_in, d_model, 1, dtype=FLOAT)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.dim() == 3:
            v = v[None]
        return self.proj(v).mean(dim=2).transpose(1, 2)


class _LstmDirection(nn.Module):
    """Single-direction LSTM with an explicit step loop."""

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.d_hidden = d_hidden
        self.w_ih = nn.Parameter(torch.zeros(4 * d_hidden, d_in, dtype=FLOAT))
        self.w_hh = nn.Parameter(torch.zeros(4 * d_hidden, d_hidden, dtype=FLOAT))
        self.bias = nn.Parameter(torch.zeros(4 * d_hidden, dtype=FLOAT))

    def forward(self, xs: torch.Tensor) -> torch.Tensor:
        b, m, _ = xs.shape
        h = xs.new_zeros(b, self.d_hidden)
        c = xs.new_zeros(b, self.d_hidden)
        outs = []
        for step in range(m):
            gates = xs[:, step] @ self.w_ih.T + h @ self.w_hh.T + self.bias
            i, f, g, o = gates.chunk(4, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            outs.append(h)
        return torch.stack(outs, dim=1)


class BiRecurrent(nn.Module):
    """Bidirectional LSTM context, D/2 hidden units per direction, concatenated.

    Reversing the input sequence while swapping the two direction modules
    reverses the output up to swapping the concatenated halves.
    """

    def __init__(self, d_model: int):
        super().__init__()
        if d_model % 2:
            raise ValueError("BiRecurrent: d_model must be even")
        self.fwd = _LstmDirection(d_model, d_model // 2)
        self.bwd = _LstmDirection(d_model, d_model // 2)

    def forward(self, vs: torch.Tensor) -> torch.Tensor:
        squeeze = vs.dim() == 2
        if squeeze:
            vs = vs[None]
        hf = self.fwd(vs)
        hb = self.bwd(vs.flip(1)).flip(1)
        h = torch.cat([hf, hb], dim=-1)
        return h[0] if squeeze else h


class Cam(nn.Module):
    """Single-head cross attention: markup queries over the visual sequence."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.w_q = nn.Parameter(torch.zeros(d_model, d_model, dtype=FLOAT))
        self.w_k = nn.Parameter(torch.zeros(d_model, d_model, dtype=FLOAT))
        self.w_v = nn.Parameter(torch.zeros(d_model, d_model, dtype=FLOAT))

    def attention_weights(self, t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        q = t @ self.w_q
        k = h @ self.w_k
        return softmax_rows(q @ k.transpose(-1, -2) / math.sqrt(self.d_model))

    def forward(self, t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.attention_weights(t, h) @ (h @ self.w_v)


def fa_loss(c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Per-index alignment score between attended reads and token embeddings.

    mean_i [ 1 - cos(c_i, t_i) + (1/(N-1)) * sum_{j != i} cos(c_i, t_j) ]

    The cross term vanishes for N = 1.  Rows with near-zero norm have no
    defined direction and are rejected.
    """
    if c.shape != t.shape or c.dim() != 2:
        raise ValueError(f"fa_loss: expected matching (N, D) inputs, got {c.shape} vs {t.shape}")
    n = c.shape[0]
    c_norm = torch.linalg.vector_norm(c, dim=-1)
    t_norm = torch.linalg.vector_norm(t, dim=-1)
    if bool((c_norm < 1e-12).any()) or bool((t_norm < 1e-12).any()):
        raise ValueError("fa_loss: zero-norm row has no cosine direction")
    cos = (c / c_norm[:, None]) @ (t / t_norm[:, None]).T
    diag = cos.diagonal()
    if n == 1:
        return (1.0 - diag).mean()
    off_sum = cos.sum(dim=1) - diag
    return (1.0 - diag + off_sum / (n - 1)).mean()
