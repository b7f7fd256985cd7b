"""Speaker embedding path: layered features -> weighted sum -> BiLSTM -> attention pool -> STL."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import MEL_MEAN, MEL_STD, N_MELS
from .errors import EmptySequence


class FrontendStub(nn.Module):
    """Frozen stand-in for a pretrained SSL model.

    Each pseudo-layer is a fixed seeded linear map of the globally normalized
    mel frame and its two neighbours (edge frames replicated). Weights are
    buffers, so optimizers never see them.
    """

    def __init__(self, n_layers: int = 5, dim: int = 96, n_mels: int = N_MELS, seed: int = 1234):
        super().__init__()
        self.n_layers = n_layers
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(n_layers, 3 * n_mels, dim, generator=g) / math.sqrt(3 * n_mels)
        self.register_buffer("weight", w)

    @torch.no_grad()
    def forward(self, mel: Tensor, lengths: Tensor | None = None) -> Tensor:
        """(B, T, n_mels) or (T, n_mels) -> (B, T, L+1, D) or (T, L+1, D).

        With ``lengths``, the right context of each last real frame is that
        frame itself, so padding never leaks into real frames.
        """
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        mel = (mel - MEL_MEAN) / MEL_STD
        B, T, C = mel.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        t = torch.arange(T)
        prev_idx = (t - 1).clamp(min=0).expand(B, T)
        next_idx = torch.minimum(t + 1, (lengths - 1).clamp(min=0).unsqueeze(1))
        prev = torch.gather(mel, 1, prev_idx.unsqueeze(-1).expand(B, T, C))
        nxt = torch.gather(mel, 1, next_idx.unsqueeze(-1).expand(B, T, C))
        ctx = torch.cat([prev, mel, nxt], dim=-1)
        out = torch.einsum("btc,lcd->btld", ctx, self.weight)
        return out.squeeze(0) if squeeze else out


def layer_weighted_sum(stack: Tensor, layer_logits: Tensor) -> Tensor:
    """Softmax-weighted sum over the layer axis (-2) of a feature stack."""
    w = torch.softmax(layer_logits, dim=-1)
    return torch.einsum("...ld,l->...d", stack, w)


class AttentionPool(nn.Module):
    """Feed-forward attention pooling over time with a padding mask."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.proj = nn.Linear(dim, hidden)
        self.score = nn.Linear(hidden, 1, bias=False)

    def forward(self, seq: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """
        Args:
            seq: (B, T, H)
            mask: (B, T) bool, True marks real frames.

        Returns:
            pooled (B, H) and weights (B, T); padded frames get weight 0.
        """
        if mask is None:
            mask = torch.ones(seq.shape[:2], dtype=torch.bool, device=seq.device)
        if not bool(mask.any(dim=1).all()):
            raise EmptySequence("attention pooling over a sequence with no unmasked frames")
        scores = self.score(torch.tanh(self.proj(seq))).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("bt,bth->bh", weights, seq)
        return pooled, weights


class UtteranceEncoder(nn.Module):
    """Pools a (B, T, L+1, D) feature stack into one vector per utterance."""

    def __init__(self, n_layers: int = 5, feat_dim: int = 96, hidden: int = 128, out_dim: int = 384,
                 rnn_dropout: float = 0.0):
        super().__init__()
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.rnn = nn.LSTM(feat_dim, hidden, batch_first=True, bidirectional=True)
        self.rnn_dropout = nn.Dropout(rnn_dropout)
        self.pool = AttentionPool(2 * hidden)
        self.out = nn.Linear(2 * hidden, out_dim)

    def forward(self, stack: Tensor, lengths: Tensor | None = None) -> Tensor:
        seq = layer_weighted_sum(stack, self.layer_logits)
        B, T = seq.shape[:2]
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        if bool((lengths == T).all()):
            h, _ = self.rnn(seq)
        else:
            packed = pack_padded_sequence(seq, lengths.cpu(), batch_first=True, enforce_sorted=False)
            h, _ = self.rnn(packed)
            h, _ = pad_packed_sequence(h, batch_first=True, total_length=T)
        h = self.rnn_dropout(h)
        mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
        pooled, _ = self.pool(h, mask)
        return self.out(pooled)


class StyleTokenLayer(nn.Module):
    """Multi-head attention of a query embedding over a bank of learned style tokens."""

    def __init__(self, dim: int = 384, n_tokens: int = 8, n_heads: int = 4, scale: float = 3.0):
        super().__init__()
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.dim, self.n_tokens, self.n_heads = dim, n_tokens, n_heads
        self.head_dim = dim // n_heads
        self.scale = scale
        self.tokens = nn.Parameter(torch.randn(n_tokens, self.head_dim) * 0.5)
        self.w_query = nn.Linear(dim, dim, bias=False)
        self.w_key = nn.Linear(self.head_dim, dim, bias=False)
        self.w_value = nn.Linear(self.head_dim, dim, bias=False)

    def value_projections(self) -> Tensor:
        """(n_heads, n_tokens, head_dim) values each head mixes."""
        v = self.w_value(torch.tanh(self.tokens))
        return v.view(self.n_tokens, self.n_heads, self.head_dim).transpose(0, 1)

    def forward(self, query: Tensor, return_weights: bool = False):
        squeeze = query.dim() == 1
        if squeeze:
            query = query.unsqueeze(0)
        B = query.shape[0]
        keys = torch.tanh(self.tokens)
        q = self.w_query(query).view(B, self.n_heads, self.head_dim)
        k = self.w_key(keys).view(self.n_tokens, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.value_projections()
        # cosine scores with a fixed scale: attention cannot sharpen to one-hot, so the
        # embedding moves smoothly with the query instead of switching between tokens
        scores = self.scale * torch.einsum("bhd,hkd->bhk", F.normalize(q, dim=-1), F.normalize(k, dim=-1))
        weights = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhk,hkd->bhd", weights, v).reshape(B, self.dim)
        if squeeze:
            out, weights = out.squeeze(0), weights.squeeze(0)
        return (out, weights) if return_weights else out


def encode_utterance(encoder: UtteranceEncoder, stack: Tensor) -> Tensor:
    """Eval-mode embedding x of a single (T, L+1, D) stack."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(stack.unsqueeze(0)).squeeze(0)
    finally:
        encoder.train(was_training)


def stl_transform(stl: StyleTokenLayer, x: Tensor) -> Tensor:
    with torch.no_grad():
        return stl(x)


def pad_batch(mels: list[Tensor]) -> tuple[Tensor, Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels], dtype=torch.long)
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[-1])
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = m
    return out, lengths


def masked_frames(lengths: Tensor, T: int) -> Tensor:
    return torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)


__all__ = [
    "FrontendStub",
    "layer_weighted_sum",
    "AttentionPool",
    "UtteranceEncoder",
    "StyleTokenLayer",
    "encode_utterance",
    "stl_transform",
    "pad_batch",
    "masked_frames",
]
