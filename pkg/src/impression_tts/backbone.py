"""Toy FastSpeech2-style acoustic model: FFT encoder, variance adaptor, length regulator, FFT decoder."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .corpus import MEL_MEAN, MEL_STD, generator_basis
from .errors import ShapeError

log = logging.getLogger(__name__)


def sinusoid_table(n_pos: int, dim: int) -> Tensor:
    pos = torch.arange(n_pos, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_pos, dim)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class TimeConv(nn.Module):
    """Zero-padded 1-D convolution over (B, T, C), written as shifted copies + one matmul.

    Equivalent to ``nn.Conv1d(c_in, c_out, kernel, padding=kernel // 2)``;
    the matmul form trains several times faster on small CPUs.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        self.kernel = kernel
        self.linear = nn.Linear(kernel * c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        if self.kernel == 1:
            return self.linear(x)
        r = self.kernel // 2
        padded = F.pad(x, (0, 0, r, r))
        T = x.shape[1]
        return self.linear(torch.cat([padded[:, i : i + T] for i in range(self.kernel)], dim=-1))


class FFTBlock(nn.Module):
    """Self-attention + 1-D conv feed-forward, post-norm, as in FastSpeech."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, kernel: int = 3, dropout: float = 0.1):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.conv1 = TimeConv(dim, ffn_dim, kernel)
        self.conv2 = TimeConv(ffn_dim, dim, 1)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        # mask: (B, T) True on real positions
        pad = ~mask
        a, _ = self.attn(x, x, x, key_padding_mask=pad if bool(pad.any()) else None, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        x = x.masked_fill(pad.unsqueeze(-1), 0.0)
        f = self.conv2(F.relu(self.conv1(x)))
        x = self.norm2(x + self.dropout(f))
        return x.masked_fill(pad.unsqueeze(-1), 0.0)


def length_regulate(states: Tensor, durations: Tensor, token_mask: Tensor) -> tuple[Tensor, Tensor]:
    """Repeat token states by their durations.

    Args:
        states: (B, N, H)
        durations: (B, N) integer frames; padded tokens ignored.

    Returns:
        frames (B, T_max, H) and frame lengths (B,).
    """
    durations = durations.masked_fill(~token_mask, 0).long()
    lengths = durations.sum(dim=1)
    T = max(int(lengths.max()), 1)
    out = states.new_zeros(states.shape[0], T, states.shape[2])
    for b in range(states.shape[0]):
        expanded = torch.repeat_interleave(states[b], durations[b], dim=0)
        out[b, : expanded.shape[0]] = expanded
    return out, lengths


class VarianceAdaptor(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.duration = nn.Linear(dim, 1)
        self.pitch = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))
        self.energy = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))
        self.pitch_embed = nn.Linear(1, dim)
        self.energy_embed = nn.Linear(1, dim)

    def forward(self, states, token_mask, durations=None, pitch=None, energy=None):
        log_dur = self.duration(states).squeeze(-1)
        pitch_pred = self.pitch(states).squeeze(-1)
        energy_pred = self.energy(states).squeeze(-1)
        p = pitch if pitch is not None else pitch_pred
        e = energy if energy is not None else energy_pred
        states = states + self.pitch_embed(p.unsqueeze(-1)) + self.energy_embed(e.unsqueeze(-1))
        if durations is None:
            durations = predicted_durations(log_dur, token_mask)
        frames, frame_lengths = length_regulate(states, durations, token_mask)
        return frames, frame_lengths, {"log_duration": log_dur, "pitch": pitch_pred, "energy": energy_pred}


def predicted_durations(log_dur: Tensor, token_mask: Tensor) -> Tensor:
    d = torch.round(torch.exp(log_dur)).long()
    short = (d < 1) & token_mask
    if bool(short.any()):
        log.debug("clamped %d predicted token durations to 1 frame", int(short.sum()))
    return d.clamp(min=1).masked_fill(~token_mask, 0)


class AcousticModel(nn.Module):
    def __init__(self, vocab_size: int, ling_dim: int = 32, hidden: int = 128, n_heads: int = 2,
                 enc_blocks: int = 2, dec_blocks: int = 2, cond_dim: int = 384, n_mels: int = 80,
                 dropout: float = 0.1, max_len: int = 2048):
        super().__init__()
        self.token_embed = nn.Embedding(vocab_size, ling_dim)
        self.ling_proj = nn.Linear(ling_dim, hidden)
        self.register_buffer("positions", sinusoid_table(max_len, hidden), persistent=False)
        self.encoder = nn.ModuleList(FFTBlock(hidden, n_heads, 2 * hidden, dropout=dropout) for _ in range(enc_blocks))
        self.cond_proj = nn.Linear(cond_dim, hidden)
        self.variance = VarianceAdaptor(hidden)
        self.decoder = nn.ModuleList(FFTBlock(hidden, n_heads, 2 * hidden, dropout=dropout) for _ in range(dec_blocks))
        self.mel_out = nn.Linear(hidden, n_mels)
        # linear speaker path straight to the output: a speaker's spectral
        # envelope shifts every frame alike, so it need not pass the decoder
        self.cond_out = nn.Linear(cond_dim, n_mels)

    def linguistic(self, tokens: Tensor) -> Tensor:
        """Token ids -> (B, N, ling_dim) linguistic vectors."""
        return self.token_embed(tokens)

    def forward(self, tokens, token_mask, cond, durations=None, pitch=None, energy=None):
        x = self.ling_proj(self.linguistic(tokens)) + self.positions[: tokens.shape[1]]
        x = x.masked_fill(~token_mask.unsqueeze(-1), 0.0)
        for block in self.encoder:
            x = block(x, token_mask)
        x = x + self.cond_proj(cond).unsqueeze(1)
        frames, frame_lengths, var = self.variance(x, token_mask, durations, pitch, energy)
        frame_mask = torch.arange(frames.shape[1]).unsqueeze(0) < frame_lengths.unsqueeze(1)
        y = frames + self.positions[: frames.shape[1]]
        y = y.masked_fill(~frame_mask.unsqueeze(-1), 0.0)
        for block in self.decoder:
            y = block(y, frame_mask)
        # the head predicts globally normalized log-mel
        out = self.mel_out(y) + self.cond_out(cond).unsqueeze(1)
        mel = (out * MEL_STD + MEL_MEAN).masked_fill(~frame_mask.unsqueeze(-1), 0.0)
        return {"mel": mel, "frame_lengths": frame_lengths, "frame_mask": frame_mask, **var}


# --- variance targets for the synthetic corpus -----------------------------


def variance_targets(mel: np.ndarray, durations) -> tuple[np.ndarray, np.ndarray]:
    """Per-token pitch and energy read off a mel matrix.

    Both are read relative to the corpus base spectrum, so they are centred
    near zero: pitch is the token-mean frame projected on the generator's
    "High-Low pitched" direction, energy the token-mean log-mel level.
    """
    durations = np.asarray(durations)
    if int(durations.sum()) != mel.shape[0]:
        raise ShapeError(f"durations sum {durations.sum()} != {mel.shape[0]} frames")
    bounds = np.concatenate([[0], np.cumsum(durations)])
    basis = generator_basis()
    token_means = np.stack([mel[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])]) - basis.base_spectrum
    pitch = token_means @ basis.impression[0]
    energy = token_means.mean(axis=1)
    return pitch.astype(np.float32), energy.astype(np.float32)


# --- losses ----------------------------------------------------------------


def compute_losses(pred: dict, targets: dict) -> dict[str, Tensor]:
    """Mel L1 plus MSE on log-duration, pitch and energy, over unpadded positions.

    ``pred`` needs mel, log_duration, pitch, energy; ``targets`` needs mel,
    durations, pitch, energy, frame_mask, token_mask.
    """
    fm, tm = targets["frame_mask"], targets["token_mask"]
    if pred["mel"].shape != targets["mel"].shape:
        raise ShapeError(f"mel shapes differ: {tuple(pred['mel'].shape)} vs {tuple(targets['mel'].shape)}")
    for k in ("log_duration", "pitch", "energy"):
        if pred[k].shape != tm.shape:
            raise ShapeError(f"{k} shape {tuple(pred[k].shape)} does not match tokens {tuple(tm.shape)}")
    n_bins = targets["mel"].shape[-1]
    mel_err = (pred["mel"] - targets["mel"]).abs().sum(dim=-1)
    mel_l1 = (mel_err * fm).sum() / (fm.sum() * n_bins)

    def token_mse(p, t):
        return (((p - t) ** 2) * tm).sum() / tm.sum()

    log_dur_target = torch.log(targets["durations"].clamp(min=1).float())
    out = {
        "mel": mel_l1,
        "duration": token_mse(pred["log_duration"], log_dur_target),
        "pitch": token_mse(pred["pitch"], targets["pitch"]),
        "energy": token_mse(pred["energy"], targets["energy"]),
    }
    out["total"] = out["mel"] + out["duration"] + out["pitch"] + out["energy"]
    return out


# --- optional GAN refinement -------------------------------------------------


class MelDiscriminator(nn.Module):
    """Small conv net scoring mel patches; least-squares GAN targets 1 (real) / 0 (fake)."""

    def __init__(self, n_mels: int = 80, channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, padding=2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(channels, channels, 5, padding=2, stride=2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(channels, 1, 3, padding=1),
        )

    def forward(self, mel: Tensor) -> Tensor:
        return self.net(mel.transpose(1, 2)).squeeze(1)


def lsgan_losses(d_real: Tensor, d_fake: Tensor) -> dict[str, Tensor]:
    return {
        "d_real": torch.mean((d_real - 1.0) ** 2),
        "d_fake": torch.mean(d_fake**2),
        "g_adv": torch.mean((d_fake - 1.0) ** 2),
    }
