"""Full impression-controllable TTS system and its checkpoint archive."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .archive import load_namespace, module_arrays, namespace_hashes, read_archive, write_archive
from .backbone import AcousticModel, MelDiscriminator
from .control import ControlConfig, ControlModule
from .corpus import N_MELS, VOCAB_SIZE
from .encoder import FrontendStub, StyleTokenLayer, UtteranceEncoder, pad_batch
from .errors import NotInitialized
from .impression import ImpressionVector

NAMESPACES = ("frontend", "speaker_encoder", "stl", "backbone", "control", "discriminator")


@dataclass
class ModelConfig:
    n_ssl_layers: int = 5
    ssl_dim: int = 96
    frontend_seed: int = 1234
    rnn_hidden: int = 128
    latent_dim: int = 384
    stl_tokens: int = 8
    stl_heads: int = 4
    stl_scale: float = 3.0
    vocab_size: int = VOCAB_SIZE
    ling_dim: int = 32
    hidden: int = 128
    n_heads: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    dropout: float = 0.0
    n_mels: int = N_MELS

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def perturb_latent(x: Tensor, scale: float) -> Tensor:
    """Add Gaussian noise with std ``scale`` times the latent batch's std (training only)."""
    if scale == 0.0:
        return x
    return x + scale * x.detach().std() * torch.randn_like(x)


class ImpressionTTS(nn.Module):
    """Frontend -> speaker encoder -> [control] -> STL -> acoustic model.

    Without a control module the STL is queried with the raw latent x
    (the pretraining configuration).
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        self.frontend = FrontendStub(c.n_ssl_layers, c.ssl_dim, c.n_mels, c.frontend_seed)
        self.speaker_encoder = UtteranceEncoder(c.n_ssl_layers, c.ssl_dim, c.rnn_hidden, c.latent_dim)
        self.stl = StyleTokenLayer(c.latent_dim, c.stl_tokens, c.stl_heads, c.stl_scale)
        self.backbone = AcousticModel(c.vocab_size, c.ling_dim, c.hidden, c.n_heads, c.enc_blocks,
                                      c.dec_blocks, c.latent_dim, c.n_mels, c.dropout)
        self.control: ControlModule | None = None
        self.discriminator: MelDiscriminator | None = None
        self.stages_completed: list[str] = []

    def add_control(self, cfg: ControlConfig | None = None) -> ControlModule:
        self.control = ControlModule(self.cfg.latent_dim, cfg)
        return self.control

    def add_discriminator(self) -> MelDiscriminator:
        self.discriminator = MelDiscriminator(self.cfg.n_mels)
        return self.discriminator

    def embed_reference(self, ref_mels: Tensor, ref_lengths: Tensor) -> Tensor:
        stack = self.frontend(ref_mels, ref_lengths)
        return self.speaker_encoder(stack, ref_lengths)

    def conditioning(self, x: Tensor, v: Tensor | None) -> tuple[Tensor, Tensor | None]:
        """Speaker embedding fed to the backbone, plus p_x when the control module is active."""
        p_x = None
        if self.control is not None:
            if v is None:
                raise ValueError("an impression vector is required once the control module is inserted")
            x, p_x = self.control(x, v)
        return self.stl(x), p_x

    def forward(self, batch: dict, teacher_forcing: bool = True, latent_noise: float = 0.0) -> dict:
        x = self.embed_reference(batch["ref_mel"], batch["ref_lengths"])
        x = perturb_latent(x, latent_noise)
        e, p_x = self.conditioning(x, batch.get("impression"))
        kw = {}
        if teacher_forcing:
            kw = dict(durations=batch["durations"], pitch=batch["pitch"], energy=batch["energy"])
        out = self.backbone(batch["tokens"], batch["token_mask"], e, **kw)
        out["latent"] = x
        out["p_x"] = p_x
        return out

    @torch.no_grad()
    def synthesize_batch(self, token_lists: Sequence[Sequence[int]], reference_mel: np.ndarray,
                         v: ImpressionVector | None) -> list[np.ndarray]:
        """Eval-mode synthesis of several sentences with one reference and one vector."""
        if not self.stages_completed:
            raise NotInitialized("model has not been trained or loaded")
        was_training = self.training
        self.eval()
        try:
            ref = torch.from_numpy(np.asarray(reference_mel, dtype=np.float32))
            ref_mel, ref_len = pad_batch([ref])
            x = self.embed_reference(ref_mel, ref_len)
            vt = None if v is None else torch.tensor([v.scores], dtype=torch.float32)
            e, _ = self.conditioning(x, vt)
            tokens, token_mask = pad_tokens(token_lists)
            e = e.expand(len(token_lists), -1)
            out = self.backbone(tokens, token_mask, e)
        finally:
            self.train(was_training)
        mel = out["mel"].numpy()
        return [mel[i, : int(n)].copy() for i, n in enumerate(out["frame_lengths"])]

    def synthesize(self, token_ids: Sequence[int], reference_mel: np.ndarray,
                   v: ImpressionVector | None) -> np.ndarray:
        return self.synthesize_batch([token_ids], reference_mel, v)[0]

    def namespace(self, name: str) -> nn.Module | None:
        return getattr(self, name)


def pad_tokens(token_lists: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor]:
    lengths = torch.tensor([len(t) for t in token_lists])
    tokens = torch.zeros(len(token_lists), int(lengths.max()), dtype=torch.long)
    for i, t in enumerate(token_lists):
        tokens[i, : len(t)] = torch.as_tensor(list(t), dtype=torch.long)
    mask = torch.arange(tokens.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
    return tokens, mask


# --- checkpoint archive --------------------------------------------------------


def _modules(model: ImpressionTTS) -> dict:
    return {ns: model.namespace(ns) for ns in NAMESPACES}


def namespace_state(model: ImpressionTTS) -> dict[str, np.ndarray]:
    return module_arrays(_modules(model))


def parameter_hashes(model: ImpressionTTS) -> dict[str, str]:
    """SHA-256 over the arrays of each present namespace."""
    return namespace_hashes(namespace_state(model))


def save_checkpoint(model: ImpressionTTS, path: str | Path, extra: dict | None = None) -> None:
    meta = {
        "kind": "tts",
        "model": asdict(model.cfg),
        "control": model.control.cfg.to_dict() if model.control is not None else None,
        "discriminator": model.discriminator is not None,
        "stages_completed": list(model.stages_completed),
        "extra": extra or {},
    }
    write_archive(path, namespace_state(model), meta)


def read_checkpoint_meta(path: str | Path) -> dict:
    return read_archive(path)[1]


def load_checkpoint(path: str | Path) -> tuple[ImpressionTTS, dict]:
    path = Path(path)
    if not path.exists():
        raise NotInitialized(f"checkpoint not found: {path}")
    arrays, meta = read_archive(path)
    model = ImpressionTTS(ModelConfig.from_dict(meta["model"]))
    if meta["control"] is not None:
        model.add_control(ControlConfig(**meta["control"]))
    if meta["discriminator"]:
        model.add_discriminator()
    for ns, mod in _modules(model).items():
        if mod is not None:
            load_namespace(mod, ns, arrays)
    model.stages_completed = list(meta["stages_completed"])
    return model, meta
