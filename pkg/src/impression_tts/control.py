"""Impression control: strip impression cues from the speaker latent, re-inject them from the vector.

The speaker latent ``x`` goes through heavy dropout and a 32-d projection
``p_x``; an adversary regresses the impression vector from ``p_x`` behind a
gradient reversal layer, so training the projection pushes impression
information out of it. The vector itself gets its own 32-d projection and
the two are fused back to the latent width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .impression import LIKERT_MID, N_DIMS


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_, None


def grl_apply(t: Tensor, lambda_: float = 1.0) -> Tensor:
    if lambda_ < 0:
        raise ValueError(f"lambda_ must be >= 0, got {lambda_}")
    return GradReverse.apply(t, lambda_)


@dataclass
class ControlConfig:
    dropout_rate: float = 0.8
    proj_dim: int = 32
    lambda_grl: float = 1.0
    lambda_adv: float = 0.1
    adversary_hidden: int = 64
    use_grl: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def ablation(cls, **kw) -> "ControlConfig":
        """No dropout, no adversary: the baseline the disentangling parts are judged against."""
        return cls(dropout_rate=0.0, lambda_adv=0.0, use_grl=False, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# neutral point subtracted before projecting the vector
IMPRESSION_CENTER = torch.tensor([LIKERT_MID] * 10 + [0.0])


class ControlModule(nn.Module):
    def __init__(self, latent_dim: int = 384, cfg: ControlConfig | None = None):
        super().__init__()
        self.cfg = cfg or ControlConfig()
        self.dropout = nn.Dropout(self.cfg.dropout_rate)
        self.proj_x = nn.Linear(latent_dim, self.cfg.proj_dim)
        self.proj_v = nn.Linear(N_DIMS, self.cfg.proj_dim)
        self.fuse = nn.Linear(2 * self.cfg.proj_dim, latent_dim)
        self.adversary = nn.Sequential(
            nn.Linear(self.cfg.proj_dim, self.cfg.adversary_hidden),
            nn.ReLU(),
            nn.Linear(self.cfg.adversary_hidden, N_DIMS),
        )
        self.register_buffer("center", IMPRESSION_CENTER.clone())

    def project_latent(self, x: Tensor) -> Tensor:
        return self.proj_x(self.dropout(x))

    def forward(self, x: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the conditioned embedding h and the latent projection p_x."""
        p_x = self.project_latent(x)
        p_v = self.proj_v(v - self.center)
        h = self.fuse(torch.cat([p_x, p_v], dim=-1))
        return h, p_x

    def adversary_predict(self, p_x: Tensor) -> Tensor:
        """Impression estimate from p_x; gradients to p_x are reversed when GRL is on."""
        if self.cfg.use_grl:
            p_x = grl_apply(p_x, self.cfg.lambda_grl)
        return self.adversary(p_x) + self.center

    def adversary_loss(self, p_x: Tensor, v: Tensor) -> Tensor:
        pred = self.adversary_predict(p_x)
        return torch.mean((pred - v) ** 2)


def condition(module: ControlModule, x: Tensor, v: Tensor, mode: str = "eval") -> Tensor:
    """Conditioned embedding h for a latent x and impression vector v."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = module.training
    module.train(mode == "train")
    try:
        h, _ = module(x, v)
    finally:
        module.train(was_training)
    return h


def control_loss(recon_loss: Tensor | float, adv_mse: Tensor | float, cfg: ControlConfig):
    # adv_mse already passed through the GRL; adding it makes the projection
    # maximize the adversary's error while the adversary minimizes it
    return recon_loss + cfg.lambda_adv * adv_mse
