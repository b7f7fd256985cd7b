"""Three-stage training: backbone pretraining, optional GAN refinement, control-module training.

Each stage updates only its trainable namespaces; every other parameter is
frozen (no grad, eval mode) and stays bit-identical.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import Tensor

from .backbone import compute_losses, lsgan_losses, variance_targets
from .control import ControlConfig, control_loss
from .corpus import Corpus
from .encoder import pad_batch
from .errors import StageOrderViolation
from .impression import DIM_IDS
from .model import ImpressionTTS, ModelConfig, load_checkpoint, pad_tokens, perturb_latent, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("pretrain", "gan_refine", "control")
DEFAULT_TRAINABLE = {
    "pretrain": frozenset({"speaker_encoder", "stl", "backbone"}),
    "gan_refine": frozenset({"speaker_encoder", "stl", "backbone", "discriminator"}),
    "control": frozenset({"control"}),
}


@dataclass
class TrainingStagePlan:
    stage: str
    steps: int
    trainable_namespaces: frozenset[str] = frozenset()
    optimizer: str = "adam_noam"  # or "adam_fixed"
    lr: float = 1e-3
    warmup: int = 400
    batch_size: int = 8
    ref_crop: int = 80
    # Gaussian noise on the speaker latent x, in units of the batch's latent std;
    # smooths the speaker path so it extends to unseen speakers
    latent_noise: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.trainable_namespaces:
            self.trainable_namespaces = DEFAULT_TRAINABLE[self.stage]
        self.trainable_namespaces = frozenset(self.trainable_namespaces)
        if self.stage == "control" and self.trainable_namespaces != {"control"}:
            raise ValueError("the control stage may only train the control namespace")
        if self.latent_noise < 0:
            raise ValueError(f"latent_noise must be >= 0, got {self.latent_noise}")
        if self.optimizer not in ("adam_noam", "adam_fixed"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# step counts: desk-scale defaults and the published schedule
STEP_PRESETS = {
    "desk": {"pretrain": 2000, "gan_refine": 0, "control": 1000},
    "paper": {"pretrain": 200_000, "gan_refine": 200_000, "control": 50_000},
}


def default_plans(preset: str = "desk") -> list[TrainingStagePlan]:
    steps = STEP_PRESETS[preset]
    return [
        TrainingStagePlan("pretrain", steps["pretrain"], optimizer="adam_noam", lr=2e-3, warmup=400,
                          latent_noise=1.0),
        TrainingStagePlan("gan_refine", steps["gan_refine"], optimizer="adam_fixed", lr=1e-3),
        TrainingStagePlan("control", steps["control"], optimizer="adam_fixed", lr=1e-3),
    ]


def noam_factor(step: int, warmup: int) -> float:
    """Noam schedule normalised to peak 1.0 at ``warmup``."""
    step = max(step, 1)
    return min(step / warmup, math.sqrt(warmup / step))


# --- data ------------------------------------------------------------------------


class TrainingData:
    """One corpus split held in memory as tensors."""

    def __init__(self, corpus: Corpus, split: str = "train"):
        recs = corpus.split(split)
        if not recs:
            raise ValueError(f"corpus split {split!r} is empty")
        self.records = recs
        self.mels = [torch.from_numpy(corpus.mel(r)) for r in recs]
        self.tokens = [r["tokens"] for r in recs]
        self.durations = [torch.tensor(r["durations"]) for r in recs]
        pe = [variance_targets(m.numpy(), r["durations"]) for m, r in zip(self.mels, recs)]
        self.pitch = [torch.from_numpy(p) for p, _ in pe]
        self.energy = [torch.from_numpy(e) for _, e in pe]
        self.labels = torch.tensor([[r["label"][d] for d in DIM_IDS] for r in recs], dtype=torch.float32)
        by_spk: dict[str, list[int]] = {}
        for i, r in enumerate(recs):
            by_spk.setdefault(r["speaker_id"], []).append(i)
        self.by_speaker = by_spk
        self.speaker_of = [r["speaker_id"] for r in recs]

    def __len__(self):
        return len(self.records)

    def reference_for(self, i: int, rng: np.random.Generator) -> int:
        """Another utterance of the same speaker (itself if it is the only one)."""
        pool = self.by_speaker[self.speaker_of[i]]
        if len(pool) == 1:
            return i
        j = i
        while j == i:
            j = pool[int(rng.integers(len(pool)))]
        return j

    def batch(self, idx: Iterable[int], ref_idx: Iterable[int], ref_starts: Iterable[int] | None = None,
              ref_crop: int | None = None) -> dict:
        idx, ref_idx = list(idx), list(ref_idx)
        tokens, token_mask = pad_tokens([self.tokens[i] for i in idx])
        mel, mel_len = pad_batch([self.mels[i] for i in idx])
        refs = [self.mels[j] for j in ref_idx]
        if ref_crop is not None:
            refs = [r[s : s + ref_crop] for r, s in zip(refs, ref_starts)]
        ref_mel, ref_len = pad_batch(refs)
        N = tokens.shape[1]

        def pad_tok(seq):
            out = torch.zeros(len(idx), N, dtype=seq[0].dtype)
            for b, s in enumerate(seq):
                out[b, : len(s)] = s
            return out

        return {
            "idx": idx,
            "ref_idx": ref_idx,
            "tokens": tokens,
            "token_mask": token_mask,
            "durations": pad_tok([self.durations[i] for i in idx]),
            "pitch": pad_tok([self.pitch[i] for i in idx]),
            "energy": pad_tok([self.energy[i] for i in idx]),
            "mel": mel,
            "frame_mask": torch.arange(mel.shape[1]).unsqueeze(0) < mel_len.unsqueeze(1),
            "ref_mel": ref_mel,
            "ref_lengths": ref_len,
            "impression": self.labels[idx],
        }


def sample_batch(data: TrainingData, rng: np.random.Generator, batch_size: int,
                 ref_crop: int | None = None) -> dict:
    """Random utterances, each paired with another utterance of its speaker as reference.

    With ``ref_crop`` the references are random windows of one common length,
    at most ``ref_crop`` frames; equal lengths let the recurrent encoder skip
    sequence packing, which dominates step time otherwise.
    """
    idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
    refs = [data.reference_for(int(i), rng) for i in idx]
    starts = None
    if ref_crop is not None:
        ref_crop = min([ref_crop] + [data.mels[j].shape[0] for j in refs])
        starts = [int(rng.integers(data.mels[j].shape[0] - ref_crop + 1)) for j in refs]
    return data.batch([int(i) for i in idx], refs, starts, ref_crop)


# --- stage runner ---------------------------------------------------------------------


def freeze_for(model: ImpressionTTS, trainable: frozenset[str]) -> list[torch.nn.Parameter]:
    params = []
    for ns in ("frontend", "speaker_encoder", "stl", "backbone", "control", "discriminator"):
        mod = model.namespace(ns)
        if mod is None:
            continue
        on = ns in trainable
        mod.train(on)
        for p in mod.parameters():
            p.requires_grad_(on)
            if on:
                params.append(p)
    model.frontend.eval()
    return params


def _check_order(model: ImpressionTTS | None, stage: str) -> None:
    done = [] if model is None else model.stages_completed
    if stage in ("gan_refine", "control") and "pretrain" not in done:
        raise StageOrderViolation(f"stage {stage!r} requires a pretrained backbone checkpoint")


def prepare_model(plan: TrainingStagePlan, ckpt_in: str | Path | None, model_cfg: ModelConfig | None,
                  control_cfg: ControlConfig | None, seed: int) -> ImpressionTTS:
    torch.manual_seed(seed)
    if ckpt_in is not None and Path(ckpt_in).exists():
        model, _ = load_checkpoint(ckpt_in)
    elif plan.stage == "pretrain":
        model = ImpressionTTS(model_cfg)
    else:
        raise StageOrderViolation(f"stage {plan.stage!r} requires a checkpoint, none found at {ckpt_in}")
    _check_order(model, plan.stage)
    if plan.stage == "control" and model.control is None:
        torch.manual_seed(seed)
        model.add_control(control_cfg)
    if plan.stage == "gan_refine" and model.discriminator is None:
        torch.manual_seed(seed)
        model.add_discriminator()
    return model


@torch.no_grad()
def cached_latents(model: ImpressionTTS, data: TrainingData, chunk: int = 64) -> Tensor:
    """Eval-mode latent x of every utterance; valid while the encoder is frozen."""
    model.speaker_encoder.eval()
    out = []
    for s in range(0, len(data), chunk):
        mel, lens = pad_batch(data.mels[s : s + chunk])
        out.append(model.embed_reference(mel, lens))
    return torch.cat(out)


def run_stage(model: ImpressionTTS, plan: TrainingStagePlan, data: TrainingData, seed: int,
              gan_weight: float = 1.0, progress: bool = False) -> list[dict]:
    """Train ``model`` in place for ``plan.steps`` steps; returns per-step metrics."""
    params = freeze_for(model, plan.trainable_namespaces)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, STAGES.index(plan.stage)])
    metrics: list[dict] = []
    if plan.steps == 0:
        return metrics

    disc = model.discriminator
    gen_params = [p for p in params if disc is None or all(p is not q for q in disc.parameters())]
    opt = torch.optim.Adam(gen_params, lr=plan.lr, betas=(0.9, 0.98), eps=1e-9)
    opt_d = None
    if plan.stage == "gan_refine":
        opt_d = torch.optim.Adam(disc.parameters(), lr=plan.lr, betas=(0.5, 0.9))

    latents = cached_latents(model, data) if plan.stage == "control" else None
    cfg = model.control.cfg if model.control is not None else None

    for step in range(1, plan.steps + 1):
        lr = plan.lr * (noam_factor(step, plan.warmup) if plan.optimizer == "adam_noam" else 1.0)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = sample_batch(data, rng, plan.batch_size, plan.ref_crop)
        row = {"stage": plan.stage, "step": step, "lr": lr}

        if plan.stage == "control":
            x = perturb_latent(latents[batch["ref_idx"]], plan.latent_noise)
            h, p_x = model.control(x, batch["impression"])
            out = model.backbone(batch["tokens"], batch["token_mask"], model.stl(h),
                                 durations=batch["durations"], pitch=batch["pitch"], energy=batch["energy"])
        else:
            out = model(batch, latent_noise=plan.latent_noise)
            p_x = None
        losses = compute_losses(out, batch)
        total = losses["total"]
        if plan.stage == "control":
            adv = model.control.adversary_loss(p_x, batch["impression"])
            total = control_loss(total, adv, cfg)
            row["adv"] = float(adv.detach())
        if disc is not None:
            d_fake = disc(out["mel"])
            g_adv = torch.mean((d_fake - 1.0) ** 2)
            total = total + gan_weight * g_adv
            row["g_adv"] = float(g_adv.detach())

        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        if opt_d is not None:
            ls = lsgan_losses(disc(batch["mel"]), disc(out["mel"].detach()))
            opt_d.zero_grad(set_to_none=True)
            (ls["d_real"] + ls["d_fake"]).backward()
            opt_d.step()
            row["d_real"] = float(ls["d_real"].detach())
            row["d_fake"] = float(ls["d_fake"].detach())

        for k, v in losses.items():
            row[k] = float(v.detach())
        row["objective"] = float(total.detach())
        metrics.append(row)
        if progress and (step % 100 == 0 or step == 1):
            log.info("%s step %d total %.4f", plan.stage, step, row["objective"])

    if plan.stage not in model.stages_completed:
        model.stages_completed.append(plan.stage)
    freeze_for(model, frozenset())
    return metrics


def gan_refine_step(model: ImpressionTTS, opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer,
                    batch: dict, gan_weight: float = 1.0) -> dict[str, float]:
    """One generator and one discriminator update with least-squares GAN losses."""
    disc = model.discriminator
    out = model(batch)
    recon = compute_losses(out, batch)["total"]
    g_adv = torch.mean((disc(out["mel"]) - 1.0) ** 2)
    opt_g.zero_grad(set_to_none=True)
    (recon + gan_weight * g_adv).backward()
    opt_g.step()
    ls = lsgan_losses(disc(batch["mel"]), disc(out["mel"].detach()))
    opt_d.zero_grad(set_to_none=True)
    (ls["d_real"] + ls["d_fake"]).backward()
    opt_d.step()
    return {k: float(t.detach()) for k, t in
            (("recon", recon), ("g_adv", g_adv), ("d_real", ls["d_real"]), ("d_fake", ls["d_fake"]))}


METRIC_COLUMNS = ("stage", "step", "lr", "mel", "duration", "pitch", "energy", "total", "adv",
                  "g_adv", "d_real", "d_fake", "objective")


def write_metrics(path: str | Path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def train_stage(plan: TrainingStagePlan, corpus: Corpus, ckpt_in: str | Path | None, ckpt_out: str | Path,
                model_cfg: ModelConfig | None = None, control_cfg: ControlConfig | None = None,
                seed: int = 0, metrics_path: str | Path | None = None, progress: bool = False) -> list[dict]:
    """Load (or create), train one stage, save. Returns per-step metrics.

    A zero-step plan is a no-op: the input checkpoint is passed through
    byte for byte.
    """
    if plan.steps == 0 and plan.stage != "pretrain":
        if ckpt_in is None or not Path(ckpt_in).exists():
            raise StageOrderViolation(f"stage {plan.stage!r} requires a checkpoint, none found at {ckpt_in}")
        model, _ = load_checkpoint(ckpt_in)
        _check_order(model, plan.stage)
        if Path(ckpt_in).resolve() != Path(ckpt_out).resolve():
            Path(ckpt_out).write_bytes(Path(ckpt_in).read_bytes())
        if metrics_path is not None:
            write_metrics(metrics_path, [])
        return []
    model = prepare_model(plan, ckpt_in, model_cfg, control_cfg, seed)
    data = TrainingData(corpus, "train")
    metrics = run_stage(model, plan, data, seed, progress=progress)
    if plan.stage not in model.stages_completed:
        model.stages_completed.append(plan.stage)
    save_checkpoint(model, ckpt_out, extra={"rate_mean": corpus.meta["rate_mean"],
                                            "rate_std": corpus.meta["rate_std"]})
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return metrics
