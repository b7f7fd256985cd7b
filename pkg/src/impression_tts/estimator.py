"""Impression estimator: feature stack -> BiLSTM -> attention pool -> dims A-J.

Dim K is never regressed. It is the speaking rate of the utterance,
z-scored with the corpus rate statistics.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .archive import load_namespace, module_arrays, read_archive, write_archive
from .corpus import Corpus, moras_per_second, rate_to_z
from .encoder import FrontendStub, UtteranceEncoder, pad_batch
from .errors import NotInitialized, ShapeError, SplitLeakage
from .impression import DIM_IDS, LIKERT_MID, ImpressionVector, standardize_speech_rates

log = logging.getLogger(__name__)

N_RATED = 10


@dataclass
class EstimatorConfig:
    n_ssl_layers: int = 5
    ssl_dim: int = 96
    frontend_seed: int = 1234
    rnn_hidden: int = 128
    lr: float = 3e-3
    batch_size: int = 32
    train_crop: int = 80
    # Beta(a, a) mixup between crops of different utterances; 0 disables it.
    # A positive spread s stretches the mixing weight to [-s, 1 + s].
    mixup_alpha: float = 1.0
    mixup_spread: float = 0.5


class EstimatorModel(nn.Module):
    def __init__(self, cfg: EstimatorConfig | None = None, rate_mean: float = 0.0, rate_std: float = 1.0):
        super().__init__()
        self.cfg = cfg or EstimatorConfig()
        c = self.cfg
        self.frontend = FrontendStub(c.n_ssl_layers, c.ssl_dim, seed=c.frontend_seed)
        self.encoder = UtteranceEncoder(c.n_ssl_layers, c.ssl_dim, c.rnn_hidden, out_dim=N_RATED)
        self.rate_mean = rate_mean
        self.rate_std = rate_std
        self.trained = False

    def forward(self, mel: Tensor, lengths: Tensor) -> Tensor:
        """(B, T, 80) mels -> (B, 10) rated-dim estimates on the 1-7 scale."""
        return self.encoder(self.frontend(mel, lengths), lengths) + LIKERT_MID

    @torch.no_grad()
    def predict_rated(self, mels: Sequence[np.ndarray], chunk: int = 64) -> np.ndarray:
        self.eval()
        # equal-length groups avoid sequence packing
        order = sorted(range(len(mels)), key=lambda i: mels[i].shape[0])
        res = np.zeros((len(mels), N_RATED))
        for s in range(0, len(order), chunk):
            idx = order[s : s + chunk]
            mel, lens = pad_batch([torch.from_numpy(np.asarray(mels[i], dtype=np.float32)) for i in idx])
            res[idx] = self(mel, lens).double().numpy()
        return res

    def rate_z(self, n_moras: int, n_frames: int) -> float:
        return rate_to_z(moras_per_second(n_moras, n_frames), self.rate_mean, self.rate_std)


def estimate(model: EstimatorModel, mel: np.ndarray, n_moras: int | None = None) -> ImpressionVector:
    """Impression vector of one utterance.

    K comes from the speaking rate when the mora count is known; otherwise
    it is reported as the corpus mean (0.0).
    """
    return estimate_batch(model, [mel], None if n_moras is None else [n_moras])[0]


def estimate_batch(model: EstimatorModel, mels: Sequence[np.ndarray],
                   n_moras: Sequence[int] | None = None) -> list[ImpressionVector]:
    if not model.trained:
        raise NotInitialized("impression estimator has not been trained or loaded")
    if len(mels) == 0:
        return []
    rated = model.predict_rated(mels)
    out = []
    for i, m in enumerate(mels):
        k = 0.0 if n_moras is None else model.rate_z(n_moras[i], m.shape[0])
        out.append(ImpressionVector.from_array(np.append(rated[i], k)))
    return out


def rmse(pred: Sequence, truth: Sequence) -> float:
    """Root mean squared error over every element of every item."""
    p = np.asarray([np.asarray(x.scores if isinstance(x, ImpressionVector) else x, dtype=np.float64) for x in pred])
    t = np.asarray([np.asarray(x.scores if isinstance(x, ImpressionVector) else x, dtype=np.float64) for x in truth])
    if len(p) == 0 or p.shape != t.shape:
        raise ShapeError(f"rmse needs equal non-empty shapes, got {p.shape} and {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# --- training --------------------------------------------------------------------


@dataclass
class EstimatorReport:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    selected_epoch: int = -1
    test_rmse: float = float("nan")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("epoch", "train_mse", "val_mse", "selected"))
            for e, (tr, va) in enumerate(zip(self.train_mse, self.val_mse), start=1):
                w.writerow((e, f"{tr:.9g}", f"{va:.9g}", int(e == self.selected_epoch)))
            w.writerow(("test_rmse", f"{self.test_rmse:.9g}", "", ""))


def _rated_targets(records: Sequence[dict]) -> np.ndarray:
    return np.asarray([[r["label"][d] for d in DIM_IDS[:N_RATED]] for r in records], dtype=np.float64)


def check_disjoint(*splits: Sequence[dict]) -> None:
    seen: dict[str, int] = {}
    for i, recs in enumerate(splits):
        for spk in {r["speaker_id"] for r in recs}:
            if spk in seen and seen[spk] != i:
                raise SplitLeakage(f"speaker {spk} appears in more than one split")
            seen[spk] = i


def evaluate_mse(model: EstimatorModel, mels: Sequence[np.ndarray], targets: np.ndarray) -> float:
    pred = model.predict_rated(mels)
    return float(np.mean((pred - targets) ** 2))


def mixup(mel: Tensor, y: Tensor, rng: np.random.Generator, alpha: float,
          spread: float = 0.0) -> tuple[Tensor, Tensor]:
    """Blend every crop (and its target) with a random partner from the same batch."""
    lam = -spread + (1 + 2 * spread) * rng.beta(alpha, alpha, size=mel.shape[0])
    lam = torch.from_numpy(lam.astype(np.float32))
    perm = torch.from_numpy(rng.permutation(mel.shape[0]))
    mixed = lam.view(-1, 1, 1) * mel + (1 - lam.view(-1, 1, 1)) * mel[perm]
    return mixed, lam.view(-1, 1) * y + (1 - lam.view(-1, 1)) * y[perm]


def train_estimator(corpus: Corpus, epochs: int = 30, seed: int = 0, cfg: EstimatorConfig | None = None,
                    train_split: str = "train", val_split: str = "val", test_split: str | None = "test",
                    progress: bool = False) -> tuple[EstimatorModel, EstimatorReport]:
    """Fit on the train split, keep the epoch with the lowest validation MSE, report test RMSE."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    cfg = cfg or EstimatorConfig()
    train, val = corpus.split(train_split), corpus.split(val_split)
    test = corpus.split(test_split) if test_split else []
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    check_disjoint(train, val, test)

    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 17])
    model = EstimatorModel(cfg, *corpus.rate_stats)
    train_mels = [corpus.mel(r) for r in train]
    train_y = torch.tensor(_rated_targets(train), dtype=torch.float32)
    val_mels = [corpus.mel(r) for r in val]
    val_y = _rated_targets(val)
    opt = torch.optim.Adam(model.encoder.parameters(), lr=cfg.lr)

    report = EstimatorReport()
    best_state, best_val = None, math.inf
    for epoch in range(1, epochs + 1):
        model.train()
        model.frontend.eval()
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            crop = min([cfg.train_crop] + [train_mels[i].shape[0] for i in idx])
            segs = []
            for i in idx:
                start = int(rng.integers(train_mels[i].shape[0] - crop + 1))
                segs.append(torch.from_numpy(train_mels[i][start : start + crop]))
            mel = torch.stack(segs)
            y = train_y[idx]
            if cfg.mixup_alpha > 0:
                mel, y = mixup(mel, y, rng, cfg.mixup_alpha, cfg.mixup_spread)
            lens = torch.full((len(idx),), crop, dtype=torch.long)
            loss = torch.mean((model(mel, lens) - y) ** 2)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()) * len(idx))
        report.train_mse.append(sum(losses) / len(order))
        v = evaluate_mse(model, val_mels, val_y)
        report.val_mse.append(v)
        if v < best_val:
            best_val, best_state = v, copy.deepcopy(model.encoder.state_dict())
            report.selected_epoch = epoch
        if progress:
            log.info("estimator epoch %d train %.4f val %.4f", epoch, report.train_mse[-1], v)

    model.encoder.load_state_dict(best_state)
    model.trained = True
    if test:
        pred = model.predict_rated([corpus.mel(r) for r in test])
        report.test_rmse = rmse(pred, _rated_targets(test))
    return model, report


# --- auto-labeling ---------------------------------------------------------------------


def auto_label(model: EstimatorModel, records: Sequence[dict], mel_loader) -> list[dict]:
    """Attach estimated labels to every record.

    A-J come from the model; K is the speaking rate z-scored over the given
    records themselves.
    """
    if len(records) == 0:
        return []
    if not model.trained:
        raise NotInitialized("impression estimator has not been trained or loaded")
    rated = model.predict_rated([mel_loader(r) for r in records])
    rates = [r["moras_per_second"] for r in records]
    k = standardize_speech_rates(rates) if len(rates) > 1 else [0.0]
    out = []
    for r, a, z in zip(records, rated, k):
        new = dict(r)
        new["label"] = {d: round(float(x), 9) for d, x in zip(DIM_IDS, list(a) + [z])}
        out.append(new)
    return out


# --- persistence ---------------------------------------------------------------------


def save_estimator(model: EstimatorModel, path: str | Path, report: EstimatorReport | None = None) -> None:
    meta = {
        "kind": "estimator",
        "config": vars(model.cfg),
        "rate_mean": model.rate_mean,
        "rate_std": model.rate_std,
        "report": None if report is None else {
            "train_mse": report.train_mse, "val_mse": report.val_mse,
            "selected_epoch": report.selected_epoch, "test_rmse": report.test_rmse,
        },
    }
    write_archive(path, module_arrays({"frontend": model.frontend, "estimator": model.encoder}), meta)


def load_estimator(path: str | Path) -> tuple[EstimatorModel, dict]:
    path = Path(path)
    if not path.exists():
        raise NotInitialized(f"estimator checkpoint not found: {path}")
    arrays, meta = read_archive(path)
    model = EstimatorModel(EstimatorConfig(**meta["config"]), meta["rate_mean"], meta["rate_std"])
    load_namespace(model.frontend, "frontend", arrays)
    load_namespace(model.encoder, "estimator", arrays)
    model.trained = True
    return model, meta


__all__ = [
    "EstimatorConfig",
    "EstimatorModel",
    "EstimatorReport",
    "estimate",
    "estimate_batch",
    "rmse",
    "train_estimator",
    "auto_label",
    "save_estimator",
    "load_estimator",
]
