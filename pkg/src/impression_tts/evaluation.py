"""Objective evaluation: impression sweeps, two-dimension grids and speaker similarity.

Every cell of a sweep synthesizes the same seeded sentence list (a paired
design), so differences between cells come from the impression vector alone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402
from scipy.stats import spearmanr  # noqa: E402

from .archive import load_namespace, module_arrays, read_archive, write_archive  # noqa: E402
from .corpus import Corpus, eval_sentences, speaker_of  # noqa: E402
from .encoder import FrontendStub, UtteranceEncoder, pad_batch  # noqa: E402
from .errors import NotInitialized  # noqa: E402
from .estimator import EstimatorModel, estimate_batch  # noqa: E402
from .impression import DIM_IDS, ImpressionVector, modulate  # noqa: E402
from .model import ImpressionTTS  # noqa: E402

log = logging.getLogger(__name__)

DEFAULT_DELTAS: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
SIMILARITY_LEVELS: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
PNG_METADATA = {"Software": None}


@dataclass
class SweepResult:
    """Estimated scores over a modulation grid.

    ``samples`` has shape (n_out, *grid, n_utts): one slice per swept
    dimension, holding that dimension's estimated score for every sentence.
    A single-dimension sweep has a 1-D grid, a pair sweep a 2-D grid indexed
    [delta of dims[0], delta of dims[1]].
    """

    dims: tuple[str, ...]
    deltas: tuple[float, ...]
    samples: np.ndarray
    speaker_id: str = ""

    @property
    def means(self) -> np.ndarray:
        return self.samples.mean(axis=-1)

    @property
    def stds(self) -> np.ndarray:
        return self.samples.std(axis=-1)

    @property
    def n(self) -> int:
        return int(self.samples.shape[-1])

    @property
    def kind(self) -> str:
        return "single" if len(self.dims) == 1 else "pair"


def _synth_and_estimate(model: ImpressionTTS, estimator: EstimatorModel, sentences: Sequence[Sequence[int]],
                        reference_mel: np.ndarray, v: ImpressionVector) -> list[ImpressionVector]:
    mels = model.synthesize_batch(sentences, reference_mel, v)
    return estimate_batch(estimator, mels, [len(s) for s in sentences])


def sweep_single(model: ImpressionTTS, estimator: EstimatorModel, reference_mel: np.ndarray,
                 base_v: ImpressionVector, dim: str, deltas: Sequence[float] = DEFAULT_DELTAS,
                 n_utts: int = 20, seed: int = 0, speaker_id: str = "") -> SweepResult:
    """Modulate one dimension over ``deltas`` and estimate that dimension on the outputs."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    if dim not in DIM_IDS:
        raise KeyError(dim)
    sentences = eval_sentences(n_utts, seed)
    samples = np.zeros((1, len(deltas), n_utts))
    for i, d in enumerate(deltas):
        est = _synth_and_estimate(model, estimator, sentences, reference_mel, modulate(base_v, {dim: d}))
        samples[0, i] = [e[dim] for e in est]
    return SweepResult((dim,), tuple(float(d) for d in deltas), samples, speaker_id)


def sweep_pair(model: ImpressionTTS, estimator: EstimatorModel, reference_mel: np.ndarray,
               base_v: ImpressionVector, dims: tuple[str, str], deltas: Sequence[float] = DEFAULT_DELTAS,
               n_utts: int = 20, seed: int = 0, speaker_id: str = "") -> SweepResult:
    """Modulate two dimensions jointly over ``deltas`` x ``deltas``."""
    d1, d2 = dims
    if d1 == d2:
        raise ValueError("sweep_pair needs two different dimensions")
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    sentences = eval_sentences(n_utts, seed)
    L = len(deltas)
    samples = np.zeros((2, L, L, n_utts))
    for i, a in enumerate(deltas):
        for j, b in enumerate(deltas):
            est = _synth_and_estimate(model, estimator, sentences, reference_mel, modulate(base_v, {d1: a, d2: b}))
            samples[0, i, j] = [e[d1] for e in est]
            samples[1, i, j] = [e[d2] for e in est]
    return SweepResult((d1, d2), tuple(float(d) for d in deltas), samples, speaker_id)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; 0.0 when either side is constant."""
    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return 0.0
    return float(spearmanr(x, y).statistic)


def sweep_trend(result: SweepResult) -> float:
    """Rank correlation between the deltas and the mean estimated score of a single sweep."""
    return spearman(result.deltas, result.means[0])


def pair_trends(result: SweepResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-line rank correlations of a pair sweep.

    Returns (rho1, rho2): rho1[j] is the trend of dims[0]'s score along its
    own delta with dims[1]'s delta fixed at index j; rho2[i] likewise for
    dims[1] with dims[0]'s delta fixed at index i.
    """
    m = result.means
    rho1 = np.array([spearman(result.deltas, m[0][:, j]) for j in range(m.shape[2])])
    rho2 = np.array([spearman(result.deltas, m[1][i, :]) for i in range(m.shape[1])])
    return rho1, rho2


def select_references(corpus: Corpus, n: int = 2, split: str = "test") -> list[dict]:
    """Reference utterances of ``n`` held-out speakers, alternating gender tags when possible.

    Each speaker contributes its first utterance (by id).
    """
    speakers = corpus.speakers(split)
    if len(speakers) < n:
        raise ValueError(f"split {split!r} has {len(speakers)} speakers, {n} requested")
    by_tag: dict[str, list[str]] = {}
    for s in speakers:
        by_tag.setdefault(speaker_of(corpus, s).gender_tag, []).append(s)
    chosen: list[str] = []
    queues = [by_tag[t] for t in sorted(by_tag)]
    while len(chosen) < n:
        for q in queues:
            if q and len(chosen) < n:
                chosen.append(q.pop(0))
    recs = corpus.split(split)
    return [min((r for r in recs if r["speaker_id"] == s), key=lambda r: r["utt_id"]) for s in chosen]


# --- disentanglement probe ------------------------------------------------------------------------


@torch.no_grad()
def latent_projections(model: ImpressionTTS, corpus: Corpus, records: Sequence[dict], chunk: int = 64) -> np.ndarray:
    """Eval-mode p_x of each record's full utterance as reference."""
    if model.control is None:
        raise NotInitialized("the model has no control module")
    model.eval()
    out = []
    for s in range(0, len(records), chunk):
        mels, lens = pad_batch([torch.from_numpy(corpus.mel(r)) for r in records[s : s + chunk]])
        out.append(model.control.project_latent(model.embed_reference(mels, lens)).numpy())
    return np.concatenate(out).astype(np.float64)


def ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Closed-form ridge weights (intercept unpenalized) for standardized features."""
    X = np.hstack([features, np.ones((features.shape[0], 1))])
    reg = alpha * np.eye(X.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(X.T @ X + reg, X.T @ targets)


def probe_mse(model: ImpressionTTS, corpus: Corpus, alpha: float = 1.0) -> float:
    """Held-out MSE of a fresh linear probe predicting the impression vector from p_x.

    The probe is fitted on train-split speakers and scored on val and test
    speakers, so it measures impression information that generalizes across
    speakers rather than speaker memorization.
    """
    train = corpus.split("train")
    held = corpus.split("val") + corpus.split("test")
    if not train or not held:
        raise ValueError("probe needs non-empty train and held-out splits")
    f_tr, f_te = latent_projections(model, corpus, train), latent_projections(model, corpus, held)
    mu, sd = f_tr.mean(0), f_tr.std(0) + 1e-8
    y_tr = np.array([[r["label"][d] for d in DIM_IDS] for r in train])
    y_te = np.array([[r["label"][d] for d in DIM_IDS] for r in held])
    w = ridge_fit((f_tr - mu) / sd, y_tr, alpha)
    pred = np.hstack([(f_te - mu) / sd, np.ones((len(held), 1))]) @ w
    return float(np.mean((pred - y_te) ** 2))


# --- speaker similarity ---------------------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = math.sqrt(float(a @ a)) * math.sqrt(float(b @ b))
    if denom == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


class SpeakerEmbedder(nn.Module):
    """Toy speaker-verification embedder trained by speaker classification.

    Trained on its own synthetic speakers, never on the TTS training data,
    so it is an independent judge of speaker identity.
    """

    def __init__(self, n_speakers: int, emb_dim: int = 128, rnn_hidden: int = 64, frontend_seed: int = 4321):
        super().__init__()
        self.frontend = FrontendStub(seed=frontend_seed)
        self.encoder = UtteranceEncoder(self.frontend.n_layers, self.frontend.dim, rnn_hidden, emb_dim)
        self.head = nn.Linear(emb_dim, n_speakers)
        self.trained = False
        self.config = {"n_speakers": n_speakers, "emb_dim": emb_dim, "rnn_hidden": rnn_hidden,
                       "frontend_seed": frontend_seed}

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.frontend(mel, lengths), lengths)

    @torch.no_grad()
    def embed(self, mels: Sequence[np.ndarray], chunk: int = 64) -> np.ndarray:
        if not self.trained:
            raise NotInitialized("speaker embedder has not been trained or loaded")
        self.eval()
        order = sorted(range(len(mels)), key=lambda i: mels[i].shape[0])
        out = np.zeros((len(mels), self.config["emb_dim"]))
        for s in range(0, len(order), chunk):
            idx = order[s : s + chunk]
            mel, lens = pad_batch([torch.from_numpy(np.asarray(mels[i], dtype=np.float32)) for i in idx])
            out[idx] = self(mel, lens).double().numpy()
        return out


def train_embedder(corpus: Corpus, epochs: int = 8, seed: int = 0, crop: int = 80, batch_size: int = 32,
                   lr: float = 2e-3) -> SpeakerEmbedder:
    """Speaker classification over every utterance of ``corpus``."""
    speakers = sorted({r["speaker_id"] for r in corpus.records})
    label = {s: i for i, s in enumerate(speakers)}
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 23])
    model = SpeakerEmbedder(len(speakers))
    mels = [corpus.mel(r) for r in corpus.records]
    y = torch.tensor([label[r["speaker_id"]] for r in corpus.records])
    opt = torch.optim.Adam([p for n, p in model.named_parameters()], lr=lr)
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(mels))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            c = min([crop] + [mels[i].shape[0] for i in idx])
            segs = []
            for i in idx:
                start = int(rng.integers(mels[i].shape[0] - c + 1))
                segs.append(torch.from_numpy(mels[i][start : start + c]))
            mel = torch.stack(segs)
            logits = model.head(model(mel, torch.full((len(idx),), c, dtype=torch.long)))
            loss = nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.info("embedder epoch %d loss %.4f", epoch + 1, total / len(order))
    model.trained = True
    return model


def save_embedder(model: SpeakerEmbedder, path: str | Path) -> None:
    arrays = module_arrays({"frontend": model.frontend, "embedder": model.encoder, "head": model.head})
    write_archive(path, arrays, {"kind": "embedder", "config": model.config})


def load_embedder(path: str | Path) -> SpeakerEmbedder:
    path = Path(path)
    if not path.exists():
        raise NotInitialized(f"embedder checkpoint not found: {path}")
    arrays, meta = read_archive(path)
    model = SpeakerEmbedder(**meta["config"])
    load_namespace(model.frontend, "frontend", arrays)
    load_namespace(model.encoder, "embedder", arrays)
    load_namespace(model.head, "head", arrays)
    model.trained = True
    return model


@dataclass
class SimilarityReport:
    """Cosine similarities to one reference utterance.

    ``modulated[level]`` pools every dimension modulated by ``level``;
    ``same_speaker`` compares other recordings of the reference speaker,
    ``different_speaker`` recordings of other speakers.
    """

    speaker_id: str
    reference_utt: str
    modulated: dict[float, np.ndarray] = field(default_factory=dict)
    same_speaker: np.ndarray = field(default_factory=lambda: np.zeros(0))
    different_speaker: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def median_at(self, level_abs: float) -> float:
        vals = np.concatenate([v for k, v in self.modulated.items() if abs(k) == level_abs])
        return float(np.median(vals))

    def different_percentile(self, q: float = 95.0) -> float:
        return float(np.percentile(self.different_speaker, q))


def speaker_similarity(model: ImpressionTTS, embedder: SpeakerEmbedder, reference: dict, corpus: Corpus,
                       base_v: ImpressionVector, levels: Sequence[float] = SIMILARITY_LEVELS,
                       dims: Sequence[str] = DIM_IDS, n_utts: int = 5, pool_splits: Sequence[str] = ("val", "test"),
                       seed: int = 0) -> SimilarityReport:
    """Similarity of modulated outputs to the reference, with recorded-speech baselines.

    ``reference`` is a corpus record. Baselines draw on the recordings of
    ``pool_splits``; the reference utterance itself is never compared.
    """
    ref_mel = corpus.mel(reference)
    ref_emb = embedder.embed([ref_mel])[0]
    sentences = eval_sentences(n_utts, seed)
    report = SimilarityReport(reference["speaker_id"], reference["utt_id"])
    for level in levels:
        mels = []
        for d in dims:
            mels.extend(model.synthesize_batch(sentences, ref_mel, modulate(base_v, {d: level})))
            if level == 0:
                break  # every dimension gives the same vector at level 0
        report.modulated[float(level)] = np.array([cosine(e, ref_emb) for e in embedder.embed(mels)])
    pool = [r for s in pool_splits for r in corpus.split(s) if r["utt_id"] != reference["utt_id"]]
    same = [r for r in pool if r["speaker_id"] == reference["speaker_id"]]
    diff = [r for r in pool if r["speaker_id"] != reference["speaker_id"]]
    for name, recs in (("same_speaker", same), ("different_speaker", diff)):
        embs = embedder.embed([corpus.mel(r) for r in recs]) if recs else np.zeros((0, 1))
        setattr(report, name, np.array([cosine(e, ref_emb) for e in embs]))
    return report


# --- reports -----------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def _save_fig(fig, path: Path) -> None:
    try:
        fig.savefig(path, format="png", metadata=PNG_METADATA, dpi=80)
    except OSError as exc:
        raise OSError(f"cannot write plot {path}: {exc}") from exc
    finally:
        plt.close(fig)


def report_stem(result: SweepResult | SimilarityReport) -> str:
    if isinstance(result, SimilarityReport):
        return "similarity"
    return "sweep_" + "".join(result.dims)


def emit_report(result: SweepResult | SimilarityReport, out_dir: str | Path) -> list[Path]:
    """Write the CSV table and PNG plot of one result; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    stem = report_stem(result)
    csv_path, png_path = out / f"{stem}.csv", out / f"{stem}.png"
    if isinstance(result, SimilarityReport):
        _emit_similarity(result, csv_path, png_path)
    elif result.kind == "single":
        _emit_single(result, csv_path, png_path)
    else:
        _emit_pair(result, csv_path, png_path)
    return [csv_path, png_path]


def _emit_single(r: SweepResult, csv_path: Path, png_path: Path) -> None:
    means, stds = r.means[0], r.stds[0]
    _write_csv(csv_path, ("delta", "mean", "std", "n"),
               [(_fmt(d), _fmt(m), _fmt(s), r.n) for d, m, s in zip(r.deltas, means, stds)])
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(r.deltas, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel(f"modulation of {r.dims[0]}")
    ax.set_ylabel(f"estimated {r.dims[0]}")
    fig.tight_layout()
    _save_fig(fig, png_path)


def _emit_pair(r: SweepResult, csv_path: Path, png_path: Path) -> None:
    d1, d2 = r.dims
    m, s = r.means, r.stds
    rows = []
    for i, a in enumerate(r.deltas):
        for j, b in enumerate(r.deltas):
            rows.append((_fmt(a), _fmt(b), _fmt(m[0, i, j]), _fmt(s[0, i, j]), _fmt(m[1, i, j]), _fmt(s[1, i, j]), r.n))
    _write_csv(csv_path, (f"delta_{d1}", f"delta_{d2}", f"mean_{d1}", f"std_{d1}", f"mean_{d2}", f"std_{d2}", "n"),
               rows)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    ticks = range(len(r.deltas))
    labels = [f"{d:g}" for d in r.deltas]
    for k, ax in enumerate(axes):
        im = ax.imshow(m[k], origin="lower", cmap="viridis")
        ax.set_title(f"estimated {r.dims[k]}")
        ax.set_xticks(ticks, labels)
        ax.set_yticks(ticks, labels)
        ax.set_xlabel(f"modulation of {d2}")
        ax.set_ylabel(f"modulation of {d1}")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save_fig(fig, png_path)


def _emit_similarity(r: SimilarityReport, csv_path: Path, png_path: Path) -> None:
    rows = []
    groups = [(f"{lvl:g}", "modulated", v) for lvl, v in sorted(r.modulated.items())]
    groups += [("", "same_speaker", r.same_speaker), ("", "different_speaker", r.different_speaker)]
    for level, name, vals in groups:
        rows.extend((name, level, i, _fmt(c)) for i, c in enumerate(vals))
    _write_csv(csv_path, ("group", "level", "index", "cosine"), rows)
    fig, ax = plt.subplots(figsize=(6, 3))
    data = [v for _, _, v in groups]
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(data) + 1), [lvl or name.split("_")[0] for lvl, name, _ in groups])
    ax.set_ylabel("cosine similarity")
    fig.tight_layout()
    _save_fig(fig, png_path)


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


__all__ = [
    "DEFAULT_DELTAS",
    "SweepResult",
    "select_references",
    "SimilarityReport",
    "sweep_single",
    "sweep_pair",
    "spearman",
    "sweep_trend",
    "pair_trends",
    "cosine",
    "latent_projections",
    "ridge_fit",
    "probe_mse",
    "SpeakerEmbedder",
    "train_embedder",
    "save_embedder",
    "load_embedder",
    "speaker_similarity",
    "emit_report",
    "read_sweep_csv",
]
