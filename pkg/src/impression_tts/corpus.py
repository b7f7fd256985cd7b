"""Deterministic oracle corpus with known impression factors.

Every utterance is a log-mel-like matrix built from a linear generator::

    mel[t] = template + sum_d (factor_d - 4) * basis_d + content[token(t)] + noise

Impression directions, speaker-identity directions and token content live in
mutually orthogonal subspaces of the 80 mel bins, so the Bayes-optimal
impression readout is a projection and every downstream claim has a
computable reference. Dim K (Slow-Fast) acts on token durations only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyContent, InsufficientSpeakers
from .impression import DIM_IDS, LIKERT_MID, ImpressionVector, standardize_speech_rates

N_MELS = 80
FRAME_SHIFT_MS = 10.0
N_RATED = 10
N_IDENTITY = 6
VOCAB_SIZE = 48
GLOBAL_SEED = 20240917

IDENTITY_SCALE = 1.5
CONTENT_SCALE = 0.6
RATE_COEF = 0.25
# global log-mel statistics used to normalize model inputs
MEL_MEAN = -4.5
MEL_STD = 1.5
MIN_TOKENS, MAX_TOKENS = 12, 20


@dataclass(frozen=True)
class GeneratorBasis:
    impression: np.ndarray  # (10, 80) orthonormal rows, dims A..J
    identity: np.ndarray  # (N_IDENTITY, 80)
    content: np.ndarray  # (VOCAB_SIZE, 80) token spectra
    base_durations: np.ndarray  # (VOCAB_SIZE,) frames at K = 0
    base_spectrum: np.ndarray  # (80,)


@lru_cache(maxsize=1)
def generator_basis() -> GeneratorBasis:
    rng = np.random.default_rng(GLOBAL_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((N_MELS, N_MELS)))
    q = q.T  # rows orthonormal
    imp = q[:N_RATED]
    ident = q[N_RATED : N_RATED + N_IDENTITY]
    rest = q[N_RATED + N_IDENTITY :]
    content = CONTENT_SCALE * rng.standard_normal((VOCAB_SIZE, rest.shape[0])) @ rest
    base_dur = rng.integers(3, 9, size=VOCAB_SIZE).astype(np.float64)
    freqs = np.linspace(0.0, 1.0, N_MELS)
    base = -4.0 + 2.0 * np.exp(-((freqs - 0.15) ** 2) / 0.02) - 2.0 * freqs
    return GeneratorBasis(imp, ident, content, base_dur, base)


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    template: np.ndarray
    factors: ImpressionVector
    gender_tag: str


@dataclass(frozen=True)
class SyntheticUtterance:
    utt_id: str
    speaker_id: str
    token_ids: tuple[int, ...]
    durations: tuple[int, ...]
    mel: np.ndarray
    moras_per_second: float
    label: ImpressionVector


def make_speaker(seed: int) -> SyntheticSpeaker:
    rng = np.random.default_rng([GLOBAL_SEED, 1, seed])
    basis = generator_basis()
    rated = rng.uniform(1.5, 6.5, size=N_RATED)
    rate_z = rng.uniform(-2.0, 2.0)
    z = IDENTITY_SCALE * rng.standard_normal(N_IDENTITY)
    template = basis.base_spectrum + z @ basis.identity
    factors = ImpressionVector(tuple(rated) + (rate_z,))
    gender = "f" if factors["B"] >= LIKERT_MID else "m"
    return SyntheticSpeaker(f"spk{seed:05d}", template, factors, gender)


def token_durations(token_ids: Sequence[int], rate_z: float) -> np.ndarray:
    """Frames per token; larger rate_z (faster) shortens every token."""
    base = generator_basis().base_durations[np.asarray(token_ids)]
    return np.maximum(1, np.rint(base * math.exp(-RATE_COEF * rate_z))).astype(np.int64)


def impression_offset(factors: ImpressionVector | np.ndarray) -> np.ndarray:
    f = factors.as_array() if isinstance(factors, ImpressionVector) else np.asarray(factors)
    return (f[:N_RATED] - LIKERT_MID) @ generator_basis().impression


def render_utterance(
    sp: SyntheticSpeaker,
    token_ids: Sequence[int],
    noise_sigma: float,
    seed: int,
    utt_id: str | None = None,
    factors: ImpressionVector | None = None,
) -> SyntheticUtterance:
    """Render one utterance; ``factors`` defaults to the speaker's mean impression."""
    if len(token_ids) == 0:
        raise EmptyContent("token_ids is empty")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    basis = generator_basis()
    factors = factors if factors is not None else sp.factors
    tokens = np.asarray(token_ids, dtype=np.int64)
    durations = token_durations(tokens, factors["K"])
    frame_tokens = np.repeat(tokens, durations)
    mel = sp.template + impression_offset(factors) + basis.content[frame_tokens]
    if noise_sigma > 0:
        rng = np.random.default_rng([GLOBAL_SEED, 2, seed])
        mel = mel + noise_sigma * rng.standard_normal(mel.shape)
    n_frames = int(durations.sum())
    mps = len(tokens) / (n_frames * FRAME_SHIFT_MS / 1000.0)
    return SyntheticUtterance(
        utt_id=utt_id or f"{sp.speaker_id}_s{seed}",
        speaker_id=sp.speaker_id,
        token_ids=tuple(int(t) for t in tokens),
        durations=tuple(int(d) for d in durations),
        mel=mel.astype(np.float32),
        moras_per_second=mps,
        label=factors,
    )


def random_sentence(rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
    return rng.integers(0, VOCAB_SIZE, size=n).tolist()


def eval_sentences(n: int, seed: int = 0) -> list[list[int]]:
    """Fixed sentence list shared by every cell of an evaluation sweep."""
    rng = np.random.default_rng([GLOBAL_SEED, 3, seed])
    return [random_sentence(rng) for _ in range(n)]


# --- mel file IO ---------------------------------------------------------


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(mel, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32-le", "frame_shift_ms": FRAME_SHIFT_MS}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def read_mel(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()


# --- corpus --------------------------------------------------------------


@dataclass
class Corpus:
    root: Path
    records: list[dict]
    meta: dict

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def speakers(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r["speaker_id"] for r in recs})

    def mel(self, rec: dict) -> np.ndarray:
        return read_mel(self.root / rec["mel_path"])

    @property
    def rate_stats(self) -> tuple[float, float]:
        return self.meta["rate_mean"], self.meta["rate_std"]


SPLIT_NAMES = ("train", "val", "test")


def allocate_speakers(n_speakers: int, ratios: Sequence[float]) -> list[int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if n_speakers < 3:
        raise InsufficientSpeakers(f"need at least 3 speakers, got {n_speakers}")
    raw = [r * n_speakers for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n_speakers - sum(counts)]:
        counts[i] += 1
    # every split with a positive ratio gets at least one speaker
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            if counts[donor] <= 1:
                raise InsufficientSpeakers(f"{n_speakers} speakers cannot fill splits {ratios}")
            counts[donor] -= 1
            counts[i] += 1
    return counts


def build_corpus(
    out_dir: str | Path,
    n_speakers: int = 40,
    utts_per_speaker: int = 50,
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
    noise_sigma: float = 0.1,
    seed: int = 0,
    speaker_seed_offset: int = 0,
) -> Corpus:
    """Generate speakers, render utterances to disk and write the manifest."""
    counts = allocate_speakers(n_speakers, split_ratios)
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)

    speaker_seeds = [speaker_seed_offset + seed * 100_000 + i for i in range(n_speakers)]
    order = np.random.default_rng([GLOBAL_SEED, 4, seed]).permutation(n_speakers)
    split_of: dict[int, str] = {}
    pos = 0
    for name, c in zip(SPLIT_NAMES, counts):
        for idx in order[pos : pos + c]:
            split_of[int(idx)] = name
        pos += c

    utts: list[tuple[str, SyntheticUtterance]] = []
    for i, sseed in enumerate(speaker_seeds):
        sp = make_speaker(sseed)
        for j in range(utts_per_speaker):
            utt_seed = int(np.random.SeedSequence([GLOBAL_SEED, seed, sseed, j]).generate_state(1)[0])
            tokens = random_sentence(np.random.default_rng(utt_seed))
            utt = render_utterance(sp, tokens, noise_sigma, utt_seed, utt_id=f"{sp.speaker_id}_{j:03d}")
            utts.append((split_of[i], utt))

    rates = [u.moras_per_second for _, u in utts]
    rate_z = standardize_speech_rates(rates)
    rate_arr = np.asarray(rates)
    rate_mean = float(rate_arr.mean())
    rate_std = float(np.sqrt(np.mean((rate_arr - rate_mean) ** 2)))

    records = []
    for (split, u), z in zip(utts, rate_z):
        mel_rel = f"mels/{u.utt_id}.f32"
        write_mel(out / mel_rel, u.mel)
        label = dict(zip(DIM_IDS, u.label.scores[:N_RATED] + (z,)))
        records.append(
            {
                "utt_id": u.utt_id,
                "speaker_id": u.speaker_id,
                "split": split,
                "mel_path": mel_rel,
                "tokens": list(u.token_ids),
                "durations": list(u.durations),
                "moras_per_second": round(u.moras_per_second, 9),
                "label": {k: round(v, 9) for k, v in label.items()},
            }
        )
    meta = {
        "n_speakers": n_speakers,
        "utts_per_speaker": utts_per_speaker,
        "split_ratios": list(split_ratios),
        "noise_sigma": noise_sigma,
        "seed": seed,
        "speaker_seed_offset": speaker_seed_offset,
        "speaker_seeds": {make_speaker(s).speaker_id: s for s in speaker_seeds},
        "rate_mean": rate_mean,
        "rate_std": rate_std,
    }
    write_manifest(out / "manifest.jsonl", records)
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Corpus(out, records, meta)


def write_manifest(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    meta = json.loads((root / "corpus.json").read_text())
    return Corpus(root, read_manifest(root / "manifest.jsonl"), meta)


def speaker_of(corpus: Corpus, speaker_id: str) -> SyntheticSpeaker:
    return make_speaker(corpus.meta["speaker_seeds"][speaker_id])


def rate_to_z(moras_per_second: float, rate_mean: float, rate_std: float) -> float:
    return (moras_per_second - rate_mean) / rate_std


def moras_per_second(n_tokens: int, n_frames: int) -> float:
    return n_tokens / (n_frames * FRAME_SHIFT_MS / 1000.0)
