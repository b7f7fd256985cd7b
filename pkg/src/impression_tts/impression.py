"""Voice impression vectors: 11 antonym-pair intensities and their statistics.

Dims A-J are averaged 7-point Likert ratings; dim K is a speaking-rate
z-score. Modulation is plain addition and never clamps, so swept vectors
may leave the rating range on purpose.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InsufficientData,
    InvalidDelta,
    InvalidRating,
    MissingRatings,
    ZeroVariance,
)


class Scale(str, Enum):
    LIKERT7 = "likert7"
    ZSCORE = "zscore"


@dataclass(frozen=True)
class ImpressionDim:
    id: str
    name_pair: str
    scale: Scale


DIMS: tuple[ImpressionDim, ...] = (
    ImpressionDim("A", "High–Low pitched", Scale.LIKERT7),
    ImpressionDim("B", "Masculine–Feminine", Scale.LIKERT7),
    ImpressionDim("C", "Clear–Hoarse", Scale.LIKERT7),
    ImpressionDim("D", "Calm–Restless", Scale.LIKERT7),
    ImpressionDim("E", "Powerful–Weak", Scale.LIKERT7),
    ImpressionDim("F", "Youthful–Elderly", Scale.LIKERT7),
    ImpressionDim("G", "Thick–Thin", Scale.LIKERT7),
    ImpressionDim("H", "Tense–Relaxed", Scale.LIKERT7),
    ImpressionDim("I", "Dark–Bright", Scale.LIKERT7),
    ImpressionDim("J", "Cold–Warm", Scale.LIKERT7),
    ImpressionDim("K", "Slow–Fast", Scale.ZSCORE),
)
DIM_IDS: tuple[str, ...] = tuple(d.id for d in DIMS)
RATED_IDS: tuple[str, ...] = DIM_IDS[:10]
N_DIMS = len(DIMS)
DIM_INDEX = {d: i for i, d in enumerate(DIM_IDS)}

LIKERT_MIN, LIKERT_MAX = 1, 7
LIKERT_MID = 4.0

# Inter-dimension correlations measured on human ratings of real speech
# (lower triangle, A..K order). Kept for reference; not reproducible here.
PUBLISHED_CORRELATIONS = {
    ("A", "G"): -0.80,
    ("E", "H"): 0.79,
    ("H", "I"): -0.80,
}


@dataclass(frozen=True)
class ImpressionVector:
    """Scores for dims A..K, in that order."""

    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.scores) != N_DIMS:
            raise ValueError(f"expected {N_DIMS} scores, got {len(self.scores)}")
        vals = tuple(float(s) for s in self.scores)
        if not all(math.isfinite(s) for s in vals):
            raise ValueError(f"impression scores must be finite: {vals}")
        object.__setattr__(self, "scores", vals)

    @classmethod
    def from_mapping(cls, m: Mapping[str, float]) -> "ImpressionVector":
        return cls(tuple(float(m[d]) for d in DIM_IDS))

    @classmethod
    def from_array(cls, a: Sequence[float] | np.ndarray) -> "ImpressionVector":
        return cls(tuple(float(x) for x in np.asarray(a, dtype=np.float64).ravel()))

    @classmethod
    def neutral(cls) -> "ImpressionVector":
        return cls((LIKERT_MID,) * 10 + (0.0,))

    def __getitem__(self, dim: str) -> float:
        return self.scores[DIM_INDEX[dim]]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(DIM_IDS, self.scores))


@dataclass
class RatingSet:
    utterance_id: str
    per_dim_ratings: dict[str, list[int]] = field(default_factory=dict)


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    n_samples: int

    def entry(self, a: str, b: str) -> float:
        return float(self.values[DIM_INDEX[a], DIM_INDEX[b]])


def aggregate_ratings(rs: RatingSet, speech_rate_z: float) -> ImpressionVector:
    """Average the Likert ratings of each rated dim; K is passed through."""
    means = []
    for dim in RATED_IDS:
        ratings = rs.per_dim_ratings.get(dim)
        if not ratings:
            raise MissingRatings(f"{rs.utterance_id}: no ratings for dim {dim}")
        for r in ratings:
            if isinstance(r, bool) or int(r) != r or not LIKERT_MIN <= r <= LIKERT_MAX:
                raise InvalidRating(f"{rs.utterance_id}: dim {dim} rating {r!r} outside 1..7")
        means.append(math.fsum(ratings) / len(ratings))
    return ImpressionVector(tuple(means) + (float(speech_rate_z),))


def standardize_speech_rates(rates: Sequence[float]) -> list[float]:
    """Z-score speech rates (moras/s) with the population standard deviation."""
    x = np.asarray(rates, dtype=np.float64)
    if x.size < 2:
        raise InsufficientData(f"need at least 2 speech rates, got {x.size}")
    mean = x.mean()
    std = np.sqrt(np.mean((x - mean) ** 2))
    if std == 0.0:
        raise ZeroVariance("all speech rates are equal")
    return ((x - mean) / std).tolist()


def modulate(v: ImpressionVector, deltas: Mapping[str, float]) -> ImpressionVector:
    scores = list(v.scores)
    for dim, delta in deltas.items():
        if dim not in DIM_INDEX:
            raise KeyError(f"unknown impression dim {dim!r}")
        if not math.isfinite(delta):
            raise InvalidDelta(f"delta for dim {dim} is not finite: {delta!r}")
        scores[DIM_INDEX[dim]] += delta
    return ImpressionVector(tuple(scores))


def correlation_matrix(vs: Sequence[ImpressionVector]) -> CorrelationMatrix:
    if len(vs) < 3:
        raise InsufficientData(f"need at least 3 vectors, got {len(vs)}")
    x = np.stack([v.as_array() for v in vs])
    centered = x - x.mean(axis=0)
    ss = np.sum(centered**2, axis=0)
    for i, dim in enumerate(DIM_IDS):
        if ss[i] == 0.0:
            raise ZeroVariance(f"dim {dim} has zero variance", dim=dim)
    norm = np.sqrt(ss)
    corr = (centered.T @ centered) / np.outer(norm, norm)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(corr, len(vs))


# --- serialization -------------------------------------------------------

CSV_HEADER = ("utt_id",) + DIM_IDS


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_vectors_csv(path: str | Path, rows: Iterable[tuple[str, ImpressionVector]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for utt_id, v in rows:
            w.writerow([utt_id] + [_fmt(s) for s in v.scores])


def read_vectors_csv(path: str | Path) -> list[tuple[str, ImpressionVector]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [(row["utt_id"], ImpressionVector.from_mapping({d: float(row[d]) for d in DIM_IDS})) for row in reader]


def vector_to_json(utt_id: str, v: ImpressionVector) -> str:
    # fixed 6-decimal rendering, emitted by hand so the text is stable
    body = ", ".join(f'"{d}": {_fmt(s)}' for d, s in zip(DIM_IDS, v.scores))
    return '{"utt_id": ' + json.dumps(utt_id) + ', "scores": {' + body + "}}"


def vector_from_json(text: str) -> tuple[str, ImpressionVector]:
    obj = json.loads(text)
    return obj["utt_id"], ImpressionVector.from_mapping(obj["scores"])


def correlation_table(cm: CorrelationMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dim",) + DIM_IDS)
    for dim, row in zip(DIM_IDS, cm.values):
        w.writerow([dim] + [f"{x:.4f}" for x in row])
    return buf.getvalue()
