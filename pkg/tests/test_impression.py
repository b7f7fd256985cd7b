import math
import random
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impression_tts.errors import InsufficientData, InvalidDelta, InvalidRating, MissingRatings, ZeroVariance
from impression_tts.impression import (
    DIM_IDS,
    DIMS,
    PUBLISHED_CORRELATIONS,
    RATED_IDS,
    ImpressionVector,
    RatingSet,
    Scale,
    aggregate_ratings,
    correlation_matrix,
    correlation_table,
    modulate,
    read_vectors_csv,
    standardize_speech_rates,
    vector_from_json,
    vector_to_json,
    write_vectors_csv,
)

NAMES = [
    "High–Low pitched", "Masculine–Feminine", "Clear–Hoarse", "Calm–Restless", "Powerful–Weak",
    "Youthful–Elderly", "Thick–Thin", "Tense–Relaxed", "Dark–Bright", "Cold–Warm", "Slow–Fast",
]


def pearson_oracle(x, y):
    """Two-pass Pearson in plain Python floats."""
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def random_vector(rng):
    return ImpressionVector(tuple(rng.uniform(1, 7) for _ in range(10)) + (rng.gauss(0, 1),))


finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = st.lists(st.floats(1, 7), min_size=10, max_size=10).flatmap(
    lambda a: st.floats(-3, 3).map(lambda k: ImpressionVector(tuple(a) + (k,))))


class TestDimensions:
    def test_eleven_dims_with_scales(self):
        assert DIM_IDS == tuple("ABCDEFGHIJK")
        assert all(d.scale is Scale.LIKERT7 for d in DIMS[:10])
        assert DIMS[10].scale is Scale.ZSCORE

    def test_names(self):
        assert [d.name_pair for d in DIMS] == NAMES

    def test_published_correlations_are_documentation(self):
        assert PUBLISHED_CORRELATIONS == {("A", "G"): -0.80, ("E", "H"): 0.79, ("H", "I"): -0.80}

    def test_vector_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ImpressionVector((4.0,) * 10 + (math.nan,))
        with pytest.raises(ValueError):
            ImpressionVector((4.0,) * 10)


class TestAggregate:
    def test_constant_ratings(self):
        rs = RatingSet("u", {d: [4] * 10 for d in RATED_IDS})
        v = aggregate_ratings(rs, 0.0)
        assert v.scores == (4.0,) * 10 + (0.0,)

    def test_symmetric_mean(self):
        ratings = {d: [4, 4] for d in RATED_IDS}
        ratings["I"] = [1, 7]
        v = aggregate_ratings(RatingSet("u", ratings), 0.0)
        assert v.scores == (4.0,) * 10 + (0.0,)

    def test_random_matches_oracle(self):
        rng = random.Random(3)
        for _ in range(100):
            ratings = {d: [rng.randint(1, 7) for _ in range(rng.randint(1, 12))] for d in RATED_IDS}
            z = rng.gauss(0, 1)
            v = aggregate_ratings(RatingSet("u", ratings), z)
            for d in RATED_IDS:
                assert abs(v[d] - statistics.fmean(ratings[d])) < 1e-12
            assert v["K"] == z

    def test_errors(self):
        ratings = {d: [4] for d in RATED_IDS}
        ratings["C"] = []
        with pytest.raises(MissingRatings):
            aggregate_ratings(RatingSet("u", ratings), 0.0)
        ratings["C"] = [8]
        with pytest.raises(InvalidRating):
            aggregate_ratings(RatingSet("u", ratings), 0.0)
        ratings["C"] = [0]
        with pytest.raises(InvalidRating):
            aggregate_ratings(RatingSet("u", ratings), 0.0)

    @given(st.lists(st.integers(1, 7), min_size=1, max_size=20))
    def test_range_invariant(self, rs):
        v = aggregate_ratings(RatingSet("u", {d: rs for d in RATED_IDS}), 0.5)
        assert all(1.0 <= v[d] <= 7.0 for d in RATED_IDS)


class TestStandardize:
    def test_two_values(self):
        assert standardize_speech_rates([4.0, 6.0]) == [-1.0, 1.0]

    def test_errors(self):
        with pytest.raises(ZeroVariance):
            standardize_speech_rates([5.0, 5.0, 5.0])
        with pytest.raises(InsufficientData):
            standardize_speech_rates([5.0])

    def test_moments(self):
        rng = random.Random(7)
        z = standardize_speech_rates([rng.uniform(4, 12) for _ in range(1000)])
        mu = math.fsum(z) / len(z)
        sd = math.sqrt(math.fsum((x - mu) ** 2 for x in z) / len(z))
        assert abs(mu) < 1e-9
        assert abs(sd - 1) < 1e-9

    @given(st.lists(st.floats(1, 20), min_size=2, max_size=50, unique=True))
    def test_rank_preserving(self, rates):
        z = standardize_speech_rates(rates)
        # weak monotonicity: nearly equal rates may round to the same z
        for i in range(len(rates)):
            for j in range(len(rates)):
                if rates[i] < rates[j]:
                    assert z[i] <= z[j]


class TestModulate:
    def test_identity(self):
        v = ImpressionVector.neutral()
        assert modulate(v, {}) == v

    def test_single(self):
        v = modulate(ImpressionVector.neutral(), {"I": 3})
        assert v["I"] == 7.0
        assert all(v[d] == 4.0 for d in RATED_IDS if d != "I")

    def test_sparse(self):
        base = ImpressionVector((3.0, 5.0, 4.5, 2.0, 6.0, 1.5, 3.3, 4.4, 5.5, 6.6, -0.5))
        v = modulate(base, {"E": 1.5, "H": -1.5})
        diff = v.as_array() - base.as_array()
        assert diff[DIM_IDS.index("E")] == pytest.approx(1.5, abs=1e-15)
        assert diff[DIM_IDS.index("H")] == pytest.approx(-1.5, abs=1e-15)
        assert np.count_nonzero(diff) == 2

    def test_no_clamping(self):
        v = modulate(ImpressionVector.neutral(), {"A": 5.0, "K": -9.0})
        assert v["A"] == 9.0 and v["K"] == -9.0

    def test_invalid_delta(self):
        with pytest.raises(InvalidDelta):
            modulate(ImpressionVector.neutral(), {"A": math.inf})
        with pytest.raises(KeyError):
            modulate(ImpressionVector.neutral(), {"Z": 1.0})

    @given(vectors)
    def test_zero_deltas_bit_exact(self, v):
        assert modulate(v, {d: 0.0 for d in DIM_IDS}).scores == v.scores

    @given(vectors, st.dictionaries(st.sampled_from(DIM_IDS), st.floats(-3, 3)),
           st.dictionaries(st.sampled_from(DIM_IDS), st.floats(-3, 3)))
    def test_additive(self, v, d1, d2):
        combined = {d: d1.get(d, 0.0) + d2.get(d, 0.0) for d in set(d1) | set(d2)}
        a = modulate(modulate(v, d1), d2).as_array()
        b = modulate(v, combined).as_array()
        assert np.max(np.abs(a - b)) < 1e-12


class TestCorrelation:
    def test_perfect_anticorrelation(self):
        rng = random.Random(0)
        vs = []
        for _ in range(20):
            s = [rng.uniform(1, 7) for _ in range(10)] + [rng.gauss(0, 1)]
            s[1] = 8 - s[0]
            vs.append(ImpressionVector(tuple(s)))
        cm = correlation_matrix(vs)
        assert cm.entry("A", "B") == pytest.approx(-1.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = random.Random(1)
        vs = [random_vector(rng) for _ in range(50)]
        cm = correlation_matrix(vs)
        cols = list(zip(*(v.scores for v in vs)))
        for i in range(11):
            assert cm.values[i, i] == 1.0
            for j in range(11):
                if i != j:
                    assert abs(cm.values[i, j] - pearson_oracle(cols[i], cols[j])) < 1e-9
        assert np.array_equal(cm.values, cm.values.T)
        assert cm.n_samples == 50

    def test_zero_variance_names_dim(self):
        rng = random.Random(2)
        vs = []
        for _ in range(10):
            s = list(random_vector(rng).scores)
            s[3] = 4.0
            vs.append(ImpressionVector(tuple(s)))
        with pytest.raises(ZeroVariance) as exc:
            correlation_matrix(vs)
        assert exc.value.dim == "D"

    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1))
    def test_order_invariant(self, seed):
        r = random.Random(seed)
        vs = [random_vector(r) for _ in range(12)]
        shuffled = list(vs)
        r.shuffle(shuffled)
        assert np.allclose(correlation_matrix(vs).values, correlation_matrix(shuffled).values, atol=1e-12)

    def test_table(self):
        rng = random.Random(4)
        text = correlation_table(correlation_matrix([random_vector(rng) for _ in range(10)]))
        lines = text.splitlines()
        assert lines[0] == "dim," + ",".join(DIM_IDS)
        assert len(lines) == 12
        assert lines[1].split(",")[1] == "1.0000"


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        rng = random.Random(5)
        rows = [(f"u{i}", ImpressionVector(tuple(round(x, 6) for x in random_vector(rng).scores))) for i in range(5)]
        p = tmp_path / "v.csv"
        write_vectors_csv(p, rows)
        assert p.read_text().splitlines()[0] == "utt_id," + ",".join(DIM_IDS)
        assert read_vectors_csv(p) == rows

    def test_json_fixed_format(self):
        text = vector_to_json("utt1", ImpressionVector.neutral())
        assert '"A": 4.000000' in text and '"K": 0.000000' in text
        assert vector_from_json(text) == ("utt1", ImpressionVector.neutral())

    def test_csv_rejects_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,A\nx,1\n")
        with pytest.raises(ValueError):
            read_vectors_csv(p)
