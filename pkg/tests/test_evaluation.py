import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from impression_tts.corpus import build_corpus, eval_sentences, speaker_of
from impression_tts.errors import NotInitialized
from impression_tts.estimator import EstimatorConfig, estimate_batch, train_estimator
from impression_tts.evaluation import (
    SimilarityReport,
    SweepResult,
    cosine,
    emit_report,
    latent_projections,
    pair_trends,
    probe_mse,
    read_sweep_csv,
    ridge_fit,
    select_references,
    spearman,
    speaker_similarity,
    sweep_pair,
    sweep_single,
    sweep_trend,
    train_embedder,
)
from impression_tts.impression import ImpressionVector, modulate
from impression_tts.model import ModelConfig, load_checkpoint
from impression_tts.training import TrainingStagePlan, train_stage

TINY = ModelConfig(rnn_hidden=16, hidden=32, enc_blocks=1, dec_blocks=1)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("c"), n_speakers=10, utts_per_speaker=3, seed=4)


@pytest.fixture(scope="module")
def system(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("sys")
    train_stage(TrainingStagePlan("pretrain", 10, warmup=5), corpus, None, d / "pre.ckpt", model_cfg=TINY)
    train_stage(TrainingStagePlan("control", 5, optimizer="adam_fixed"), corpus, d / "pre.ckpt", d / "ctl.ckpt")
    model, _ = load_checkpoint(d / "ctl.ckpt")
    est, _ = train_estimator(corpus, epochs=1, cfg=EstimatorConfig(rnn_hidden=16, batch_size=16, train_crop=40))
    return model, est


@pytest.fixture(scope="module")
def reference(corpus):
    return corpus.mel(corpus.split("test")[0])


class TestCosine:
    def test_identity_and_orthogonal(self):
        a = np.array([3.0, -1.0, 2.0])
        assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)
        assert cosine([1.0, 0.0], [0.0, 5.0]) == 0.0
        assert cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 1.0])

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
    def test_bounded_symmetric(self, a, b):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        c = cosine(a, b)
        assert -1.0 <= c <= 1.0 and c == cosine(b, a)


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 1, 0]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0


class TestSweeps:
    def test_zero_grid(self, system, reference):
        model, est = system
        base = ImpressionVector.neutral()
        r = sweep_single(model, est, reference, base, "E", deltas=(0.0,), n_utts=3)
        assert r.samples.shape == (1, 1, 3) and r.n == 3
        direct = estimate_batch(est, model.synthesize_batch(eval_sentences(3, 0), reference, base),
                                [len(s) for s in eval_sentences(3, 0)])
        assert np.allclose(r.samples[0, 0], [v["E"] for v in direct])

    def test_aggregation_matches_loop(self, system, reference):
        model, est = system
        base = ImpressionVector.neutral()
        deltas = (-3.0, 0.0, 3.0)
        r = sweep_single(model, est, reference, base, "K", deltas=deltas, n_utts=4)
        assert r.samples.shape == (1, 3, 4)
        sents = eval_sentences(4, 0)
        for i, d in enumerate(deltas):
            vals = [estimate_batch(est, [model.synthesize(s, reference, modulate(base, {"K": d}))], [len(s)])[0]["K"]
                    for s in sents]
            assert r.means[0, i] == pytest.approx(np.mean(vals), abs=1e-4)
            assert r.stds[0, i] == pytest.approx(np.std(vals), abs=1e-4)

    def test_pair_grid(self, system, reference):
        model, est = system
        deltas = (-1.0, 0.0, 1.0)
        r = sweep_pair(model, est, reference, ImpressionVector.neutral(), ("E", "H"), deltas=deltas, n_utts=2)
        assert r.samples.shape == (2, 3, 3, 2) and r.kind == "pair"
        rho1, rho2 = pair_trends(r)
        assert rho1.shape == (3,) and rho2.shape == (3,)
        with pytest.raises(ValueError):
            sweep_pair(model, est, reference, ImpressionVector.neutral(), ("E", "E"))

    def test_bad_args(self, system, reference):
        model, est = system
        with pytest.raises(ValueError):
            sweep_single(model, est, reference, ImpressionVector.neutral(), "A", n_utts=0)
        with pytest.raises(KeyError):
            sweep_single(model, est, reference, ImpressionVector.neutral(), "Z")


class TestReports:
    def _single(self):
        samples = np.arange(21, dtype=float).reshape(1, 7, 3)
        return SweepResult(("I",), (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0), samples)

    def test_single_csv(self, tmp_path):
        r = self._single()
        paths = emit_report(r, tmp_path)
        assert [p.name for p in paths] == ["sweep_I.csv", "sweep_I.png"]
        rows = read_sweep_csv(paths[0])
        assert list(rows[0]) == ["delta", "mean", "std", "n"]
        assert len(rows) == 7
        assert float(rows[0]["mean"]) == 1.0 and rows[0]["n"] == "3"
        assert float(rows[0]["std"]) == pytest.approx(np.std([0, 1, 2]))
        assert sweep_trend(r) == pytest.approx(1.0)

    def test_pair_csv(self, tmp_path):
        rng = np.random.default_rng(0)
        r = SweepResult(("E", "H"), (-1.0, 0.0, 1.0), rng.standard_normal((2, 3, 3, 4)))
        paths = emit_report(r, tmp_path)
        with open(paths[0], newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["delta_E", "delta_H", "mean_E", "std_E", "mean_H", "std_H", "n"]
        assert len(rows) == 10

    def test_byte_identical(self, tmp_path):
        a = emit_report(self._single(), tmp_path / "a")
        b = emit_report(self._single(), tmp_path / "b")
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes()

    def test_similarity_csv(self, tmp_path):
        rep = SimilarityReport("s1", "u1", {0.0: np.array([0.9]), 3.0: np.array([0.8, 0.7]), -3.0: np.array([0.6])},
                               np.array([0.95]), np.array([0.1, 0.2, 0.3]))
        assert rep.median_at(3.0) == pytest.approx(0.7)
        assert rep.different_percentile(50) == pytest.approx(0.2)
        rows = read_sweep_csv(emit_report(rep, tmp_path)[0])
        assert list(rows[0]) == ["group", "level", "index", "cosine"]
        assert len(rows) == 8

    def test_unwritable(self, tmp_path):
        target = tmp_path / "file"
        target.write_text("")
        with pytest.raises(OSError, match="file"):
            emit_report(self._single(), target / "sub")


class TestSimilarity:
    def test_references_alternate_gender(self, tmp_path):
        c = build_corpus(tmp_path, n_speakers=30, utts_per_speaker=2, seed=5)
        refs = select_references(c, 2)
        tags = {speaker_of(c, r["speaker_id"]).gender_tag for r in refs}
        if len({speaker_of(c, s).gender_tag for s in c.speakers("test")}) > 1:
            assert len(tags) == 2
        with pytest.raises(ValueError):
            select_references(c, 99)

    def test_report_excludes_reference(self, system, corpus):
        model, _ = system
        emb = train_embedder(corpus, epochs=1)
        ref = corpus.split("test")[0]
        rep = speaker_similarity(model, emb, ref, corpus, ImpressionVector.neutral(), levels=(0.0, 3.0),
                                 dims=("A", "B"), n_utts=2)
        assert len(rep.modulated[0.0]) == 2 and len(rep.modulated[3.0]) == 4
        n_same = sum(1 for s in ("val", "test") for r in corpus.split(s)
                     if r["speaker_id"] == ref["speaker_id"]) - 1
        assert len(rep.same_speaker) == n_same
        assert np.all(np.abs(rep.different_speaker) <= 1.0)

    def test_untrained_embedder(self):
        from impression_tts.evaluation import SpeakerEmbedder
        with pytest.raises(NotInitialized):
            SpeakerEmbedder(3).embed([np.zeros((10, 80), np.float32)])


class TestProbe:
    def test_ridge_recovers_linear_map(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((200, 5))
        W = rng.standard_normal((5, 3))
        Y = X @ W + 2.0
        w = ridge_fit(X, Y, alpha=0.0)
        assert np.allclose(w[:-1], W, atol=1e-9) and np.allclose(w[-1], 2.0, atol=1e-9)
        shrunk = ridge_fit(X, Y, alpha=1e6)
        assert np.abs(shrunk[:-1]).max() < 0.01 * np.abs(W).max()

    def test_probe_mse(self, system, corpus):
        model, _ = system
        p = latent_projections(model, corpus, corpus.split("val"))
        assert p.shape == (len(corpus.split("val")), model.control.cfg.proj_dim)
        mse = probe_mse(model, corpus)
        assert np.isfinite(mse) and mse >= 0.0

    def test_probe_needs_control(self, corpus):
        from impression_tts.model import ImpressionTTS
        with pytest.raises(NotInitialized):
            latent_projections(ImpressionTTS(TINY), corpus, corpus.split("val"))
