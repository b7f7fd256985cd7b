import numpy as np
import pytest
import torch
import torch.nn as nn

from impression_tts.backbone import (
    AcousticModel,
    TimeConv,
    compute_losses,
    length_regulate,
    lsgan_losses,
    predicted_durations,
    variance_targets,
)
from impression_tts.corpus import generator_basis
from impression_tts.errors import ShapeError


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_timeconv_matches_conv1d():
    tc = TimeConv(6, 4, kernel=5)
    conv = nn.Conv1d(6, 4, 5, padding=2)
    with torch.no_grad():
        # linear weight is laid out as [shift, c_in]
        w = tc.linear.weight.view(4, 5, 6).permute(0, 2, 1)
        conv.weight.copy_(w)
        conv.bias.copy_(tc.linear.bias)
        x = torch.randn(2, 9, 6)
        assert torch.allclose(tc(x), conv(x.transpose(1, 2)).transpose(1, 2), atol=1e-5)
    with pytest.raises(ValueError):
        TimeConv(2, 2, kernel=4)


class TestLengthRegulate:
    def test_repeats(self):
        states = torch.arange(6, dtype=torch.float32).view(1, 3, 2)
        frames, lengths = length_regulate(states, torch.tensor([[2, 0, 1]]), torch.ones(1, 3, dtype=torch.bool))
        assert lengths.tolist() == [3]
        assert frames[0].tolist() == [[0, 1], [0, 1], [4, 5]]

    def test_padding_ignored(self):
        states = torch.randn(2, 3, 4)
        mask = torch.tensor([[True, True, False], [True, True, True]])
        frames, lengths = length_regulate(states, torch.tensor([[1, 2, 9], [1, 1, 1]]), mask)
        assert lengths.tolist() == [3, 3]
        assert frames.shape == (2, 3, 4)

    def test_predicted_durations_floor(self):
        log_dur = torch.tensor([[-5.0, 0.0, np.log(3.2)]])
        d = predicted_durations(log_dur, torch.tensor([[True, True, False]]))
        assert d.tolist() == [[1, 1, 0]]


class TestAcousticModel:
    def test_teacher_forced_shapes(self):
        m = AcousticModel(50, hidden=32, cond_dim=16, n_mels=80, dropout=0.0).eval()
        tokens = torch.tensor([[1, 2, 3, 0], [4, 5, 6, 7]])
        mask = torch.tensor([[True, True, True, False], [True] * 4])
        dur = torch.tensor([[2, 3, 1, 0], [1, 1, 1, 1]])
        out = m(tokens, mask, torch.randn(2, 16), durations=dur, pitch=torch.zeros(2, 4), energy=torch.zeros(2, 4))
        assert out["mel"].shape == (2, 6, 80)
        assert out["frame_lengths"].tolist() == [6, 4]
        assert torch.all(out["mel"][1, 4:] == 0)
        assert out["log_duration"].shape == (2, 4)

    def test_conditioning_changes_output(self):
        m = AcousticModel(50, hidden=32, cond_dim=16, dropout=0.0).eval()
        tokens, mask = torch.tensor([[1, 2, 3]]), torch.ones(1, 3, dtype=torch.bool)
        dur = torch.tensor([[2, 2, 2]])
        with torch.no_grad():
            a = m(tokens, mask, torch.zeros(1, 16), durations=dur)["mel"]
            b = m(tokens, mask, torch.ones(1, 16), durations=dur)["mel"]
        assert not torch.allclose(a, b)

    def test_free_running(self):
        m = AcousticModel(50, hidden=32, cond_dim=16, dropout=0.0).eval()
        with torch.no_grad():
            out = m(torch.tensor([[1, 2, 3]]), torch.ones(1, 3, dtype=torch.bool), torch.zeros(1, 16))
        assert int(out["frame_lengths"][0]) >= 3


def test_variance_targets():
    rng = np.random.default_rng(0)
    mel = rng.standard_normal((7, 80)).astype(np.float32)
    pitch, energy = variance_targets(mel, [3, 4])
    basis = generator_basis()
    assert pitch[0] == pytest.approx(float((mel[:3].mean(0) - basis.base_spectrum) @ basis.impression[0]), abs=1e-5)
    assert energy[1] == pytest.approx(float((mel[3:].mean(0) - basis.base_spectrum).mean()), abs=1e-5)
    with pytest.raises(ShapeError):
        variance_targets(mel, [3, 3])


def test_pitch_target_reads_dimension_a():
    from impression_tts.corpus import make_speaker, render_utterance
    from impression_tts.impression import modulate

    sp = make_speaker(3)
    tokens = [1, 5, 9, 12]
    lo = render_utterance(sp, tokens, 0.0, 0, factors=modulate(sp.factors, {"A": -1.0}))
    hi = render_utterance(sp, tokens, 0.0, 0, factors=modulate(sp.factors, {"A": 1.0}))
    p_lo, _ = variance_targets(lo.mel, lo.durations)
    p_hi, _ = variance_targets(hi.mel, hi.durations)
    assert np.allclose(p_hi - p_lo, 2.0, atol=1e-4)


class TestLosses:
    def _batch(self):
        fm = torch.tensor([[True, True, False]])
        tm = torch.tensor([[True, False]])
        return {"mel": torch.zeros(1, 3, 2), "durations": torch.tensor([[2, 0]]), "pitch": torch.zeros(1, 2),
                "energy": torch.zeros(1, 2), "frame_mask": fm, "token_mask": tm}

    def test_masked_arithmetic(self):
        t = self._batch()
        pred = {"mel": torch.tensor([[[1.0, -1.0], [2.0, 0.0], [100.0, 100.0]]]),
                "log_duration": torch.tensor([[np.log(2.0) + 0.5, 7.0]]),
                "pitch": torch.tensor([[1.0, 9.0]]), "energy": torch.tensor([[-2.0, 9.0]])}
        losses = compute_losses(pred, t)
        assert float(losses["mel"]) == pytest.approx(4.0 / 4)
        assert float(losses["duration"]) == pytest.approx(0.25, abs=1e-6)
        assert float(losses["pitch"]) == 1.0 and float(losses["energy"]) == 4.0
        assert float(losses["total"]) == pytest.approx(1.0 + 0.25 + 1.0 + 4.0, abs=1e-6)

    def test_shape_mismatch(self):
        t = self._batch()
        pred = {"mel": torch.zeros(1, 4, 2), "log_duration": torch.zeros(1, 2), "pitch": torch.zeros(1, 2),
                "energy": torch.zeros(1, 2)}
        with pytest.raises(ShapeError):
            compute_losses(pred, t)


def test_lsgan():
    ls = lsgan_losses(torch.ones(4), torch.zeros(4))
    assert float(ls["d_real"]) == 0 and float(ls["d_fake"]) == 0 and float(ls["g_adv"]) == 1


def test_conditioning_skip_shifts_every_frame_alike():
    from impression_tts.corpus import MEL_STD

    m = AcousticModel(50, hidden=32, cond_dim=16, dropout=0.0).eval()
    tokens, mask = torch.tensor([[1, 2, 3]]), torch.ones(1, 3, dtype=torch.bool)
    dur = torch.tensor([[2, 1, 3]])
    c0, c1 = torch.zeros(1, 16), torch.randn(1, 16)
    with torch.no_grad():
        m.cond_proj.weight.zero_()  # leave only the linear skip sensitive to the conditioning
        diff = m(tokens, mask, c1, durations=dur)["mel"] - m(tokens, mask, c0, durations=dur)["mel"]
        expected = (m.cond_out(c1) - m.cond_out(c0)) * MEL_STD
    assert torch.allclose(diff, expected.unsqueeze(1).expand_as(diff), atol=1e-5)
