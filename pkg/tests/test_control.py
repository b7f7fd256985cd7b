import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from impression_tts.control import ControlConfig, ControlModule, condition, control_loss, grl_apply


def neutral_v(n=1):
    return torch.tensor([[4.0] * 10 + [0.0]] * n)


class TestGRL:
    def test_forward_identity(self):
        t = torch.tensor([1.5, -2.0])
        assert torch.equal(grl_apply(t, 0.7), t)

    def test_backward_arithmetic(self):
        t = torch.tensor([1.5, -2.0], requires_grad=True)
        out = grl_apply(t, 0.5)
        out.backward(torch.tensor([2.0, -4.0]))
        assert t.grad.tolist() == [-1.0, 2.0]

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            grl_apply(torch.zeros(2), -0.1)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.floats(0, 5), st.integers(0, 2**31))
    def test_bit_exact_forward(self, shape, lam, seed):
        t = torch.randn(*shape, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(grl_apply(t, lam), t)

    def test_finite_difference(self):
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.standard_normal((3, 4)), requires_grad=True)
        lam = 0.8
        (grl_apply(x, lam) ** 2).sum().backward()
        eps = 1e-6
        xd = x.detach().clone()
        for idx in np.ndindex(3, 4):
            e = torch.zeros_like(xd)
            e[idx] = eps
            fd = float(((xd + e) ** 2).sum() - ((xd - e) ** 2).sum()) / (2 * eps)
            expected = -lam * fd
            assert abs(float(x.grad[idx]) - expected) <= 1e-5 * max(abs(expected), 1e-12)
            assert float(x.grad[idx]) == pytest.approx(-lam * 2 * float(xd[idx]), rel=1e-12)


class TestCondition:
    def test_shapes(self):
        m = ControlModule(384)
        h, p_x = m(torch.randn(2, 384), neutral_v(2))
        assert h.shape == (2, 384) and p_x.shape == (2, 32)
        assert m.proj_x.out_features == 32 and m.proj_v.out_features == 32
        assert m.proj_v.in_features == 11

    def test_eval_deterministic(self):
        torch.manual_seed(0)
        m = ControlModule()
        x = torch.randn(1, 384)
        assert torch.equal(condition(m, x, neutral_v()), condition(m, x, neutral_v()))

    def test_sensitive_to_vector(self):
        torch.manual_seed(0)
        m = ControlModule()
        x = torch.randn(1, 384)
        v2 = neutral_v().clone()
        v2[0, 8] += 3.0
        with torch.no_grad():
            assert float(torch.dist(condition(m, x, neutral_v()), condition(m, x, v2))) > 0

    def test_train_mode_restored(self):
        m = ControlModule()
        m.eval()
        condition(m, torch.randn(1, 384), neutral_v(), mode="train")
        assert not m.training
        with pytest.raises(ValueError):
            condition(m, torch.randn(1, 384), neutral_v(), mode="predict")

    def test_inverted_dropout_statistics(self):
        torch.manual_seed(1)
        m = ControlModule(cfg=ControlConfig(dropout_rate=0.8))
        m.train()
        x = torch.ones(10_000)
        y = m.dropout(x)
        zero = int((y == 0).sum())
        n, r = 10_000, 0.8
        half = 2.576 * math.sqrt(n * r * (1 - r))
        assert n * r - half <= zero <= n * r + half
        assert torch.allclose(y[y != 0], torch.full_like(y[y != 0], 1 / (1 - r)))
        m.eval()
        assert torch.equal(m.dropout(x), x)

    def test_config_defaults(self):
        c = ControlConfig()
        assert (c.dropout_rate, c.proj_dim, c.lambda_grl) == (0.8, 32, 1.0)
        a = ControlConfig.ablation()
        assert (a.dropout_rate, a.lambda_adv, a.use_grl) == (0.0, 0.0, False)
        with pytest.raises(ValueError):
            ControlConfig(dropout_rate=1.0)


class TestAdversary:
    def test_output_shape(self):
        out = ControlModule().adversary_predict(torch.randn(3, 32))
        assert out.shape == (3, 11) and torch.isfinite(out).all()

    def test_adversary_learns_without_reversal(self):
        torch.manual_seed(0)
        m = ControlModule(cfg=ControlConfig(lambda_grl=0.0))
        p_x = torch.randn(64, 32)
        v = torch.cat([p_x[:, :10] * 0.5 + 4.0, p_x[:, 10:11]], dim=1)
        opt = torch.optim.Adam(m.adversary.parameters(), lr=1e-2)
        first = float(m.adversary_loss(p_x, v).detach())
        for _ in range(200):
            loss = m.adversary_loss(p_x, v)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert float(m.adversary_loss(p_x, v).detach()) < 0.1 * first

    def test_reversal_flips_encoder_gradient(self):
        torch.manual_seed(0)
        grads = []
        x = torch.randn(4, 384)
        v = neutral_v(4) + torch.randn(4, 11)
        for use_grl in (True, False):
            torch.manual_seed(5)
            m = ControlModule(cfg=ControlConfig(dropout_rate=0.0, use_grl=use_grl))
            _, p_x = m(x, v)
            m.adversary_loss(p_x, v).backward()
            grads.append(m.proj_x.weight.grad.clone())
        assert torch.allclose(grads[0], -grads[1], atol=1e-7)


class TestControlLoss:
    def test_arithmetic(self):
        assert control_loss(1.0, 0.5, ControlConfig(lambda_adv=2.0)) == 2.0
        assert control_loss(0.7, 123.0, ControlConfig(lambda_adv=0.0)) == 0.7

    def test_gradient_decomposition(self):
        """d total / d proj_x = recon grad - lambda_grl * lambda_adv * adversary-path grad."""
        cfg = ControlConfig(dropout_rate=0.0, lambda_grl=0.7, lambda_adv=0.3)
        torch.manual_seed(2)
        m = ControlModule(cfg=cfg).double()
        x = torch.randn(5, 384, dtype=torch.float64)
        v = neutral_v(5).double() + torch.randn(5, 11, dtype=torch.float64)
        target = torch.randn(5, 384, dtype=torch.float64)

        def parts():
            h, p_x = m(x, v)
            recon = torch.mean((h - target) ** 2)
            adv_plain = torch.mean((m.adversary(p_x) + m.center - v) ** 2)
            return recon, adv_plain, p_x

        recon, adv_plain, p_x = parts()
        g_recon = torch.autograd.grad(recon, m.proj_x.weight, retain_graph=True)[0]
        g_adv = torch.autograd.grad(adv_plain, m.proj_x.weight)[0]
        h, p_x = m(x, v)
        total = control_loss(torch.mean((h - target) ** 2), m.adversary_loss(p_x, v), cfg)
        g_total = torch.autograd.grad(total, m.proj_x.weight)[0]
        expected = g_recon - cfg.lambda_grl * cfg.lambda_adv * g_adv
        assert torch.allclose(g_total, expected, atol=1e-12)

        # numeric check of the recon + plain-adversary objective on one weight
        w = m.proj_x.weight
        eps = 1e-6
        with torch.no_grad():
            w[0, 0] += eps
            r_up, a_up, _ = parts()
            w[0, 0] -= 2 * eps
            r_dn, a_dn, _ = parts()
            w[0, 0] += eps
        fd = (float(r_up - r_dn) - cfg.lambda_grl * cfg.lambda_adv * float(a_up - a_dn)) / (2 * eps)
        assert abs(fd - float(expected[0, 0])) <= 1e-5 * max(abs(fd), 1e-10)
