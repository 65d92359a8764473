"""Frozen-value and invariant tests for the numeric primitives.

Expected values were computed independently (closed form or hand-applied
update rules) before the implementation was written, and are pinned here.
"""

import math

import numpy as np
import pytest
import torch

from dreamstack.numerics import (
    EmaNormalizer,
    ReturnScale,
    TwohotCodec,
    categorical_kl,
    symexp,
    symlog,
    unimix,
)


class TestSymlog:
    def test_fixed_points(self):
        assert symlog(torch.tensor(0.0)).item() == 0.0
        # symlog(e - 1) = ln(1 + e - 1) = 1
        x = torch.tensor(math.e - 1.0, dtype=torch.float64)
        assert torch.allclose(symlog(x), torch.tensor(1.0, dtype=torch.float64))
        assert torch.allclose(
            symlog(torch.tensor(-3.0, dtype=torch.float64)),
            torch.tensor(-math.log(4.0), dtype=torch.float64),
        )

    def test_round_trip(self):
        g = torch.Generator().manual_seed(7)
        x = torch.empty(1000, dtype=torch.float64).uniform_(-1e6, 1e6, generator=g)
        back = symexp(symlog(x))
        assert torch.allclose(back, x, rtol=1e-9, atol=1e-9)
        # and the other composition order
        y = torch.empty(1000, dtype=torch.float64).uniform_(-12, 12, generator=g)
        assert torch.allclose(symlog(symexp(y)), y, rtol=1e-9, atol=1e-9)

    def test_odd_and_monotonic(self):
        x = torch.linspace(-50, 50, 301, dtype=torch.float64)
        assert torch.allclose(symlog(-x), -symlog(x))
        assert (symlog(x).diff() > 0).all()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            symlog(torch.tensor(float("nan")))
        with pytest.raises(ValueError):
            symexp(torch.tensor(float("inf")))


class TestTwohotCodec:
    def test_linear_interpolation_on_three_bins(self):
        codec = TwohotCodec(num_bins=3, low=-1.0, high=1.0, transform="identity")
        w = codec.encode(torch.tensor([0.4]))
        assert torch.allclose(w, torch.tensor([[0.0, 0.6, 0.4]]), atol=1e-7)
        assert torch.allclose(codec.decode(w), torch.tensor([0.4]), atol=1e-7)

    def test_out_of_range_clips_to_edge_bin(self):
        codec = TwohotCodec(num_bins=3, low=-1.0, high=1.0, transform="identity")
        w_hi = codec.encode(torch.tensor([1.7]))
        w_lo = codec.encode(torch.tensor([-2.0]))
        assert torch.allclose(w_hi, torch.tensor([[0.0, 0.0, 1.0]]))
        assert torch.allclose(w_lo, torch.tensor([[1.0, 0.0, 0.0]]))
        assert codec.decode(w_hi).item() == pytest.approx(1.0)
        assert codec.decode(w_lo).item() == pytest.approx(-1.0)

    def test_weights_are_a_two_hot_distribution(self):
        codec = TwohotCodec(num_bins=41, transform="symexp")
        g = torch.Generator().manual_seed(3)
        v = torch.empty(500).uniform_(-100, 100, generator=g)
        w = codec.encode(v)
        assert torch.allclose(w.sum(-1), torch.ones(500), atol=1e-6)
        assert (w >= 0).all()
        assert ((w > 0).sum(-1) <= 2).all()

    def test_symexp_spacing_has_exact_zero_center(self):
        codec = TwohotCodec(num_bins=41, transform="symexp")
        assert codec.centers[20].item() == 0.0
        w = codec.encode(torch.tensor([0.0]))
        assert w[0, 20].item() == pytest.approx(1.0)

    def test_round_trip_within_range(self):
        for codec in (
            TwohotCodec(num_bins=41, transform="symexp"),
            TwohotCodec(num_bins=255, transform="symexp"),
        ):
            g = torch.Generator().manual_seed(11)
            v = torch.empty(1000, dtype=torch.float64).uniform_(-400, 400, generator=g)
            back = codec.decode(codec.encode(v))
            assert torch.allclose(back, v, rtol=1e-6, atol=1e-6)

    def test_rejects_nan(self):
        codec = TwohotCodec(num_bins=3, low=-1.0, high=1.0, transform="identity")
        with pytest.raises(ValueError):
            codec.encode(torch.tensor([float("nan")]))

    def test_log_prob_matches_manual(self):
        codec = TwohotCodec(num_bins=3, low=-1.0, high=1.0, transform="identity")
        logits = torch.tensor([[0.3, -0.2, 1.1]])
        lp = codec.log_prob(logits, torch.tensor([0.4]))
        logp = torch.log_softmax(logits, -1)
        manual = 0.6 * logp[0, 1] + 0.4 * logp[0, 2]
        assert torch.allclose(lp, manual.unsqueeze(0), atol=1e-7)


class TestEmaNormalizer:
    def test_hand_applied_update(self):
        # init (mean 0, var 1), decay 0.99, one batch of constant 1.0:
        # mean' = 0.01, var' = 0.99, normalize(1) = 0.99/sqrt(0.99 + 1e-8)
        n = EmaNormalizer(channels=1, decay=0.99)
        x = torch.ones(4, 1, 2, 2)
        n.update(x)
        out = n.normalize(torch.ones(1, 1, 1, 1))
        assert out.item() == pytest.approx(0.9949874320814309, abs=1e-6)

    def test_defaults_before_first_update(self):
        n = EmaNormalizer(channels=3)
        assert not n.initialized
        x = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(0))
        expected = x / math.sqrt(1.0 + 1e-8)
        assert torch.allclose(n.normalize(x), expected, atol=1e-7)

    def test_denormalize_inverts_normalize(self):
        g = torch.Generator().manual_seed(5)
        n = EmaNormalizer(channels=3)
        for _ in range(10):
            n.update(torch.randn(8, 3, 6, 6, generator=g) * 3 + 1)
        x = torch.randn(4, 3, 6, 6, generator=g)
        back = n.denormalize(n.normalize(x))
        assert torch.allclose(back, x, rtol=1e-6, atol=1e-6)

    def test_updates_are_order_dependent(self):
        a = torch.zeros(2, 1, 2, 2)
        b = torch.ones(2, 1, 2, 2) * 4
        n1 = EmaNormalizer(channels=1)
        n1.update(a)
        n1.update(b)
        n2 = EmaNormalizer(channels=1)
        n2.update(b)
        n2.update(a)
        assert not torch.allclose(n1.mean, n2.mean)

    def test_variance_floor_prevents_division_blowup(self):
        n = EmaNormalizer(channels=1, decay=0.0)  # adopt batch stats wholesale
        n.update(torch.full((4, 1, 2, 2), 7.0))  # zero-variance batch
        out = n.normalize(torch.full((1, 1, 1, 1), 7.0))
        assert torch.isfinite(out).all()
        assert out.item() == pytest.approx(0.0)

    def test_per_channel_statistics(self):
        n = EmaNormalizer(channels=2, decay=0.0)
        x = torch.stack(
            [torch.zeros(4, 4), torch.ones(4, 4) * 10], dim=0
        ).unsqueeze(0)
        n.update(x)
        assert n.mean[0].item() == pytest.approx(0.0)
        assert n.mean[1].item() == pytest.approx(10.0)


class TestReturnScale:
    def test_scale_is_at_least_one(self):
        g = np.random.default_rng(2)
        s = ReturnScale(decay=0.99)
        assert s.scale() == 1.0  # before any update
        for _ in range(50):
            s.update(torch.as_tensor(g.normal(0, 1e-3, size=64)))
            assert s.scale() >= 1.0

    def test_first_batch_seeds_percentile_range(self):
        # Manual linear-interpolation oracle on sorted values 0..9:
        # 5th percentile: rank (10-1)*0.05 = 0.45 -> 0.45
        # 95th percentile: rank 8.55 -> 8.55
        s = ReturnScale(decay=0.99)
        s.update(torch.arange(10, dtype=torch.float64))
        assert s.high - s.low == pytest.approx(8.55 - 0.45, abs=1e-9)
        assert s.scale() == pytest.approx(8.10, abs=1e-9)

    def test_ema_update_rule(self):
        s = ReturnScale(decay=0.99)
        s.update(torch.arange(10, dtype=torch.float64))
        lo0, hi0 = s.low, s.high
        second = torch.arange(10, dtype=torch.float64) * 2
        s.update(second)
        lo1 = float(np.percentile(second.numpy(), 5))
        hi1 = float(np.percentile(second.numpy(), 95))
        assert s.low == pytest.approx(0.99 * lo0 + 0.01 * lo1, abs=1e-12)
        assert s.high == pytest.approx(0.99 * hi0 + 0.01 * hi1, abs=1e-12)

    def test_tiny_spread_clips_to_one(self):
        s = ReturnScale()
        s.update(torch.full((32,), 0.5))
        assert s.scale() == 1.0


class TestCategoricalKl:
    def test_closed_form_frozen_value(self):
        # sum_i p_i ln(p_i/q_i) with p = unimix'd one-hot (0.995, 0.005),
        # q = uniform: 0.995*ln(1.99) + 0.005*ln(0.01) = 0.6616681146127785
        p = torch.tensor([[[0.995, 0.005]]], dtype=torch.float64)
        q = torch.tensor([[[0.5, 0.5]]], dtype=torch.float64)
        kl = categorical_kl(p, q)
        assert kl.item() == pytest.approx(0.6616681146127785, abs=1e-12)

    def test_zero_for_identical_distributions(self):
        g = torch.Generator().manual_seed(9)
        p = torch.softmax(torch.randn(6, 4, 8, generator=g), -1)
        assert torch.allclose(categorical_kl(p, p), torch.zeros(6), atol=1e-6)

    def test_nonnegative_and_sums_groups(self):
        g = torch.Generator().manual_seed(10)
        p = torch.softmax(torch.randn(16, 4, 8, generator=g), -1)
        q = torch.softmax(torch.randn(16, 4, 8, generator=g), -1)
        kl = categorical_kl(p, q)
        assert kl.shape == (16,)
        assert (kl >= 0).all()
        per_group = sum(
            categorical_kl(p[:, [i], :], q[:, [i], :]) for i in range(4)
        )
        assert torch.allclose(kl, per_group, atol=1e-6)

    def test_rejects_negative_probabilities(self):
        p = torch.tensor([[[1.1, -0.1]]])
        q = torch.tensor([[[0.5, 0.5]]])
        with pytest.raises(ValueError):
            categorical_kl(p, q)


class TestUnimix:
    def test_one_hot_becomes_floored_simplex(self):
        p = unimix(torch.tensor([[1.0, 0.0]]), ratio=0.01)
        assert torch.allclose(p, torch.tensor([[0.995, 0.005]]), atol=1e-8)

    def test_preserves_simplex_and_floors(self):
        g = torch.Generator().manual_seed(12)
        probs = torch.softmax(torch.randn(32, 8, generator=g) * 5, -1)
        mixed = unimix(probs, ratio=0.01)
        assert torch.allclose(mixed.sum(-1), torch.ones(32), atol=1e-6)
        assert (mixed >= 0.01 / 8 - 1e-9).all()
