"""Single world-model layer: golden values, gradients, rollout geometry."""

import pytest
import torch

from dreamstack.layer import (LayerConfig, LayerState, WorldModelLayer,
                              sample_latent)


def tiny_config(**kw):
    base = dict(action_dim=3, input_channels=3, h_size=16, groups=4,
                classes=4, cnn_base=8, hidden=16, image_size=16)
    base.update(kw)
    return LayerConfig(**base)


def tiny_layer(seed=1234, **kw):
    torch.manual_seed(seed)
    return WorldModelLayer(tiny_config(**kw))


class TestConfigValidation:
    def test_image_size_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            tiny_config(image_size=24)
        with pytest.raises(ValueError):
            tiny_config(image_size=4)

    def test_at_least_one_head(self):
        with pytest.raises(ValueError):
            tiny_config(decode_raw=False, decode_residual=False)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            tiny_config(h_size=0)
        with pytest.raises(ValueError):
            tiny_config(groups=-1)

    def test_derived_dims(self):
        cfg = tiny_config()
        assert cfg.latent_dim == 16
        assert cfg.conv_stages == 2
        assert LayerConfig(action_dim=3, input_channels=3,
                           image_size=64).conv_stages == 4


class TestGoldenValues:
    """Frozen outputs of a seed-1234 layer; regression pins, not oracles."""

    def setup_method(self):
        self.layer = tiny_layer()
        self.h = torch.linspace(-1, 1, 16).unsqueeze(0)
        self.z = torch.zeros(1, 4, 4)
        self.z[0, :, 1] = 1.0
        self.a = torch.tensor([[0.0, 1.0, 0.0]])

    def test_sequence_step(self):
        h2 = self.layer.sequence_step(self.h, self.z, self.a)
        expected = torch.tensor([-0.1062216759, -0.3977167308,
                                 -0.2174902707, -0.4094962776,
                                 -0.4363071322])
        assert torch.allclose(h2[0, :5], expected, atol=1e-6)

    def test_posterior_probs(self):
        obs = torch.linspace(-0.5, 0.5, 3 * 16 * 16).reshape(1, 3, 16, 16)
        post = self.layer.encode(self.h, obs)
        expected = torch.tensor([0.2023996264, 0.1488116235,
                                 0.3666730225, 0.2821157277])
        assert torch.allclose(post[0, 0], expected, atol=1e-6)

    def test_prior_probs(self):
        prior = self.layer.predict(self.h)
        expected = torch.tensor([0.3772843182, 0.3336098492,
                                 0.1332817525, 0.1558241099])
        assert torch.allclose(prior[0, 0], expected, atol=1e-6)

    def test_decode(self):
        dec = self.layer.decode(self.h, self.z)
        assert dec.raw.shape == (1, 3, 16, 16)
        assert dec.residual is None
        expected = torch.tensor([0.200332284, 0.2543379962, 0.076369144])
        assert torch.allclose(dec.raw[0, 0, 0, :3], expected, atol=1e-6)
        assert abs(float(dec.raw.detach().mean()) - 0.0451107062) < 1e-6


class TestGradients:
    """Autograd vs float64 central finite differences on every pathway."""

    def _fd_check(self, fn, params, rel_tol=1e-4, coords=3):
        torch.manual_seed(0)
        out = fn()
        out.backward()
        eps = 1e-5
        gen = torch.Generator().manual_seed(5)
        for p in params:
            flat = p.detach().reshape(-1)
            grad = p.grad.reshape(-1)
            n = flat.numel()
            for c in torch.randint(0, n, (coords,), generator=gen).tolist():
                orig = flat[c].item()
                with torch.no_grad():
                    flat[c] = orig + eps
                    hi = fn().item()
                    flat[c] = orig - eps
                    lo = fn().item()
                    flat[c] = orig
                fd = (hi - lo) / (2 * eps)
                ad = grad[c].item()
                assert abs(fd - ad) <= rel_tol * max(1.0, abs(fd), abs(ad)), (
                    f"fd={fd} ad={ad} at coord {c}")

    def _setup64(self):
        layer = tiny_layer().double()
        gen = torch.Generator().manual_seed(7)
        h = torch.randn(2, 16, generator=gen, dtype=torch.float64)
        z = torch.zeros(2, 4, 4, dtype=torch.float64)
        z[:, :, 2] = 1.0
        a = torch.tensor([[1.0, 0, 0], [0, 0, 1.0]], dtype=torch.float64)
        obs = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
        w_h = torch.randn(2, 16, generator=gen, dtype=torch.float64)
        w_p = torch.randn(2, 4, 4, generator=gen, dtype=torch.float64)
        w_img = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
        return layer, h, z, a, obs, w_h, w_p, w_img

    def test_sequence_step_grads(self):
        layer, h, z, a, obs, w_h, w_p, w_img = self._setup64()
        params = [layer.cell_lin.weight, layer.embed_in[0].weight]
        self._fd_check(lambda: (layer.sequence_step(h, z, a) * w_h).sum(),
                       params)

    def test_encode_grads(self):
        layer, h, z, a, obs, w_h, w_p, w_img = self._setup64()
        params = [layer.encoder_cnn[0].weight, layer.post_net[0].weight]
        self._fd_check(lambda: (layer.encode(h, obs) * w_p).sum(), params)

    def test_predict_grads(self):
        layer, h, z, a, obs, w_h, w_p, w_img = self._setup64()
        params = [layer.prior_net[0].weight, layer.prior_net[3].weight]
        self._fd_check(lambda: (layer.predict(h) * w_p).sum(), params)

    def test_decode_grads(self):
        layer, h, z, a, obs, w_h, w_p, w_img = self._setup64()
        params = [layer.decoder_in.weight, layer.raw_head.weight]
        self._fd_check(
            lambda: (layer.decode(h, z).raw * w_img).sum(), params)

    def test_straight_through_identity(self):
        # d(sample)/d(probs) is exactly the identity: the gradient of
        # sample.sum() with respect to probs is all-ones
        probs = torch.full((2, 4, 4), 0.25, requires_grad=True)
        gen = torch.Generator().manual_seed(3)
        sample = sample_latent(probs, gen)
        sample.sum().backward()
        assert torch.equal(probs.grad, torch.ones_like(probs))

    def test_straight_through_forward_is_onehot(self):
        probs = torch.softmax(torch.randn(5, 4, 4), dim=-1).requires_grad_()
        sample = sample_latent(probs, torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(sample.sum(-1), torch.ones(5, 4))
            assert ((sample == 0) | (sample == 1)).all()


class TestDistributions:
    def test_probs_are_floored_simplex(self):
        layer = tiny_layer()
        h = torch.randn(8, 16, generator=torch.Generator().manual_seed(2))
        post = layer.predict(h)
        assert torch.allclose(post.sum(-1), torch.ones(8, 4), atol=1e-6)
        assert (post >= 0.01 / 4 - 1e-9).all()

    def test_prior_differs_from_posterior(self):
        layer = tiny_layer()
        gen = torch.Generator().manual_seed(11)
        h = torch.randn(4, 16, generator=gen)
        obs = torch.randn(4, 3, 16, 16, generator=gen)
        post = layer.encode(h, obs)
        prior = layer.predict(h)
        assert (post - prior).abs().max() > 1e-4

    def test_sampling_matches_probs(self):
        # draw many one-hot samples from fixed probabilities; empirical
        # frequencies must sit within 3 sigma of the true values
        probs = torch.tensor([[0.7, 0.1, 0.1, 0.1]]).reshape(1, 1, 4)
        probs = probs.expand(4000, 1, 4).contiguous()
        gen = torch.Generator().manual_seed(42)
        counts = sample_latent(probs, gen).sum(0).squeeze(0)
        n = 4000
        for k in range(4):
            p = probs[0, 0, k].item()
            sigma = (n * p * (1 - p)) ** 0.5
            assert abs(counts[k].item() - n * p) < 3 * sigma

    def test_onehot_probs_sample_deterministically(self):
        probs = torch.zeros(6, 4, 4)
        probs[..., 3] = 1.0
        sample = sample_latent(probs, torch.Generator().manual_seed(0))
        assert torch.equal(sample, probs)

    def test_encode_rejects_wrong_channels(self):
        layer = tiny_layer()
        with pytest.raises(ValueError):
            layer.encode(torch.zeros(1, 16), torch.zeros(1, 5, 16, 16))


class TestRollout:
    def _actions(self, offset, state):
        a = torch.zeros(state.batch, 3)
        a[:, offset % 3] = 1.0
        return a

    @pytest.mark.parametrize("frames,stride,expected", [
        (4, 1, 3), (4, 2, 7), (4, 4, 15), (1, 1, 0), (8, 1, 7)])
    def test_transition_counts(self, frames, stride, expected):
        layer = tiny_layer()
        state = layer.initial_state(2)
        out = layer.open_loop_rollout(state, self._actions, frames, stride,
                                      torch.Generator().manual_seed(0))
        assert out.transitions == expected
        assert out.raw.shape == (frames, 2, 3, 16, 16)

    def test_next_step_offset_adds_one_transition(self):
        layer = tiny_layer()
        state = layer.initial_state(2)
        out = layer.open_loop_rollout(state, self._actions, 4, 1,
                                      torch.Generator().manual_seed(0),
                                      first_offset=1)
        assert out.transitions == 4

    def test_rollout_is_no_grad(self):
        layer = tiny_layer()
        state = layer.initial_state(1)
        out = layer.open_loop_rollout(state, self._actions, 2, 1,
                                      torch.Generator().manual_seed(0))
        assert not out.raw.requires_grad

    def test_bad_arguments(self):
        layer = tiny_layer()
        state = layer.initial_state(1)
        with pytest.raises(ValueError):
            layer.open_loop_rollout(state, self._actions, 0, 1)
        with pytest.raises(ValueError):
            layer.open_loop_rollout(state, self._actions, 2, 0)


class TestObserve:
    def test_observe_step_shapes_and_advance(self):
        layer = tiny_layer()
        state = layer.initial_state(3)
        obs = torch.randn(3, 3, 16, 16,
                          generator=torch.Generator().manual_seed(1))
        a = torch.zeros(3, 3)
        a[:, 0] = 1.0
        nxt, out = layer.observe_step(state, obs, a,
                                      torch.Generator().manual_seed(2))
        assert out.post.shape == (3, 4, 4)
        assert out.feature.shape == (3, 16 + 16)
        assert nxt.h.shape == (3, 16)
        # the next state's code is the sampled posterior code
        assert torch.equal(nxt.z, out.z)
        assert (nxt.h - state.h).abs().max() > 0

    def test_initial_state_zeros(self):
        layer = tiny_layer()
        s = layer.initial_state(4)
        assert torch.equal(s.h, torch.zeros(4, 16))
        assert torch.equal(s.z, torch.zeros(4, 4, 4))

    def test_encode_then_advance_equals_observe(self):
        layer = tiny_layer()
        state = layer.initial_state(2)
        obs = torch.randn(2, 3, 16, 16,
                          generator=torch.Generator().manual_seed(4))
        a = torch.eye(3)[:2]
        nxt1, out1 = layer.observe_step(state, obs, a,
                                        torch.Generator().manual_seed(9))
        out2 = layer.encode_stage(state, obs,
                                  torch.Generator().manual_seed(9))
        nxt2 = layer.advance_stage(state, out2, a)
        assert torch.equal(nxt1.h, nxt2.h)
        assert torch.equal(out1.post, out2.post)
