import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aavs.decoder import (CrossAttentionLayer, DecoderConfig, DecoderLayer, Mode, NumericalError,
                          RobustKeyGenerator, TransformerDecoder, init_attention_mask, key_partition,
                          masked_cross_attention, resize_prior, robust_audio_keys, sine_position_2d)
from aavs.encoder import MultiScaleFeatures
from aavs.gradcheck import fd_relative_error
from aavs.heads import PredictionHead
from oracles import bilinear_resize

D = 16


def _feats(T=2, dtype=torch.float64, scale=1):
    g = torch.Generator().manual_seed(3)
    sizes = [(8 * scale, 8 * scale), (4 * scale, 4 * scale), (2 * scale, 2 * scale), (scale, scale)]
    return MultiScaleFeatures(*(torch.randn(T, D, h, w, generator=g, dtype=dtype) for h, w in sizes))


class TestRobustKeys:
    def _gen(self):
        return RobustKeyGenerator(D, 0.3, 0.7).double()

    def test_all_silent(self):
        gen = self._gen()
        fv = torch.randn(2, D, 4, 4, dtype=torch.float64)
        out = robust_audio_keys(fv, torch.zeros(2, 16, 16, dtype=torch.float64), gen)
        torch.testing.assert_close(out, fv + gen.e_silent[None, :, None, None], rtol=0, atol=0)

    def test_all_sounding(self):
        gen = self._gen()
        fv = torch.randn(2, D, 4, 4, dtype=torch.float64)
        out = gen(fv, torch.ones(2, 16, 16, dtype=torch.float64))
        torch.testing.assert_close(out, fv + gen.e_sounding[None, :, None, None], rtol=0, atol=0)

    def test_middle_branch(self):
        gen = self._gen()
        fv = torch.zeros(1, D, 2, 2, dtype=torch.float64)
        prior = torch.tensor([[[0.5, 0.1], [0.9, 0.3]]], dtype=torch.float64)
        out = gen(fv, prior)
        torch.testing.assert_close(out[0, :, 0, 0], gen.e_uncertain)
        torch.testing.assert_close(out[0, :, 0, 1], gen.e_silent)
        torch.testing.assert_close(out[0, :, 1, 0], gen.e_sounding)
        # tau1 itself is inclusive in the uncertain band
        torch.testing.assert_close(out[0, :, 1, 1], gen.e_uncertain)

    def test_out_of_range_prior_is_clamped_and_counted(self):
        gen = self._gen()
        fv = torch.zeros(1, D, 2, 2, dtype=torch.float64)
        out = gen(fv, torch.full((1, 2, 2), 1.5, dtype=torch.float64))
        assert gen.clamp_count == 4
        torch.testing.assert_close(out[0, :, 0, 0], gen.e_sounding)

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            RobustKeyGenerator(D, 0.7, 0.3)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), t1=st.floats(0, 0.99), width=st.floats(0.001, 1.0))
    def test_partition_disjoint_and_covering(self, seed, t1, width):
        t2 = min(t1 + width, 1.0)
        if not t1 < t2:
            return
        g = torch.Generator().manual_seed(seed)
        prior = torch.rand(2, 9, 9, generator=g, dtype=torch.float64)
        idx = key_partition(prior, t1, t2)
        silent, unc, snd = prior < t1, (prior >= t1) & (prior <= t2), prior > t2
        assert not (silent & unc).any() and not (unc & snd).any() and not (silent & snd).any()
        assert (silent | unc | snd).all()
        assert torch.equal(idx, silent * 0 + unc * 1 + snd * 2)


class TestInitMask:
    def test_no_prior(self):
        allow = init_attention_mask(None, (3, 3), 5, frames=2)
        assert allow.shape == (2, 5, 9) and allow.all()

    def test_prior_ones(self):
        assert init_attention_mask(torch.ones(2, 24, 24), (3, 3), 4).all()

    def test_empty_prior_falls_back(self):
        prior = torch.zeros(2, 24, 24)
        prior[0, 0, 0] = 1.0  # vanishes after resizing
        assert init_attention_mask(prior, (3, 3), 4).all()

    def test_disk_matches_bilinear_oracle(self):
        yy, xx = np.mgrid[0:48, 0:48]
        disk = ((yy - 20) ** 2 + (xx - 27) ** 2 <= 11 ** 2).astype(np.float64)
        allow = init_attention_mask(torch.from_numpy(disk)[None], (12, 12), 3)
        expect = bilinear_resize(disk, 12, 12) >= 0.5
        for q in range(3):
            np.testing.assert_array_equal(allow[0, q].reshape(12, 12).numpy(), expect)

    def test_resize_prior_matches_oracle(self, rng):
        img = rng.random((16, 24))
        out = resize_prior(torch.from_numpy(img)[None], (4, 6))[0].numpy()
        np.testing.assert_allclose(out, bilinear_resize(img, 4, 6), atol=1e-12)


def _identity_layer(dim, heads=1):
    layer = CrossAttentionLayer(dim, heads).double()
    with torch.no_grad():
        for lin in (layer.attn.q_proj, layer.attn.k_proj, layer.attn.v_proj, layer.attn.out_proj):
            lin.weight.copy_(torch.eye(dim))
            lin.bias.zero_()
    return layer


class TestMaskedAttention:
    def _inputs(self, T=2, N=3, L=7):
        g = torch.Generator().manual_seed(11)
        q = torch.randn(T, N, D, generator=g, dtype=torch.float64)
        k = torch.randn(T, L, D, generator=g, dtype=torch.float64)
        v = torch.randn(T, L, D, generator=g, dtype=torch.float64)
        pos = torch.randn(N, D, generator=g, dtype=torch.float64)
        return q, k, v, pos

    def test_all_true_equals_unmasked(self):
        layer = CrossAttentionLayer(D, 4).double()
        q, k, v, pos = self._inputs()
        allow = torch.ones(2, 3, 7, dtype=torch.bool)
        a, wa = masked_cross_attention(q, k, v, allow, pos, layer, return_weights=True)
        b, wb = masked_cross_attention(q, k, v, None, pos, layer, return_weights=True)
        assert torch.equal(a, b) and torch.equal(wa, wb)

    def test_masked_keys_get_zero_weight(self):
        layer = CrossAttentionLayer(D, 4).double()
        q, k, v, pos = self._inputs()
        g = torch.Generator().manual_seed(5)
        allow = torch.rand(2, 3, 7, generator=g) > 0.5
        allow[..., 0] = True
        _, w = layer(q, k, v, allow, pos, return_weights=True)
        blocked = (~allow)[:, None].expand_as(w)
        assert (w[blocked] == 0).all()
        torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)))

    def test_empty_mask_falls_back_to_unmasked(self):
        layer = CrossAttentionLayer(D, 4).double()
        q, k, v, pos = self._inputs()
        allow = torch.ones(2, 3, 7, dtype=torch.bool)
        allow[0, 1] = False  # query 1 of frame 0 has no allowed key
        allow[1, 2, :4] = False
        masked, wm = layer(q, k, v, allow, pos, return_weights=True)
        free, wf = layer(q, k, v, None, pos, return_weights=True)
        assert torch.equal(masked[0, 1], free[0, 1])
        assert torch.equal(wm[0, :, 1], wf[0, :, 1])

    def test_single_allowed_key(self):
        layer = _identity_layer(D)
        q, k, v, _ = self._inputs(T=1, N=1)
        allow = torch.zeros(1, 1, 7, dtype=torch.bool)
        allow[0, 0, 4] = True
        out, w = layer(q, k, v, allow, None, return_weights=True)
        assert torch.equal(w[0, 0, 0], torch.eye(7, dtype=torch.float64)[4])
        torch.testing.assert_close(out[0, 0], layer.norm(q[0, 0] + v[0, 4]))

    def test_two_keys_softmax(self):
        dim = 2
        layer = _identity_layer(dim)
        q = torch.tensor([[[math.sqrt(2.0), 0.0]]], dtype=torch.float64)
        k = torch.tensor([[[1.0, 0.0], [0.0, 0.0], [5.0, 5.0]]], dtype=torch.float64)
        v = torch.randn(1, 3, dim, dtype=torch.float64)
        allow = torch.tensor([[[True, True, False]]])
        _, w = layer(q, k, v, allow, None, return_weights=True)
        e = math.e
        np.testing.assert_allclose(w[0, 0, 0].detach().numpy(), [e / (e + 1), 1 / (e + 1), 0.0], atol=1e-15)
        np.testing.assert_allclose(w[0, 0, 0, :2].detach().numpy(), [0.7311, 0.2689], atol=5e-5)

    def test_nan_reports_layer(self):
        layer = CrossAttentionLayer(D, 4, layer_index=7).double()
        q, k, v, pos = self._inputs()
        k[0, 0, 0] = float("nan")
        with pytest.raises(NumericalError, match="layer 7"):
            layer(q, k, v, None, pos)


def _decoder(mode, stages=4, **kw):
    cfg = DecoderConfig(num_stages=stages, heads=4, dim=D, ffn_dim=32, mode=mode, **kw)
    return TransformerDecoder(cfg).double()


def _head(num_classes=3, fusion=False):
    return PredictionHead(D, num_classes, fusion).double()


class TestDecode:
    def _q(self, T=2, N=5):
        return torch.randn(T, N, D, dtype=torch.float64), torch.randn(N, D, dtype=torch.float64)

    def test_twelve_layers(self):
        dec, head, feats = _decoder(Mode.AVSS_E2E), _head(), _feats()
        q_a, pos = self._q()
        q_fuse, aux = dec(q_a, feats, pos, None, lambda q: head(q, feats.f1))
        assert len(aux) == 12 == dec.cfg.num_stages * dec.cfg.layers_per_stage
        assert q_fuse.shape == q_a.shape
        assert aux[0].mask_logits.shape == (2, 5, 8, 8)

    def test_zero_depth_is_identity(self):
        dec, head, feats = _decoder(Mode.AVSS_E2E, stages=0), _head(), _feats()
        q_a, pos = self._q()
        q_fuse, aux = dec(q_a, feats, pos, None, lambda q: head(q, feats.f1))
        assert torch.equal(q_fuse, q_a) and aux == []

    def test_level_cycle(self):
        dec, head, feats = _decoder(Mode.AVSS_E2E, stages=2), _head(), _feats()
        seen = []
        for layer in dec.layers:
            layer.cross.register_forward_hook(lambda m, args, out: seen.append(args[1].shape[1]))
        q_a, pos = self._q()
        dec(q_a, feats, pos, None, lambda q: head(q, feats.f1))
        assert seen == [1, 4, 16, 1, 4, 16]  # f4 -> f3 -> f2 per stage

    def test_stones_reduces_to_e2e(self):
        torch.manual_seed(0)
        stones = _decoder(Mode.AVSS_STONES)
        e2e = _decoder(Mode.AVSS_E2E)
        missing, unexpected = e2e.load_state_dict(stones.state_dict(), strict=False)
        assert not missing and set(unexpected) == {"robust.e_silent", "robust.e_uncertain", "robust.e_sounding"}
        with torch.no_grad():
            for e in (stones.robust.e_silent, stones.robust.e_uncertain, stones.robust.e_sounding):
                e.zero_()
        head, feats = _head(), _feats()
        q_a, pos = self._q()
        cb = lambda q: head(q, feats.f1)  # noqa: E731
        qs, aux_s = stones(q_a, feats, pos, torch.ones(2, 32, 32, dtype=torch.float64), cb)
        qe, aux_e = e2e(q_a, feats, pos, None, cb)
        assert torch.equal(qs, qe)
        for a, b in zip(aux_s, aux_e):
            assert torch.equal(a.mask_logits, b.mask_logits) and torch.equal(a.class_logits, b.class_logits)

    def test_prior_initialises_first_mask_only(self):
        torch.manual_seed(0)
        dec, head, feats = _decoder(Mode.AVSS_STONES, stages=1), _head(), _feats()
        masks = []
        for layer in dec.layers:
            layer.cross.register_forward_hook(lambda m, args, out: masks.append(args[3]))
        prior = torch.zeros(2, 32, 32, dtype=torch.float64)
        prior[:, :16, :16] = 1
        q_a, pos = self._q()
        dec(q_a, feats, pos, prior, lambda q: head(q, feats.f1))
        expect = init_attention_mask(prior, (1, 1), 5)
        assert torch.equal(masks[0], expect)
        assert len(masks) == 3 and masks[1].shape == (2, 5, 4)

    def test_stones_requires_prior(self):
        dec, head, feats = _decoder(Mode.AVSS_STONES, stages=1), _head(), _feats()
        q_a, pos = self._q()
        with pytest.raises(ValueError):
            dec(q_a, feats, pos, None, lambda q: head(q, feats.f1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecoderConfig(layers_per_stage=2)
        with pytest.raises(ValueError):
            DecoderConfig(tau1=0.8, tau2=0.2)


def test_sine_position_shape_and_range():
    pos = sine_position_2d(16, 3, 5)
    assert pos.shape == (15, 16)
    assert pos.abs().max() <= 1
    assert len({tuple(r.tolist()) for r in pos}) == 15


def test_full_layer_gradients():
    torch.manual_seed(1)
    layer = DecoderLayer(8, 2, 16).double()
    g = torch.Generator().manual_seed(2)
    q = torch.randn(2, 3, 8, generator=g, dtype=torch.float64, requires_grad=True)
    keys = torch.randn(2, 6, 8, generator=g, dtype=torch.float64, requires_grad=True)
    values = torch.randn(2, 6, 8, generator=g, dtype=torch.float64, requires_grad=True)
    pos = torch.randn(3, 8, generator=g, dtype=torch.float64, requires_grad=True)
    allow = torch.rand(2, 3, 6, generator=g) > 0.3
    w = torch.randn(2, 3, 8, generator=g, dtype=torch.float64)

    def f():
        return (layer(q, keys, values, allow, pos) * w).sum()

    tensors = [q, keys, values, pos] + list(layer.parameters())
    assert fd_relative_error(f, tensors, coords=10) < 1e-3
