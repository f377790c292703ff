from dataclasses import replace

import numpy as np
import pytest

from memenc import autodiff as ad
from memenc.autodiff import ShapeError, Tensor
from memenc.backbone import Backbone, BackboneConfig
from memenc.nn import MLP, Adam, LayerNorm, Linear, Parameter


def _outputs(bb, x, e=None):
    maps, q = bb.forward(Tensor(x), e)
    return [m.data for m in maps], q.data


def _assert_same(a, b):
    maps_a, q_a = a
    maps_b, q_b = b
    for ma, mb in zip(maps_a, maps_b):
        np.testing.assert_array_equal(ma, mb)
    np.testing.assert_array_equal(q_a, q_b)


class TestConfig:
    def test_defaults(self):
        cfg = BackboneConfig()
        assert (cfg.image_size, cfg.patch_size, cfg.depth, cfg.width, cfg.heads) == (32, 4, 8, 64, 4)
        assert cfg.tap_layers == (2, 4, 6, 8)
        assert cfg.grid == 8

    @pytest.mark.parametrize("kw", [dict(image_size=30, patch_size=4), dict(tap_layers=(1, 2, 3)),
                                    dict(tap_layers=(2, 2, 4, 6)), dict(tap_layers=(2, 4, 6, 9)),
                                    dict(width=30, heads=4), dict(attn_gain=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)

    def test_evenly_spaced(self):
        assert BackboneConfig.evenly_spaced(12).tap_layers == (3, 6, 9, 12)


class TestForward:
    def test_shapes(self, rng):
        bb = Backbone(BackboneConfig(width=16, heads=2))
        maps, q = bb.forward(Tensor(rng.uniform(size=(32, 32, 3))))
        assert [m.shape for m in maps] == [(8, 8, 16)] * 4
        assert q.shape == (16,)

    def test_zero_image_deterministic_nonzero(self, small_cfg):
        x = np.zeros((16, 16, 3))
        a = _outputs(Backbone(small_cfg), x)
        b = _outputs(Backbone(small_cfg), x)
        _assert_same(a, b)
        assert all(np.any(m != 0) for m in a[0])

    def test_wrong_image_shape(self, small_cfg):
        with pytest.raises(ShapeError, match="16, 16, 3"):
            Backbone(small_cfg).forward(Tensor(np.zeros((32, 32, 3))))

    def test_batch_permutation(self, small_cfg, images):
        bb = Backbone(small_cfg)
        perm = np.array([2, 0, 1])
        maps, q = _outputs(bb, images)
        maps_p, q_p = _outputs(bb, images[perm])
        np.testing.assert_allclose(q_p, q[perm], atol=1e-13)
        for m, mp in zip(maps, maps_p):
            np.testing.assert_allclose(mp, m[perm], atol=1e-13)

    def test_upper_layers_do_not_touch_lower_taps(self, small_cfg, images):
        bb = Backbone(small_cfg)
        before = _outputs(bb, images)[0]
        for prm in bb.blocks[2].parameters() + bb.blocks[3].parameters():
            prm.data = prm.data + 0.3
        after = _outputs(bb, images)[0]
        np.testing.assert_array_equal(before[0], after[0])
        np.testing.assert_array_equal(before[1], after[1])
        assert not np.allclose(before[2], after[2])

    def test_attn_gain_scales_query_key_only(self, small_cfg):
        a = Backbone(small_cfg)
        b = Backbone(replace(small_cfg, attn_gain=3.0))
        w = small_cfg.width
        np.testing.assert_allclose(b.blocks[0].qkv.weight.data[:, :2 * w], 3.0 * a.blocks[0].qkv.weight.data[:, :2 * w])
        np.testing.assert_array_equal(b.blocks[0].qkv.weight.data[:, 2 * w:], a.blocks[0].qkv.weight.data[:, 2 * w:])

    def test_tap_norm_standardizes_tokens(self, small_cfg, images):
        taps, _ = Backbone(replace(small_cfg, tap_norm=True)).encode(Tensor(images))
        np.testing.assert_allclose(taps[0].data.mean(-1), 0.0, atol=1e-10)


class TestAdaLN:
    @pytest.fixture
    def cfg(self, small_cfg):
        return replace(small_cfg, adaln_enabled=True, n_subjects=2)

    def test_identity_at_init_any_e(self, cfg, images, rng):
        bb = Backbone(cfg)
        plain = _outputs(bb, images)
        for _ in range(3):
            e = Tensor(rng.normal(size=(3, cfg.embed_dim)) * 5)
            _assert_same(plain, _outputs(bb, images, e))

    def test_matches_disabled_backbone(self, cfg, small_cfg, images, rng):
        on, off = Backbone(cfg), Backbone(small_cfg)
        e = Tensor(rng.normal(size=(3, cfg.embed_dim)))
        _assert_same(_outputs(off, images), _outputs(on, images, e))

    def test_modulate_equals_layernorm_at_init(self, cfg, rng):
        bb = Backbone(cfg)
        tok = Tensor(rng.normal(size=(5, cfg.width)))
        e = Tensor(rng.normal(size=cfg.embed_dim))
        out = bb.adaln_modulate(tok, e, layer=1, slot=1)
        np.testing.assert_array_equal(out.data, bb.blocks[1].ln2(tok).data)

    def test_zero_e_is_identity_after_training(self, cfg, rng):
        bb = Backbone(cfg)
        for blk in bb.blocks:
            blk.adaln.weight.data = rng.normal(size=blk.adaln.weight.shape)
        tok = Tensor(rng.normal(size=(5, cfg.width)))
        out = bb.adaln_modulate(tok, Tensor(np.zeros(cfg.embed_dim)), 0, 0)
        np.testing.assert_array_equal(out.data, bb.blocks[0].ln1(tok).data)

    def test_disabled_raises(self, small_cfg, rng):
        bb = Backbone(small_cfg)
        with pytest.raises(RuntimeError):
            bb.adaln_modulate(Tensor(np.zeros((2, 16))), Tensor(np.zeros(32)))
        with pytest.raises(RuntimeError):
            bb.condition_embed(Tensor(np.zeros(6)), 0)

    def test_gradient_reaches_e_after_one_step(self, cfg, images, rng):
        bb = Backbone(replace(cfg, frozen=False))
        target = rng.normal(size=(3, cfg.width))
        e_data = rng.normal(size=(3, cfg.embed_dim))
        opt = Adam(bb.trainable_parameters(), lr=1e-2)

        def loss(e):
            _, q = bb.forward(Tensor(images), e)
            return ad.mse_loss(q, target)

        loss(Tensor(e_data)).backward()
        opt.step()
        e = Tensor(e_data.copy(), requires_grad=True)
        assert ad.gradcheck(lambda: loss(e), [e]) <= 1e-5
        assert np.abs(e.grad).max() > 0


class TestConditionEmbed:
    @pytest.fixture
    def bb(self, small_cfg):
        return Backbone(replace(small_cfg, adaln_enabled=True, n_subjects=2))

    def test_subjects_differ(self, bb, rng):
        c = Tensor(rng.normal(size=6))
        assert not np.allclose(bb.condition_embed(c, 0).data, bb.condition_embed(c, 1).data)

    def test_zero_condition_shared(self, bb):
        c = Tensor(np.zeros(6))
        np.testing.assert_array_equal(bb.condition_embed(c, 0).data, bb.condition_embed(c, 1).data)

    def test_shape(self, bb, rng):
        assert bb.condition_embed(Tensor(rng.normal(size=6)), 1).shape == (32,)
        assert bb.condition_embed(Tensor(rng.normal(size=(4, 6))), [0, 1, 1, 0]).shape == (4, 32)

    def test_unknown_subject(self, bb):
        with pytest.raises(KeyError):
            bb.condition_embed(Tensor(np.zeros(6)), 2)


class TestLoRA:
    def test_noop_at_init(self, small_cfg, images):
        bb = Backbone(small_cfg)
        before = _outputs(bb, images)
        bb.apply_lora(4)
        _assert_same(before, _outputs(bb, images))

    def test_param_count(self, small_cfg):
        bb = Backbone(small_cfg)
        added = bb.apply_lora(3)
        w, r = small_cfg.width, 3
        per_block = r * ((w + 3 * w) + (w + w) + (w + 2 * w) + (2 * w + w))
        assert added == small_cfg.depth * per_block
        lora = sum(p.size for n, p in bb.named_parameters() if "lora_" in n)
        assert lora == added

    def test_rank_too_large(self, small_cfg):
        with pytest.raises(ValueError):
            Backbone(small_cfg).apply_lora(16)

    def test_training_moves_only_adapters(self, small_cfg, images, rng):
        bb = Backbone(replace(small_cfg, lora_rank=4))
        base_before = {n: p.data.copy() for n, p in bb.named_parameters() if "lora_" not in n and "convblocks" not in n}
        target = rng.normal(size=(3, small_cfg.width))
        opt = Adam(bb.trainable_parameters(), lr=1e-2)
        losses = []
        for _ in range(15):
            opt.zero_grad()
            loss = ad.mse_loss(bb.forward(Tensor(images))[1], target)
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert losses[-1] < losses[0]
        for n, p in bb.named_parameters():
            if n in base_before:
                np.testing.assert_array_equal(p.data, base_before[n])

    def test_live_required(self, small_cfg):
        assert not Backbone(small_cfg).live_required
        assert Backbone(replace(small_cfg, lora_rank=2)).live_required
        assert Backbone(replace(small_cfg, frozen=False)).live_required


class TestLayers:
    def test_linear_shapes_and_bias(self, rng):
        lin = Linear(3, 5, rng)
        y = lin(Tensor(rng.normal(size=(4, 3))))
        assert y.shape == (4, 5)
        np.testing.assert_array_equal(lin.bias.data, 0.0)

    def test_zero_init(self, rng):
        assert np.all(Linear(3, 4, rng, init_std=0.0).weight.data == 0)

    def test_mlp_gradcheck(self, rng):
        mlp = MLP([3, 6, 2], rng)
        x = Tensor(rng.normal(size=(4, 3)))
        params = mlp.parameters()
        assert ad.gradcheck(lambda: ad.tsum(mlp(x) * mlp(x)), params) <= 1e-5

    def test_layernorm_module(self, rng):
        ln = LayerNorm(4)
        out = ln(Tensor(rng.normal(size=(2, 4)))).data
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)

    def test_state_dict_roundtrip(self, rng):
        a, b = MLP([3, 4, 2], rng), MLP([3, 4, 2], rng)
        b.load_state_dict(a.state_dict())
        assert a.weight_hash() == b.weight_hash()
        with pytest.raises(KeyError):
            b.load_state_dict({})

    def test_frozen_parameter(self):
        p = Parameter(np.ones(3))
        p.freeze()
        assert not p.requires_grad and p.frozen


class TestAdam:
    def test_minimizes_quadratic(self):
        p = Parameter(np.array([3.0, -2.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            ad.tsum(p * p).backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2

    def test_first_step_is_lr_sized(self):
        p = Parameter(np.array([1.0]))
        opt = Adam([p], lr=0.01)
        (p * 5.0).sum().backward()
        opt.step()
        # bias-corrected first step is lr * sign(g)
        assert p.data[0] == pytest.approx(0.99, abs=1e-8)

    def test_skips_frozen(self):
        p = Parameter(np.ones(2), frozen=True)
        assert Adam([p]).params == []
