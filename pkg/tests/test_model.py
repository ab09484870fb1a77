import numpy as np
import pytest
import torch

from dgad.dense_attn import ReferenceCrossAttention
from dgad.encoder import cycle_mapping
from dgad.model import (ARMS, GROUPS, LATENT_BASIS, DEFAULT_FREEZE, DgadModel, ModelConfig, box_mask, compose,
                        latent_decode, latent_encode, latent_mask)
from dgad.schedule import make_linear_schedule

f64 = torch.float64
SMALL = ModelConfig(image_size=16, channels=(8, 16), res_units=1, time_dim=8, n_tokens=2, d_sem=4,
                    sem_channels=(4, 4, 4))


def _images(b=2, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(b, 3, size, size, generator=g, dtype=f64) * 2 - 1 for _ in range(3)]


class TestLatent:
    def test_basis_orthonormal(self):
        np.testing.assert_allclose(LATENT_BASIS @ LATENT_BASIS.T, np.eye(4), atol=1e-15)

    def test_shapes_and_zero(self):
        assert latent_encode(torch.zeros(2, 3, 16, 16, dtype=f64)).abs().max() == 0
        z = latent_encode(torch.rand(2, 3, 64, 64, dtype=f64))
        assert z.shape == (2, 4, 16, 16)
        assert latent_decode(z).shape == (2, 3, 64, 64)

    def test_against_patch_loop(self):
        img = _images(1, 8)[0]
        z = latent_encode(img)
        for i in range(2):
            for j in range(2):
                patch = img[0, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(-1).numpy()
                np.testing.assert_allclose(z[0, :, i, j].numpy(), 0.5 * LATENT_BASIS @ patch, atol=1e-14)

    def test_decode_is_projection(self):
        img = _images(2, 16)[0]
        once = latent_decode(latent_encode(img))
        twice = latent_decode(latent_encode(once))
        assert (once - twice).abs().max() < 1e-10
        # a flat-colour image survives the round trip
        flat = torch.ones(1, 3, 8, 8, dtype=f64) * torch.tensor([0.2, -0.4, 0.9], dtype=f64)[:, None, None]
        assert (latent_decode(latent_encode(flat)) - flat).abs().max() < 1e-12

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            latent_encode(torch.zeros(1, 3, 10, 10))
        with pytest.raises(ValueError):
            latent_decode(torch.zeros(1, 3, 4, 4))

    def test_masks(self):
        m = box_mask([(4, 4, 12, 12)], 16, f64)
        assert m.sum() == 64
        lm = latent_mask(m, 4)
        assert lm.shape == (1, 1, 4, 4) and lm.min() >= 0 and lm.max() <= 1
        assert lm[0, 0, 1:3, 1:3].min() > 0.9 and lm[0, 0, 0, 0] < 0.1


class TestStructure:
    def test_reference_shapes(self):
        assert ModelConfig().reference_shapes() == [(256, 4, 4), (128, 8, 8), (64, 16, 16)]
        m = DgadModel(SMALL, seed=0).double()
        i_obj, _, _ = _images()
        feats = m.reference_forward(i_obj)
        assert [tuple(f.shape[1:]) for f in feats] == SMALL.reference_shapes()

    def test_dense_only_in_decoder(self):
        m = DgadModel(SMALL, "full")
        names = list(m.dense_modules())
        assert names and all(n.startswith("up_blocks.") for n in names)
        assert len(names) == len(SMALL.channels)

    def test_both_stages(self):
        names = list(DgadModel(SMALL, "dense_ca_both_stages").dense_modules())
        assert any(n.startswith("down_blocks.") for n in names)
        assert any(n.startswith("up_blocks.") for n in names)
        assert not any(n.startswith("mid.") for n in names)

    def test_no_dense_ca_uses_standard_attention(self):
        m = DgadModel(SMALL, "no_dense_ca")
        assert not m.dense_modules()
        assert sum(isinstance(x, ReferenceCrossAttention) for x in m.modules()) == len(SMALL.channels)

    def test_input_layer_expansion(self):
        full = DgadModel(SMALL, "full", seed=3)
        rnd = DgadModel(SMALL, "random_input_weights", seed=3)
        nolay = DgadModel(SMALL, "no_layout_concat", seed=3)
        assert full.input_conv.weight.shape[1] == 9 and nolay.input_conv.weight.shape[1] == 8
        w = full.input_conv.weight
        for j, src in enumerate(cycle_mapping(4, 9)):
            assert torch.equal(w[:, j], w[:, src])
        assert torch.equal(rnd.input_conv.weight[:, :4], full.input_conv.weight[:, :4])
        assert not torch.equal(rnd.input_conv.weight[:, 4:], full.input_conv.weight[:, 4:])

    def test_groups_cover_everything(self):
        m = DgadModel(SMALL)
        groups = m.param_groups()
        assert set(groups) == set(GROUPS)
        flat = [n for names in groups.values() for n in names]
        assert sorted(flat) == sorted(n for n, _ in m.named_parameters())
        assert all(groups[g] for g in GROUPS)
        assert set(GROUPS) - set(DEFAULT_FREEZE) == {"semantic_ca", "dense_ca"}

    def test_param_count_deterministic(self):
        assert DgadModel(SMALL, seed=0).n_params() == DgadModel(SMALL, seed=5).n_params()
        a, b = DgadModel(SMALL, seed=1), DgadModel(SMALL, seed=1)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_unknown_arm(self):
        with pytest.raises(ValueError):
            DgadModel(SMALL, "half")
        assert len(ARMS) == 5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(image_size=30)
        with pytest.raises(ValueError):
            ModelConfig(clamp_lo=0.9, clamp_hi=0.5)


class TestForward:
    @pytest.mark.parametrize("arm", ARMS)
    def test_output_shape(self, arm):
        m = DgadModel(SMALL, arm).double()
        i_obj, i_bg, i_tgt = _images()
        mask = box_mask([(2, 2, 12, 10), (0, 4, 16, 16)], 16, f64)
        c = m.condition(i_obj, i_bg, mask)
        out = m(latent_encode(i_tgt), torch.tensor([5, 60]), c)
        assert out.shape == (2, 4, 4, 4) and torch.isfinite(out).all()

    def test_deterministic(self):
        i_obj, i_bg, i_tgt = _images()
        mask = box_mask([(2, 2, 12, 10)] * 2, 16, f64)
        outs = []
        for _ in range(2):
            m = DgadModel(SMALL, seed=7).double()
            outs.append(m(latent_encode(i_tgt), 30, m.condition(i_obj, i_bg, mask)))
        assert torch.equal(outs[0], outs[1])

    def test_conditioning_mismatch(self):
        m = DgadModel(SMALL).double()
        i_obj, i_bg, i_tgt = _images()
        mask = box_mask([(2, 2, 12, 10)] * 2, 16, f64)
        c = m.condition(i_obj, i_bg, mask)
        with pytest.raises(ValueError, match="batch"):
            m(latent_encode(i_tgt[:1]), 3, c)
        c.f_r = c.f_r[:-1]
        with pytest.raises(ValueError, match="reference"):
            m(latent_encode(i_tgt), 3, c)
        with pytest.raises(ValueError):
            m.condition(i_obj[:, :, :8, :8], i_bg, mask)

    def test_unconditional_branch_zeroes_appearance(self):
        m = DgadModel(SMALL).double()
        i_obj, i_bg, _ = _images()
        c = m.condition(i_obj, i_bg, box_mask([(2, 2, 12, 10)] * 2, 16, f64)).unconditional()
        assert c.f_obj.abs().max() == 0 and all(f.abs().max() == 0 for f in c.f_r)
        assert c.f_bg.abs().max() > 0

    def test_compose_keeps_background(self):
        m = DgadModel(SMALL).double()
        i_obj, i_bg, _ = _images()
        mask = box_mask([(2, 2, 12, 10), (4, 4, 8, 8)], 16, f64)
        out = compose(i_obj, i_bg, mask, m, make_linear_schedule(), steps=1, seed=0)
        assert out.shape == i_bg.shape and out.abs().max() <= 1
        outside = mask.expand_as(out) == 0
        assert torch.equal(out[outside], i_bg[outside])
        again = compose(i_obj, i_bg, mask, m, make_linear_schedule(), steps=1, seed=0)
        assert torch.equal(out, again)
        with pytest.raises(ValueError):
            compose(i_obj, i_bg, mask, m, make_linear_schedule(), steps=0)
