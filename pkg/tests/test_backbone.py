"""Backbone behavior: patch extraction, sublayers, init, checkpoints."""

import numpy as np
import pytest

from zslvit import autodiff as ad
from zslvit.backbone import (
    BackboneConfig,
    TokenSet,
    ffn,
    init_attention,
    init_ffn,
    init_patch,
    load_params,
    mhsa,
    patch_embed,
    patchify,
    save_params,
    truncated_normal,
)
from zslvit.errors import ConfigError, FormatError


def naive_patchify(image, p):
    c, h, w = image.shape
    rows = []
    for gi in range(h // p):
        for gj in range(w // p):
            rows.append(image[:, gi * p : (gi + 1) * p, gj * p : (gj + 1) * p].reshape(-1))
    return np.stack(rows)


class TestConfig:
    def test_defaults(self):
        cfg = BackboneConfig()
        assert cfg.num_patches == 64
        assert cfg.head_dim == 16
        assert cfg.ffn_dim == 128

    def test_rejects_bad_geometry(self):
        with pytest.raises(ConfigError):
            BackboneConfig(image_size=30, patch_size=4)
        with pytest.raises(ConfigError):
            BackboneConfig(embed_dim=30, num_heads=4)
        with pytest.raises(ConfigError):
            BackboneConfig(set_layers=(4, 2))
        with pytest.raises(ConfigError):
            BackboneConfig(num_layers=6, set_layers=(6,))
        with pytest.raises(ConfigError):
            BackboneConfig(num_layers=6, set_layers=(0,))


class TestPatchEmbed:
    def test_patchify_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        for c, hw, p in [(1, 32, 4), (3, 16, 8), (2, 12, 4)]:
            img = rng.normal(size=(c, hw, hw))
            np.testing.assert_allclose(patchify(img, p), naive_patchify(img, p), atol=1e-12)

    def test_embed_shapes_and_positions(self):
        cfg = BackboneConfig(image_size=16, patch_size=4, embed_dim=8, num_heads=2, num_layers=2, set_layers=())
        params = init_patch(np.random.default_rng(1), cfg)
        tokens = patch_embed(np.random.default_rng(2).normal(size=(1, 16, 16)), cfg, params)
        assert tokens.cls.shape == (8,)
        assert tokens.patches.shape == (16, 8)
        assert tokens.provenance == list(range(16))
        # projection of patch row r must equal the naive product plus position r+1
        img = np.random.default_rng(3).normal(size=(1, 16, 16))
        tokens = patch_embed(img, cfg, params)
        rows = naive_patchify(img, 4)
        want = rows @ params.proj_w.data + params.proj_b.data + params.pos.data[1:]
        np.testing.assert_allclose(tokens.patches.data, want, atol=1e-12)

    def test_rejects_wrong_image_shape(self):
        cfg = BackboneConfig(image_size=16, patch_size=4, num_layers=2, set_layers=())
        params = init_patch(np.random.default_rng(0), cfg)
        with pytest.raises(FormatError):
            patch_embed(np.zeros((1, 8, 8)), cfg, params)


class TestSublayers:
    def _tokens(self, rng, n=6, d=8):
        return TokenSet(
            cls=ad.tensor(rng.normal(size=d)),
            patches=ad.tensor(rng.normal(size=(n, d))),
            provenance=list(range(n)),
        )

    def test_mhsa_zeroed_output_projection_is_identity(self):
        rng = np.random.default_rng(4)
        params = init_attention(rng, 8)
        params.wo.data[:] = 0.0
        tokens = self._tokens(rng)
        out, _ = mhsa(tokens, params, 2)
        np.testing.assert_array_equal(out.cls.data, tokens.cls.data)
        np.testing.assert_array_equal(out.patches.data, tokens.patches.data)

    def test_ffn_zeroed_second_layer_is_identity(self):
        rng = np.random.default_rng(5)
        params = init_ffn(rng, 8, 16)
        params.w2.data[:] = 0.0
        tokens = self._tokens(rng)
        out = ffn(tokens, params)
        np.testing.assert_array_equal(out.patches.data, tokens.patches.data)

    def test_mhsa_preserves_token_count_and_provenance(self):
        rng = np.random.default_rng(6)
        tokens = self._tokens(rng, n=9)
        out, weights = mhsa(tokens, init_attention(rng, 8), 4)
        assert out.n == 9
        assert out.provenance == tokens.provenance
        assert weights.shape == (4, 10, 10)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_block_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        d = 6
        attn = init_attention(rng, d)
        ff = init_ffn(rng, d, 12)
        x = rng.normal(size=(4, d))
        w = rng.normal(size=d)
        params = {"wq": attn.wq, "wv": attn.wv, "w1": ff.w1, "ln_g": attn.ln_g}

        def f():
            tokens = TokenSet(
                cls=ad.tensor(x[0]), patches=ad.tensor(x[1:]), provenance=[0, 1, 2]
            )
            out, _ = mhsa(tokens, attn, 2)
            out = ffn(out, ff)
            return out.cls @ ad.tensor(w)

        report = ad.grad_check(f, params, tol=1e-6)
        assert report.passed, report.summary()


class TestInitAndCheckpoints:
    def test_truncated_normal_bounds_and_spread(self):
        rng = np.random.default_rng(8)
        x = truncated_normal(rng, (20000,), std=0.02)
        assert np.abs(x).max() <= 0.04 + 1e-12
        assert 0.015 < x.std() < 0.025

    def test_save_load_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(9)
        params = {
            "a.w": ad.param(rng.normal(size=(3, 4))),
            "b.bias": ad.param(rng.normal(size=7)),
        }
        save_params(tmp_path / "ckpt", params)
        back = load_params(tmp_path / "ckpt")
        assert set(back) == set(params)
        for name in params:
            assert np.array_equal(back[name], params[name].data)

    def test_manifest_shape_mismatch_rejected(self, tmp_path):
        save_params(tmp_path / "c", {"w": ad.param(np.zeros((2, 2)))})
        manifest = tmp_path / "c" / "manifest.txt"
        manifest.write_text("w\t2,3\n")
        with pytest.raises(FormatError, match="disagrees"):
            load_params(tmp_path / "c")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            load_params(tmp_path / "nope")
