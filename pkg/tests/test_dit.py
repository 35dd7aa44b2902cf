import numpy as np
import pytest

from replica_sync.diffusion import ConfigError, GaussianMixture
from replica_sync.dit import (DiT, DitConfig, RegressionError, blockwise_softmax, gated_attention,
                              gated_attention_pair, gating_functions, layer_norm, layer_norm_jvp,
                              patchify, ridge_regression, unpatchify, attention_single)
from replica_sync.numerics import DimensionError


def attention_params(rng, d=8):
    p = {}
    for k in "qkvo":
        p["W" + k] = rng.standard_normal((d, d)) / np.sqrt(d)
        p["b" + k] = 0.1 * rng.standard_normal(d)
    return p


class TestConfig:
    def test_defaults(self):
        cfg = DitConfig()
        assert (cfg.layers, cfg.heads, cfg.d_model, cfg.patch, cfg.tokens) == (4, 2, 32, 2, 16)
        assert cfg.gate_alpha.shape == (4, 32)

    def test_round_trip(self):
        cfg = DitConfig(layers=2, gate_alpha=0.05)
        back = DitConfig.from_dict(cfg.to_dict())
        np.testing.assert_array_equal(back.gate_alpha, cfg.gate_alpha)
        assert back.latent == cfg.latent

    def test_bad_patch(self):
        with pytest.raises(ConfigError):
            DitConfig(latent=(1, 7, 7))

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            DitConfig(d_model=30, heads=4)


class TestPatchify:
    def test_single_patch(self):
        cfg = DitConfig(latent=(1, 2, 2))
        assert patchify(np.zeros((1, 2, 2)), cfg).shape == (1, 4)

    def test_token_count(self):
        assert patchify(np.zeros((1, 8, 8)), DitConfig()).shape == (16, 4)

    def test_round_trip(self, rng):
        cfg = DitConfig(latent=(3, 8, 4))
        z = rng.standard_normal((5, 3, 8, 4))
        np.testing.assert_array_equal(unpatchify(patchify(z, cfg), cfg), z)

    def test_patch_contents(self):
        cfg = DitConfig(latent=(1, 4, 4))
        z = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(patchify(z, cfg)[1], [2, 3, 6, 7])


class TestLayerNorm:
    def test_jvp_matches_finite_difference(self, rng):
        x = rng.standard_normal((3, 16))
        dx = rng.standard_normal((3, 16))
        h = 1e-6
        fd = (layer_norm(x + h * dx) - layer_norm(x - h * dx)) / (2 * h)
        np.testing.assert_allclose(layer_norm_jvp(x, dx), fd, atol=1e-8)


class TestGating:
    @pytest.mark.parametrize("g,expected", [(0.0, (1.0, 1.0)), (1.0, (0.0, 0.5)), (1 / 3, (0.5, 0.75))])
    def test_values(self, g, expected):
        np.testing.assert_allclose(gating_functions(g), expected, atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            gating_functions(1.5)


class TestBlockwiseSoftmax:
    def test_zero_logits(self):
        blocks = blockwise_softmax(*[np.zeros((4, 4))] * 4)
        for b in blocks:
            np.testing.assert_allclose(b, 0.25)

    def test_block_independence(self, rng):
        S = [rng.standard_normal((5, 5)) for _ in range(4)]
        base = blockwise_softmax(*S)
        shifted = blockwise_softmax(S[0], S[1] + rng.standard_normal((5, 5)), S[2], S[3])
        np.testing.assert_array_equal(base[0], shifted[0])

    def test_rows_sum_to_one(self, rng):
        for b in blockwise_softmax(*[3 * rng.standard_normal((6, 6)) for _ in range(4)]):
            np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)


class TestGatedAttention:
    def test_g_zero_decouples(self, rng):
        p = attention_params(rng)
        XA, XB = rng.standard_normal((2, 3, 5, 8))
        oA, oB = gated_attention_pair(XA, XB, 0.0, p, 2)
        np.testing.assert_array_equal(oA, attention_single(XA, p, 2))
        np.testing.assert_array_equal(oB, attention_single(XB, p, 2))

    def test_g_one_is_average(self, rng):
        p = attention_params(rng)
        XA, XB = rng.standard_normal((2, 1, 5, 8))
        oA, _, parts = gated_attention_pair(XA, XB, 1.0, p, 2, return_parts=True)
        intra = parts.A_AA @ parts.VA
        inter = parts.A_AB @ parts.VB
        from replica_sync.dit import _merge
        expected = _merge(0.5 * (intra + inter)) @ p["Wo"] + p["bo"]
        np.testing.assert_allclose(oA, expected, atol=1e-14)

    def test_identical_replicas_independent_of_g(self, rng):
        p = attention_params(rng)
        X = rng.standard_normal((1, 5, 8))
        ref = attention_single(X, p, 2)
        for g in [0.0, 0.2, 0.7, 1.0]:
            oA, oB = gated_attention_pair(X, X.copy(), g, p, 2)
            np.testing.assert_allclose(oA, ref, atol=1e-12)
            np.testing.assert_allclose(oB, ref, atol=1e-12)

    def test_concatenated_form(self, rng):
        p = attention_params(rng)
        X = rng.standard_normal((10, 8))
        out = gated_attention(X, 0.4, p, 2)
        oA, oB = gated_attention_pair(X[None, :5], X[None, 5:], 0.4, p, 2)
        np.testing.assert_array_equal(out, np.concatenate([oA, oB], axis=1)[0])

    def test_odd_sequence(self, rng):
        with pytest.raises(DimensionError):
            gated_attention(rng.standard_normal((5, 8)), 0.5, attention_params(rng), 2)


class TestBlock:
    def test_zero_gates_identity(self, rng):
        model = DiT(DitConfig(gate_alpha=0.0, gate_beta=0.0))
        H = rng.standard_normal((2, 2, 16, 32))
        e = model.cond(300.0)
        oA, oB = model.block(1, H[0], H[1], e, 0.5)
        np.testing.assert_array_equal(oA, H[0])
        np.testing.assert_array_equal(oB, H[1])

    @pytest.mark.parametrize("g", [0.0, 0.3, 0.7, 1.0])
    def test_exchange_every_layer(self, model, rng, g):
        HA, HB = rng.standard_normal((2, 2, 16, 32))
        e = model.cond(123.0)
        for layer in range(model.cfg.layers):
            oA, oB = model.block(layer, HA, HB, e, g)
            sA, sB = model.block(layer, HB, HA, e, g)
            np.testing.assert_array_equal(oA, sB)
            np.testing.assert_array_equal(oB, sA)

    @pytest.mark.parametrize("g", [0.0, 0.3, 1.0])
    def test_symmetric_state_through_depth(self, model, rng, g):
        z = rng.standard_normal((2, 1, 8, 8))
        cap = []
        eA, eB = model.forward_pair(z, z.copy(), 250.0, g, capture=cap)
        np.testing.assert_array_equal(eA, eB)
        for HA, HB in cap[0]:
            np.testing.assert_array_equal(HA, HB)

    def test_g_zero_forward_decouples(self, model, rng):
        zA, zB = rng.standard_normal((2, 3, 1, 8, 8))
        eA, eB = model.forward_pair(zA, zB, 400.0, 0.0)
        assert np.max(np.abs(eA - model.forward_single(zA, 400.0))) <= 1e-12
        assert np.max(np.abs(eB - model.forward_single(zB, 400.0))) <= 1e-12

    def test_shape_mismatch(self, model, rng):
        with pytest.raises(DimensionError):
            model.block(0, rng.standard_normal((1, 16, 32)), rng.standard_normal((1, 15, 32)),
                        model.cond(1.0), 0.5)


class TestSerialization:
    def test_json_round_trip(self, model, rng, tmp_path):
        path = tmp_path / "m.json"
        model.save(path)
        back = DiT.load(path)
        z = rng.standard_normal((2, 1, 8, 8))
        np.testing.assert_array_equal(back.forward_single(z, 10.0), model.forward_single(z, 10.0))

    def test_row_major_layout(self, model):
        import json
        raw = json.loads(model.to_json())
        W = raw["layers"][0]["Wq"]
        assert W["shape"] == [32, 32]
        np.testing.assert_array_equal(W["data"][:32], model.w["layers"][0]["Wq"][0])


class TestRidge:
    def test_zero_targets(self, rng):
        X = rng.standard_normal((50, 4))
        np.testing.assert_array_equal(ridge_regression(X, np.zeros((50, 2)), 1e-3), 0.0)

    def test_large_ridge_shrinks_to_zero(self, rng):
        X = rng.standard_normal((50, 4))
        Y = rng.standard_normal((50, 2))
        assert np.abs(ridge_regression(X, Y, 1e12, max_condition=1e20)).max() < 1e-9

    def test_scalar_shrinkage(self):
        # one feature equal to the target: w = sum x^2 / (sum x^2 + lam)
        x = np.linspace(-1, 1, 41)[:, None]
        lam = 0.5
        w = ridge_regression(x, x, lam)
        sxx = float(np.sum(x * x))
        assert abs(w[0, 0] - sxx / (sxx + lam)) < 1e-14

    def test_ill_conditioned(self):
        X = np.ones((10, 2))
        with pytest.raises(RegressionError):
            ridge_regression(X, np.ones((10, 1)), 0.0)


class TestCalibration:
    def test_fit_quality(self, calibrated):
        assert calibrated.r2_train > 0.5
        assert calibrated.r2_holdout > 0.5
        assert calibrated.condition_number < 1e12

    def test_deterministic(self, sched, mixture, calibrated):
        from replica_sync.dit import calibrate_decoder
        again = calibrate_decoder(DitConfig(), sched, mixture)
        np.testing.assert_array_equal(again.model.w["decoder"]["W"], calibrated.model.w["decoder"]["W"])

    def test_dimension_mismatch(self, sched):
        from replica_sync.dit import calibrate_decoder
        with pytest.raises(DimensionError):
            calibrate_decoder(DitConfig(), sched, GaussianMixture(np.ones(10), np.ones(10)))
