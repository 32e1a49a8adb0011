import numpy as np
import pytest

from wavaec.model import (
    AecModel,
    AecModelConfig,
    causality_probe,
    enhance,
    expected_parameter_count,
    receptive_field_ms,
    summary,
)
from wavaec.nn import ConformerBlock, LocalSelfAttention
from wavaec.tensor import Tensor, no_grad, use_dtype

# exact count of the default configuration, pinned as a regression value
DEFAULT_PARAMETERS = 1_610_832


@pytest.fixture(scope="module")
def default_model():
    return AecModel()


def naive_attention(attn, x):
    """Per-frame loop over the allowed window, independent of the block
    layout used by LocalSelfAttention."""
    b, t, d = x.shape
    h = attn.heads
    dh = d // h
    y = attn.norm(Tensor(x)).data
    q = (y @ attn.query.weight.data + attn.query.bias.data).reshape(b, t, h, dh)
    k = (y @ attn.key.weight.data + attn.key.bias.data).reshape(b, t, h, dh)
    v = (y @ attn.value.weight.data + attn.value.bias.data).reshape(b, t, h, dh)
    ctx = np.zeros((b, t, h, dh))
    for i in range(t):
        lo = max(0, i - attn.left_context)
        hi = i + 1 if attn.causal else min(t, i + attn.left_context + 1)
        s = np.einsum("bhd,bjhd->bhj", q[:, i], k[:, lo:hi]) / np.sqrt(dh)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        ctx[:, i] = np.einsum("bhj,bjhd->bhd", p, v[:, lo:hi])
    return ctx.reshape(b, t, d) @ attn.out.weight.data + attn.out.bias.data


class TestConfig:
    def test_defaults(self):
        cfg = AecModelConfig()
        assert (cfg.window_len, cfg.hop, cfg.feature_dim, cfg.num_layers) == (80, 40, 128, 4)
        assert cfg.hop_ms == 2.5

    @pytest.mark.parametrize("kwargs", [
        {"feature_dim": 0}, {"attn_left_context": -1}, {"attn_heads": 3},
        {"window_len": 80, "hop": 30},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AecModelConfig(**kwargs)

    def test_text_roundtrip(self):
        cfg = AecModelConfig(num_layers=2, causal=False, seed=9)
        assert AecModelConfig.from_text(cfg.to_text()) == cfg


class TestAttention:
    @pytest.mark.parametrize("causal", [True, False])
    @pytest.mark.parametrize("t", [1, 7, 32, 70])
    def test_matches_naive_loop(self, causal, t):
        rng = np.random.default_rng(t)
        with use_dtype(np.float64):
            attn = LocalSelfAttention(rng, 16, 4, 5, causal=causal)
        x = rng.standard_normal((2, t, 16))
        with no_grad():
            fast = attn(Tensor(x)).data
        np.testing.assert_allclose(fast, naive_attention(attn, x), atol=1e-12)

    def test_conformer_block_shape(self):
        block = ConformerBlock(np.random.default_rng(0), 128, 8, 31, 15)
        with no_grad():
            out = block(Tensor(np.zeros((1, 10, 128))))
        assert out.shape == (1, 10, 128)


class TestParameters:
    def test_pinned_count(self, default_model):
        assert default_model.num_parameters() == DEFAULT_PARAMETERS

    def test_within_quarter_of_1_6m(self, default_model):
        assert abs(default_model.num_parameters() - 1.6e6) <= 0.25 * 1.6e6

    @pytest.mark.parametrize("kwargs", [{}, {"num_layers": 2}, {"feature_dim": 64, "attn_heads": 4},
                                        {"conv_kernel": 7, "ffn_expansion": 2}])
    def test_matches_layer_arithmetic(self, kwargs):
        cfg = AecModelConfig(**kwargs)
        rows, total = summary(AecModel(cfg))
        assert total == expected_parameter_count(cfg)
        assert sum(r[2] for r in rows) == total

    def test_glorot_bounds_and_norm_init(self, default_model):
        w = default_model.mixture_encoder.weight.data
        assert np.abs(w).max() <= np.sqrt(6 / (80 + 128))
        np.testing.assert_array_equal(default_model.mixture_encoder.bias.data, 0)
        layer = default_model.conformer_layers[0]
        np.testing.assert_array_equal(layer.final_norm.gamma.data, 1)
        np.testing.assert_array_equal(layer.final_norm.beta.data, 0)


class TestReceptiveField:
    def test_default_310ms(self):
        assert receptive_field_ms(AecModelConfig())["attention_ms"] == 310.0

    def test_logmel_hop_3720ms(self):
        cfg = AecModelConfig(window_len=960, hop=480)
        assert cfg.hop_ms == 30.0
        assert receptive_field_ms(cfg)["attention_ms"] == 3720.0

    def test_zero_left_context(self):
        assert receptive_field_ms(AecModelConfig(attn_left_context=0))["attention_ms"] == 0.0

    def test_conv_reported_separately(self):
        assert receptive_field_ms(AecModelConfig())["conv_ms"] == 4 * 14 * 2.5


class TestForward:
    def test_shapes_and_bounds(self, default_model):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(4000).astype(np.float32)
        r = rng.standard_normal(4000).astype(np.float32)
        with no_grad():
            mix_feat = default_model.mixture_encoder(Tensor(x[:80][None, None]))
            ref_feat = default_model.reference_encoder(Tensor(r[:80][None, None]))
            mask = default_model.mask(mix_feat, ref_feat).data
            frames = default_model.decode_frames(Tensor(x[None]), Tensor(r[None])).data
        assert mask.shape == (1, 1, 128)
        assert np.all((mask > 0) & (mask < 1))
        assert frames.shape == (1, 99, 80)
        assert np.all(np.abs(frames) < 1)

    def test_enhance_length_and_range(self, default_model):
        rng = np.random.default_rng(1)
        x, r = rng.standard_normal(1234), rng.standard_normal(1234)
        y = enhance(default_model, x, r)
        assert y.shape == (1234,) and y.dtype == np.float64
        assert np.all(np.isfinite(y)) and np.all(np.abs(y) < 1)

    def test_zero_input_is_frame_stationary(self, default_model):
        y = enhance(default_model, np.zeros(8000), np.zeros(8000))
        assert np.all(np.abs(y) < 1)
        # once every layer sees a full history of identical frames the
        # output repeats with the hop
        settled = y[4000:7960]
        np.testing.assert_allclose(settled[40:], settled[:-40], atol=1e-6)

    def test_batch_matches_single(self, default_model):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 800)).astype(np.float32)
        r = rng.standard_normal((2, 800)).astype(np.float32)
        with no_grad():
            batch = default_model(x, r).data
            one = default_model(x[1], r[1]).data
        np.testing.assert_allclose(batch[1], one[0], atol=1e-5)

    def test_length_mismatch(self, default_model):
        with pytest.raises(ValueError):
            enhance(default_model, np.zeros(100), np.zeros(90))

    def test_unloaded_model(self):
        with pytest.raises(ValueError):
            enhance(None, np.zeros(100), np.zeros(100))


class TestCausality:
    def test_probe_passes(self, default_model):
        rng = np.random.default_rng(3)
        x, r = rng.standard_normal(2000), rng.standard_normal(2000)
        for t in (0, 10, 47):
            assert causality_probe(default_model, x, r, t)

    def test_last_frame_perturbation(self, default_model):
        rng = np.random.default_rng(4)
        x, r = rng.standard_normal(1000), rng.standard_normal(1000)
        assert causality_probe(default_model, x, r, 22)

    def test_non_causal_build_fails(self):
        model = AecModel(AecModelConfig(causal=False))
        rng = np.random.default_rng(5)
        x, r = rng.standard_normal(2000), rng.standard_normal(2000)
        assert not causality_probe(model, x, r, 20)

    def test_t_out_of_range(self, default_model):
        with pytest.raises(ValueError):
            causality_probe(default_model, np.zeros(400), np.zeros(400), 9)


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        model = AecModel(AecModelConfig(num_layers=1, seed=4))
        model.save(tmp_path / "m.wck")
        back = AecModel.load(tmp_path / "m.wck")
        assert back.config == model.config
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_same_seed_same_weights(self):
        a = AecModel(AecModelConfig(num_layers=1, seed=3)).state_dict()
        b = AecModel(AecModelConfig(num_layers=1, seed=3)).state_dict()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
