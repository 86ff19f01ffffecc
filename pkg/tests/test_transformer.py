import numpy as np
import pytest

from spkadapt import autodiff as ad
from spkadapt.autodiff import ShapeError, Tensor
from spkadapt.gradcheck import analytic_grads, relative_error
from spkadapt.speaker_memory import ConfigurationError, build_bank
from spkadapt.transformer import (
    BOS,
    EOS,
    ModelConfig,
    Model,
    analytic_param_count,
    causal_mask,
    decode_forward_batch,
    encode_batch,
    multi_head_attention,
    pad_features,
    positional_encoding,
    subsampled_length,
)


def small_cfg(**kw):
    base = dict(d_model=8, n_heads=2, d_ff=12, n_enc=2, n_dec=1, vocab_size=9, d_feat=5)
    base.update(kw)
    return ModelConfig(**base)


def toy_bank(cfg, seed=0, n_layers=1):
    rng = np.random.default_rng(seed)
    emb = {f"s{i}": rng.normal(size=6) for i in range(cfg.n_mem + 2)}
    return build_bank(emb, cfg.n_mem, cfg.d_k, seed, n_layers=n_layers)


@pytest.mark.parametrize("t", range(4, 30))
def test_subsampled_length(t):
    model = Model.create(small_cfg(), 0)
    enc, pad = model.encode(np.zeros((1, t, 5)))
    assert enc.shape == (1, subsampled_length(t), 8)
    assert subsampled_length(t) == -(-(-(-t // 2)) // 2)


def test_too_short_input_rejected():
    model = Model.create(small_cfg(), 0)
    with pytest.raises(ValueError, match="too short"):
        model.encode(np.zeros((1, 3, 5)))


def test_feature_dim_mismatch():
    model = Model.create(small_cfg(), 0)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((1, 8, 6)))


def test_parameter_count_matches_analytic():
    for kw in [{}, {"memory_enabled": True}, {"memory_enabled": True, "memory_per_layer": True}]:
        cfg = small_cfg(**kw)
        bank = toy_bank(cfg, n_layers=cfg.n_enc if cfg.memory_per_layer else 1) if cfg.memory_enabled else None
        assert Model.create(cfg, 0, bank).parameter_count() == analytic_param_count(cfg)
    assert analytic_param_count(ModelConfig()) == Model.create(ModelConfig(), 0).parameter_count()


@pytest.mark.parametrize(
    "kw", [{"d_model": 10, "n_heads": 4}, {"vocab_size": 3}, {"dropout_rate": 1.0}, {"n_dec": 0}]
)
def test_bad_config(kw):
    with pytest.raises(ConfigurationError):
        small_cfg(**kw)


def test_bank_required_exactly_when_enabled():
    cfg = small_cfg(memory_enabled=True)
    with pytest.raises(ConfigurationError):
        Model.create(cfg, 0)
    with pytest.raises(ConfigurationError):
        Model.create(small_cfg(), 0, toy_bank(cfg))


def test_padding_does_not_change_valid_outputs():
    cfg = small_cfg(memory_enabled=True)
    model = Model.create(cfg, 1, toy_bank(cfg))
    rng = np.random.default_rng(0)
    feats = [rng.normal(size=(t, 5)) for t in (13, 6, 9)]
    padded, lengths = pad_features(feats)
    batch, pad = model.encode(padded, lengths)
    tokens = np.array([[BOS, 4, 5, 6]])
    for i, f in enumerate(feats):
        alone, _ = model.encode(f[None])
        n = subsampled_length(len(f))
        assert not pad[i, :n].any() and pad[i, n:].all()
        np.testing.assert_allclose(batch.data[i, :n], alone.data[0], atol=1e-12)
        lb = decode_forward_batch(tokens, Tensor(batch.data[i : i + 1]), pad[i : i + 1], model.params, cfg)
        la = decode_forward_batch(tokens, alone, None, model.params, cfg)
        np.testing.assert_allclose(lb.data, la.data, atol=1e-11)


def test_decoder_is_causal():
    cfg = small_cfg()
    model = Model.create(cfg, 2)
    enc, pad = model.encode(np.random.default_rng(1).normal(size=(1, 10, 5)))
    a = decode_forward_batch(np.array([[BOS, 3, 4, 5, 6]]), enc, pad, model.params, cfg).data
    b = decode_forward_batch(np.array([[BOS, 3, 4, 8, 7]]), enc, pad, model.params, cfg).data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
    assert not np.allclose(a[0, 3:], b[0, 3:])


def test_decoder_rejects_bad_ids():
    cfg = small_cfg()
    model = Model.create(cfg, 2)
    enc, pad = model.encode(np.zeros((1, 8, 5)))
    with pytest.raises(ValueError):
        decode_forward_batch(np.array([[BOS, 9]]), enc, pad, model.params, cfg)


def test_attention_rows_sum_to_one_and_masked_columns_are_zero():
    cfg = small_cfg(memory_enabled=True)
    model = Model.create(cfg, 0, toy_bank(cfg))
    rng = np.random.default_rng(5)
    feats, lengths = pad_features([rng.normal(size=(t, 5)) for t in (17, 8)])
    weights = []
    _, pad = encode_batch(feats, model.params, cfg, model.bank, lengths, attn_weights=weights)
    assert len(weights) == cfg.n_enc
    for w in weights:
        t = pad.shape[1]
        assert w.shape == (2, cfg.n_heads, t, t + cfg.n_mem)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        # padded keys get no weight; memory columns always get some
        assert np.all(w[1][:, :, :t][:, :, pad[1]] < 1e-300)
        assert np.all(w[..., t:] > 0)


def test_attention_mask_shape_checked():
    rng = np.random.default_rng(0)
    params = {f"a.{n}": Tensor(rng.normal(size=(4, 4))) for n in ("wq", "wk", "wv", "wo")}
    x = Tensor(rng.normal(size=(2, 3, 4)))
    with pytest.raises(ShapeError):
        multi_head_attention(x, x, x, params, "a", 2, mask=np.zeros((2, 3, 4), dtype=bool))


def test_positional_encoding_values():
    pe = positional_encoding(5, 6)
    assert pe[0, 0] == 0.0 and pe[0, 1] == 1.0
    np.testing.assert_allclose(pe[3, 2], np.sin(3 / 10000 ** (2 / 6)))
    np.testing.assert_allclose(pe[3, 5], np.cos(3 / 10000 ** (4 / 6)))


def test_causal_mask():
    np.testing.assert_array_equal(causal_mask(3), [[0, 1, 1], [0, 0, 1], [0, 0, 0]])


def test_dropout_only_with_rng():
    cfg = small_cfg(dropout_rate=0.5)
    model = Model.create(cfg, 0)
    x = np.random.default_rng(0).normal(size=(1, 9, 5))
    a, _ = model.encode(x)
    b, _ = model.encode(x)
    np.testing.assert_array_equal(a.data, b.data)
    c, _ = model.encode(x, rng=np.random.default_rng(1))
    assert not np.allclose(a.data, c.data)


def test_end_to_end_gradient_spot_check():
    cfg = small_cfg(memory_enabled=True, dropout_rate=0.0)
    model = Model.create(cfg, 3, toy_bank(cfg))
    rng = np.random.default_rng(2)
    feats, lengths = pad_features([rng.normal(size=(t, 5)) for t in (11, 7)])
    tok_in = np.array([[BOS, 3, 4, 5], [BOS, 6, 2, 2]])
    tok_out = np.array([[3, 4, 5, EOS], [6, EOS, 2, 2]])

    def loss():
        return ad.cross_entropy(model.logits(feats, lengths, tok_in), tok_out, ignore_index=2)

    names = ["frontend.conv1.w", "enc.1.attn.wk", "mem.u_k", "dec.0.cross.wv", "dec.out.b"]
    inputs = [model.params[n] for n in names]
    grads = analytic_grads(loss, inputs)
    eps = 1e-6
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        num = []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss().item()
            flat[i] = orig - eps
            lo = loss().item()
            flat[i] = orig
            num.append((hi - lo) / (2 * eps))
        assert relative_error(g.reshape(-1)[picks], np.array(num)) < 1e-5
