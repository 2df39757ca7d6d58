import numpy as np
import pytest

from config import PAD_ID
from errors import ConfigError, InputError
from tensor import Tensor, finite_diff_check, softmax
from training import ce_loss
from transformer import (
    ModelConfig,
    causal_mask,
    decode,
    encode,
    init_model_params,
    multi_head_attention,
    output_logits,
    param_shapes,
)


def _encoded(params, batch):
    return encode(batch.src_ids, batch.src_pad_mask, params, "eval")


def test_causal_mask_examples():
    np.testing.assert_array_equal(causal_mask(1), [[False]])
    np.testing.assert_array_equal(causal_mask(2), [[False, True], [False, False]])
    assert causal_mask(5).sum() == 10


def test_causal_mask_rejects_empty():
    with pytest.raises(InputError):
        causal_mask(0)


def test_model_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(src_vocab_size=5, tgt_vocab_size=5, d_model=6, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(src_vocab_size=5, tgt_vocab_size=0).validate()


def test_output_shapes(make_params, tiny_batch):
    params = make_params("baseline")
    enc = _encoded(params, tiny_batch)
    batch, src_len = tiny_batch.src_ids.shape
    tgt_len = tiny_batch.tgt_in_ids.shape[1]
    assert enc.shape == (batch, src_len, 8)
    dec = decode(tiny_batch.tgt_in_ids, enc, tiny_batch.src_pad_mask, tiny_batch.causal_mask, params)
    assert dec.shape == (batch, tgt_len, 8)
    assert output_logits(dec, params).shape == (batch, tgt_len, 12)


def test_decoder_is_causal(make_params, tiny_batch):
    params = make_params("baseline", seed=3)
    enc = _encoded(params, tiny_batch)
    base = decode(tiny_batch.tgt_in_ids, enc, tiny_batch.src_pad_mask, tiny_batch.causal_mask, params).data
    length = tiny_batch.tgt_in_ids.shape[1]
    for cut in range(1, length):
        changed = tiny_batch.tgt_in_ids.copy()
        changed[:, cut:] = (changed[:, cut:] + 5) % 12
        out = decode(changed, enc, tiny_batch.src_pad_mask, tiny_batch.causal_mask, params).data
        np.testing.assert_allclose(out[:, :cut], base[:, :cut], rtol=0, atol=1e-12)
        assert not np.allclose(out[:, cut:], base[:, cut:])


def test_source_padding_is_inert(make_params, tiny_batch):
    params = make_params("baseline", seed=4)
    enc = _encoded(params, tiny_batch)
    noisy_ids = tiny_batch.src_ids.copy()
    noisy_ids[tiny_batch.src_pad_mask] = 7
    noisy = encode(noisy_ids, tiny_batch.src_pad_mask, params, "eval")
    keep = ~tiny_batch.src_pad_mask
    np.testing.assert_allclose(noisy.data[keep], enc.data[keep], rtol=0, atol=1e-12)

    args = (tiny_batch.tgt_in_ids,)
    rest = (tiny_batch.src_pad_mask, tiny_batch.causal_mask, params)
    np.testing.assert_allclose(decode(*args, noisy, *rest).data, decode(*args, enc, *rest).data, rtol=0, atol=1e-12)


def test_extra_padding_leaves_encoder_rows_unchanged(make_params):
    params = make_params("baseline", seed=2)
    ids = np.array([[4, 5, 6]])
    padded = np.array([[4, 5, 6, PAD_ID, PAD_ID]])
    short = encode(ids, ids == PAD_ID, params).data
    long = encode(padded, padded == PAD_ID, params).data
    np.testing.assert_allclose(long[:, :3], short, atol=1e-12)


def test_encoder_is_permutation_equivariant_without_positions(make_params):
    params = make_params("baseline", seed=6, use_positions=False)
    ids = np.array([[4, 7, 5, 9]])
    mask = np.zeros_like(ids, dtype=bool)
    order = [2, 0, 3, 1]
    out = encode(ids, mask, params).data
    permuted = encode(ids[:, order], mask, params).data
    np.testing.assert_allclose(permuted[0], out[0, order], atol=1e-10)


def test_attention_rows_sum_to_one(make_params, tiny_batch):
    params = make_params("baseline", seed=1)
    enc = _encoded(params, tiny_batch)
    blocked = tiny_batch.src_pad_mask[:, None, None, :]
    _, weights = multi_head_attention(enc, enc, blocked, "enc.0.self_attn", params, "eval")
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(weights.data[np.broadcast_to(blocked, weights.shape)] == 0.0)


def test_single_head_encoder_layer_matches_manual_computation():
    config = ModelConfig(src_vocab_size=6, tgt_vocab_size=6, d_model=2, d_ffn=2, n_heads=1, n_layers=1, dropout=0.0, use_positions=False)
    params = init_model_params(config, "baseline", seed=0)
    emb = np.arange(12, dtype=float).reshape(6, 2) / 10.0
    params["src_embedding"].data[...] = emb
    params["enc.0.self_attn.wq"].data[...] = [[1.0, 0.0], [0.0, 1.0]]
    params["enc.0.self_attn.wk"].data[...] = [[0.5, 0.0], [0.0, 2.0]]
    params["enc.0.self_attn.wv"].data[...] = [[1.0, 1.0], [0.0, 1.0]]
    params["enc.0.self_attn.wo"].data[...] = [[1.0, 0.0], [1.0, -1.0]]
    params["enc.0.ffn.w1"].data[...] = [[1.0, -1.0], [0.5, 0.5]]
    params["enc.0.ffn.w2"].data[...] = [[1.0, 0.0], [0.0, 1.0]]

    ids = np.array([[4, 5]])
    out = encode(ids, np.zeros_like(ids, dtype=bool), params).data[0]

    def norm(v):
        return (v - v.mean(axis=-1, keepdims=True)) / np.sqrt(v.var(axis=-1, keepdims=True) + 1e-5)

    x = emb[[4, 5]] * np.sqrt(2.0)
    q, k = x @ params["enc.0.self_attn.wq"].data, x @ params["enc.0.self_attn.wk"].data
    scores = q @ k.T / np.sqrt(2.0)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    c = norm(weights @ (x @ params["enc.0.self_attn.wv"].data) @ params["enc.0.self_attn.wo"].data + x)
    ffn = np.maximum(c @ params["enc.0.ffn.w1"].data, 0.0) @ params["enc.0.ffn.w2"].data
    np.testing.assert_allclose(out, norm(ffn + c), atol=1e-12)


def test_single_head_decoder_layer_matches_manual_computation():
    config = ModelConfig(src_vocab_size=7, tgt_vocab_size=7, d_model=4, d_ffn=6, n_heads=1, n_layers=1, dropout=0.0, use_positions=False)
    params = init_model_params(config, "baseline", seed=3)
    rng = np.random.default_rng(8)
    for name in params.names():
        if name.startswith("dec.0."):
            params[name].data[...] = rng.normal(scale=0.7, size=params[name].shape)
    p = {name: params[name].data for name in params.names()}

    memory = rng.normal(size=(1, 3, 4))
    src_pad = np.array([[False, False, True]])
    ids = np.array([[1, 5, 6]])
    out = decode(ids, Tensor(memory), src_pad, causal_mask(3), params).data[0]

    def norm(v, prefix):
        centered = v - v.mean(axis=-1, keepdims=True)
        scaled = centered / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + 1e-5)
        return scaled * p[f"{prefix}.gain"] + p[f"{prefix}.bias"]

    def attend(query, keys, blocked, prefix):
        q, k, v = query @ p[f"{prefix}.wq"], keys @ p[f"{prefix}.wk"], keys @ p[f"{prefix}.wv"]
        scores = np.where(blocked, -np.inf, q @ k.T / 2.0)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        return weights @ v @ p[f"{prefix}.wo"]

    x = p["tgt_embedding"][ids[0]] * 2.0
    future = np.triu(np.ones((3, 3), dtype=bool), k=1)
    c = norm(attend(x, x, future, "dec.0.self_attn") + x, "dec.0.ln1")
    d = norm(attend(c, memory[0], np.broadcast_to(src_pad, (3, 3)), "dec.0.cross_attn") + c, "dec.0.ln2")
    ffn = np.maximum(d @ p["dec.0.ffn.w1"] + p["dec.0.ffn.b1"], 0.0) @ p["dec.0.ffn.w2"] + p["dec.0.ffn.b2"]
    np.testing.assert_allclose(out, norm(ffn + d, "dec.0.ln3"), atol=1e-12)


def test_output_logits_examples(make_params):
    params = make_params("baseline")
    zero = output_logits(Tensor(np.zeros((3, 8))), params)
    np.testing.assert_array_equal(zero.data, 0.0)

    rng = np.random.default_rng(0)
    probs = softmax(output_logits(Tensor(rng.normal(size=(2, 5, 8))), params), axis=-1).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_output_logits_hand_set_head():
    config = ModelConfig(src_vocab_size=3, tgt_vocab_size=3, d_model=2, d_ffn=2, n_heads=1, n_layers=1)
    params = init_model_params(config, "baseline", seed=0)
    params["out.W_w"].data[...] = [[1.0, 2.0], [3.0, 4.0]]
    params["out.W_o"].data[...] = [[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]
    logits = output_logits(Tensor(np.array([[1.0, 0.0]])), params).data[0]
    hidden = np.tanh([1.0, 2.0])
    np.testing.assert_allclose(logits, [hidden[0] + 0.5 * hidden[1], 2.0 * hidden[1], -hidden[0]], atol=1e-15)


def test_tied_output_uses_target_embedding(make_params):
    params = make_params("baseline", tie_output_embedding=True)
    assert "out.W_o" not in params
    hidden = Tensor(np.ones((1, 8)))
    expected = np.tanh(hidden.data @ params["out.W_w"].data) @ params["tgt_embedding"].data.T
    np.testing.assert_allclose(output_logits(hidden, params).data, expected)


def test_init_is_seed_deterministic(make_params):
    a, b, c = make_params(seed=5), make_params(seed=5), make_params(seed=6)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_shared_parameters_do_not_depend_on_variant(make_params):
    baseline, model1, model2 = (make_params(v, seed=9) for v in ("baseline", "model1", "model2"))
    assert not baseline.has_future
    assert baseline.names() == model1.shared_names() == model2.shared_names()
    for name in baseline.names():
        np.testing.assert_array_equal(baseline[name].data, model1[name].data)
        np.testing.assert_array_equal(baseline[name].data, model2[name].data)
    assert "future.W_g" in model2 and "future.W_g" not in model1


def test_param_shapes_follow_config(tiny_config):
    shapes = param_shapes(tiny_config, "model2")
    assert shapes["out.W_w"] == (8, 8)
    assert shapes["out.W_o"] == (8, 12)
    assert shapes["future.head_W_o"] == (8, 12)
    assert shapes["future.W_g"] == (16, 1)


def test_count_parameters(make_params):
    params = make_params("model1")
    counts = params.count_parameters()
    assert counts["future"] == 6 * 64 + 64 + 8 * 12
    assert counts["total"] == counts["shared"] + counts["future"]


def test_sequence_longer_than_max_len_is_rejected(make_params):
    params = make_params("baseline", max_len=4)
    ids = np.full((1, 5), 4)
    with pytest.raises(InputError, match="max_len"):
        encode(ids, ids == PAD_ID, params)


def test_unknown_mode_is_rejected(make_params, tiny_batch):
    with pytest.raises(ConfigError):
        encode(tiny_batch.src_ids, tiny_batch.src_pad_mask, make_params("baseline"), "predict")


def test_copy_keeps_values_and_detaches_storage(make_params):
    params = make_params()
    clone = params.copy()
    clone["out.W_w"].data[0, 0] += 1.0
    assert clone["out.W_w"].data[0, 0] != params["out.W_w"].data[0, 0]
    np.testing.assert_array_equal(clone["enc.0.ffn.w1"].data, params["enc.0.ffn.w1"].data)


def _ce_gradcheck(params, batch):
    def loss():
        enc = encode(batch.src_ids, batch.src_pad_mask, params, "eval")
        dec = decode(batch.tgt_in_ids, enc, batch.src_pad_mask, batch.causal_mask, params, "eval")
        return ce_loss(output_logits(dec, params), batch.tgt_out_ids, batch.tgt_pad_mask, 0.1)

    return finite_diff_check(loss, dict(params.items()), tol=1e-4)


def test_ce_gradients_single_layer(make_params, copy_pairs, copy_vocab):
    from data import collate

    params = make_params("baseline", seed=8)
    report = _ce_gradcheck(params, collate(copy_pairs[:2], copy_vocab, copy_vocab))
    assert report.ok, report.failures


@pytest.mark.slow
def test_ce_gradients_two_layers(make_params, copy_pairs, copy_vocab):
    from data import collate

    params = make_params("baseline", seed=8, n_layers=2)
    report = _ce_gradcheck(params, collate(copy_pairs[:2], copy_vocab, copy_vocab))
    assert report.ok, report.failures
