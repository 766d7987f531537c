import numpy as np
import pytest

from rsdpt import autograd as ag
from rsdpt.encoder import (
    Batch,
    Encoder,
    EncoderConfig,
    embed,
    feed_forward,
    is_checkpoint,
    load_checkpoint,
    parameter_shapes,
    pool,
    save_checkpoint,
)
from rsdpt.errors import ConfigError, DataError


def cfg(**kw):
    base = dict(num_layers=2, hidden_size=16, num_heads=2, ff_size=32, vocab_size=40, max_positions=12, dropout_rate=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def random_batch(rng, B=3, T=12, V=40, pad_from=9):
    ids = rng.integers(6, V, (B, T))
    mask = np.ones((B, T), dtype=np.int64)
    mask[0, pad_from:] = 0
    ids[0, pad_from:] = 0
    seg = np.zeros((B, T), dtype=np.int64)
    seg[:, T // 2 :] = 1
    return Batch(ids, seg, mask)


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(hidden_size=15)
    with pytest.raises(ConfigError):
        cfg(dropout_rate=1.0)


def test_parameter_inventory():
    m = Encoder(cfg(), seed=0)
    assert set(m.params) == set(parameter_shapes(m.config))
    assert m.params["layers.1.ff.in.weight"].shape == (16, 32)
    assert m.params["rs.weight"].shape == (16, 1)
    assert m.params["pooler.bias"].data.sum() == 0
    assert (m.params["embeddings.ln.gamma"].data == 1).all()
    assert np.abs(m.params["embeddings.token"].data).max() <= 0.04


def test_zero_tables_embed_to_zero(rng):
    m = Encoder(cfg(), seed=0)
    for k in ("embeddings.token", "embeddings.position", "embeddings.segment"):
        m.params[k].data[:] = 0
    h = embed(m.params, m.config, random_batch(rng))
    assert np.all(h.data == 0)


def test_embed_rejects_long_input(rng):
    m = Encoder(cfg(max_positions=8), seed=0)
    with pytest.raises(DataError):
        embed(m.params, m.config, random_batch(rng, T=12))


def test_padding_does_not_leak(rng):
    m = Encoder(cfg(), seed=0)
    b = random_batch(rng)
    out1 = m.forward(b)
    ids = b.input_ids.copy()
    ids[0, 9:] = rng.integers(6, 40, 3)
    out2 = m.forward(Batch(ids, b.segment_ids, b.attention_mask))
    np.testing.assert_array_equal(out1.t_cls.data, out2.t_cls.data)
    np.testing.assert_array_equal(out1.last_hidden.data[0, :9], out2.last_hidden.data[0, :9])


def test_attention_rows(rng):
    m = Encoder(cfg(), seed=0)
    out = m.forward(random_batch(rng))
    for probs in out.attention_probs:
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)
        assert np.all(probs[0, :, :, 9:] == 0)


def test_single_token_attention():
    x = ag.Tensor(np.random.default_rng(1).normal(size=(1, 1, 4)))
    _, probs = ag.attention(x, x, x, np.ones((1, 1)), 1)
    assert probs[0, 0, 0, 0] == 1.0


def test_fully_masked_row():
    x = ag.Tensor(np.ones((1, 2, 4)))
    with pytest.raises(ValueError, match="fully masked row"):
        ag.attention(x, x, x, np.zeros((1, 2)), 2)


def test_two_token_attention_by_hand():
    rng = np.random.default_rng(3)
    H, A = 4, 2
    q, k, v = (rng.normal(size=(1, 2, H)) for _ in range(3))
    ctx, _ = ag.attention(ag.Tensor(q), ag.Tensor(k), ag.Tensor(v), np.ones((1, 2)), A)
    d = H // A
    expected = np.zeros((2, H))
    for h in range(A):
        sl = slice(h * d, (h + 1) * d)
        for i in range(2):
            s = np.array([q[0, i, sl] @ k[0, j, sl] for j in range(2)]) / np.sqrt(d)
            w = np.exp(s - s.max())
            w /= w.sum()
            expected[i, sl] = w[0] * v[0, 0, sl] + w[1] * v[0, 1, sl]
    np.testing.assert_allclose(ctx.data[0], expected, atol=1e-6)


def test_feed_forward_zero_weights(rng):
    m = Encoder(cfg(), seed=0, dtype=np.float64)
    for k in ("ff.in.weight", "ff.out.weight"):
        m.params["layers.0." + k].data[:] = 0
    h = ag.Tensor(rng.normal(size=(2, 5, 16)))
    out = feed_forward(h, m.params, "layers.0.", m.config)
    mu = h.data.mean(-1, keepdims=True)
    var = h.data.var(-1, keepdims=True)
    np.testing.assert_allclose(out.data, (h.data - mu) / np.sqrt(var + 1e-12), atol=1e-10)
    assert ag.gelu(ag.Tensor(np.zeros(3))).data.tolist() == [0, 0, 0]


def test_feed_forward_matches_straight_line(rng):
    m = Encoder(cfg(), seed=0, dtype=np.float64)
    p = {k: t.data for k, t in m.params.items()}
    x = rng.normal(size=(2, 5, 16))
    out = feed_forward(ag.Tensor(x), m.params, "layers.1.", m.config).data
    a = x @ p["layers.1.ff.in.weight"] + p["layers.1.ff.in.bias"]
    g = 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a**3)))
    r = x + g @ p["layers.1.ff.out.weight"] + p["layers.1.ff.out.bias"]
    ref = (r - r.mean(-1, keepdims=True)) / np.sqrt(r.var(-1, keepdims=True) + 1e-12)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_zero_layer_model(rng):
    m = Encoder(cfg(num_layers=0), seed=0)
    b = random_batch(rng)
    out = m.forward(b)
    np.testing.assert_array_equal(out.t_cls.data, pool(embed(m.params, m.config, b), m.params).data)


def test_eval_mode_deterministic_and_train_mode_random(rng):
    m = Encoder(cfg(dropout_rate=0.3), seed=0)
    b = random_batch(rng)
    np.testing.assert_array_equal(m.forward(b).t_cls.data, m.forward(b).t_cls.data)
    t1 = m.forward(b, train=True, rng=np.random.default_rng(0)).t_cls.data
    t2 = m.forward(b, train=True, rng=np.random.default_rng(1)).t_cls.data
    assert not np.array_equal(t1, t2)


def test_heads(rng):
    m = Encoder(cfg(), seed=0)
    out = m.forward(random_batch(rng))
    m.params["mlm.transform.weight"].data[:] = 0
    m.params["mlm.decoder.bias"].data[:] = rng.normal(size=40)
    logits = m.mlm_logits(out.last_hidden, np.array([0, 1]), np.array([2, 5]))
    assert logits.shape == (2, 40)
    np.testing.assert_allclose(logits.data, np.tile(m.params["mlm.decoder.bias"].data, (2, 1)), atol=1e-6)

    m.params["nsp.weight"].data[:] = 0
    nsp = m.nsp_logits(out.t_cls).data
    assert np.all(nsp == 0)
    np.testing.assert_allclose(np.exp(ag.log_softmax(nsp)), 0.5)


def test_rs_score_cases(rng):
    m = Encoder(cfg(), seed=0, dtype=np.float64)
    t = ag.Tensor(rng.normal(size=(4, 16)))
    m.params["rs.weight"].data[:] = 0
    assert np.all(m.rs_score(t) == 0.5)
    m.params["rs.bias"].data[:] = 20
    s = m.rs_score(t)
    assert np.all(s >= 1 - 1e-8) and np.all(s < 1)
    m.params["rs.bias"].data[:] = -800
    assert np.all(m.rs_score(t) > 0)
    w = rng.normal(size=(16, 1))
    m.params["rs.weight"].data[:] = w
    m.params["rs.bias"].data[:] = 0.3
    np.testing.assert_allclose(m.rs_score(t), 1 / (1 + np.exp(-(t.data @ w[:, 0] + 0.3))), atol=1e-6)


def test_backward_basics():
    p = ag.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ag.backward(ag.tensor_sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))
    loss = ag.tensor_sum(p)
    ag.backward(loss)
    with pytest.raises(RuntimeError, match="already ran"):
        ag.backward(loss)
    with pytest.raises(RuntimeError, match="no recorded forward"):
        ag.backward(ag.Tensor(np.array(1.0)))


def test_frozen_tensors_get_no_grad(rng, vocab):
    from rsdpt.trainer import finetune_loss

    m = Encoder(cfg(vocab_size=len(vocab)), seed=0)
    m.set_trainable([n for n in m.names() if not n.startswith("layers.0.")])
    loss = finetune_loss(random_batch(rng, V=len(vocab)), np.array([1, 0, 1]), m)
    ag.backward(loss)
    assert all(m.params[n].grad is None for n in m.names() if n.startswith("layers.0."))
    assert m.params["layers.1.ff.in.weight"].grad is not None


def test_no_grad_records_nothing(rng):
    m = Encoder(cfg(), seed=0)
    with ag.no_grad():
        out = m.forward(random_batch(rng))
    with pytest.raises(RuntimeError, match="no recorded forward"):
        ag.backward(ag.tensor_sum(out.t_cls))


def test_checkpoint_bit_identical(tmp_path, rng):
    m = Encoder(cfg(), seed=4)
    b = random_batch(rng)
    before = m.forward(b).t_cls.data
    save_checkpoint(m, tmp_path / "ck")
    assert is_checkpoint(tmp_path / "ck")
    m2 = load_checkpoint(tmp_path / "ck")
    assert m2.config == m.config
    for n in m.names():
        assert m2.params[n].data.dtype == np.float32
        np.testing.assert_array_equal(m2.params[n].data, m.params[n].data)
    np.testing.assert_array_equal(m2.forward(b).t_cls.data, before)
    raw = np.fromfile(tmp_path / "ck" / "rs.weight.bin", dtype="<f4")
    np.testing.assert_array_equal(raw, m.params["rs.weight"].data.ravel())


def test_checkpoint_corruption(tmp_path):
    m = Encoder(cfg(), seed=0)
    save_checkpoint(m, tmp_path / "ck")
    (tmp_path / "ck" / "rs.bias.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nothing")
