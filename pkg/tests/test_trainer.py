import json
import math

import numpy as np
import pytest

from rsdpt import autograd as ag
from rsdpt.corpus import EvalInstance, FineTuneExample
from rsdpt.encoder import Encoder, EncoderConfig
from rsdpt.errors import ConfigError, DataError
from rsdpt.pretrain_gen import generate_pretrain_set, tokenize_dialogs
from rsdpt.trainer import (
    OptimizerState,
    PretrainBatches,
    TrainConfig,
    adamw_step,
    collate_pretrain,
    decays,
    dpt_loss,
    fine_tune,
    finetune_loss,
    lr_schedule,
    post_train,
    resample_negatives,
    select_trainable,
)


def tiny_config(vocab, **kw):
    base = dict(num_layers=2, hidden_size=16, num_heads=2, ff_size=32, vocab_size=len(vocab), max_positions=32)
    base.update(kw)
    return EncoderConfig(**base)


def train_config(**kw):
    base = dict(max_context_len=24, max_response_len=8, batch_size=4, learning_rate=1e-3, log_interval=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.max_context_len, c.max_response_len) == (32, 3e-5, 280, 40)
    assert c.betas == (0.9, 0.999) and c.epsilon == 1e-8 and c.weight_decay == 0.01 and c.warmup_fraction == 0.1
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(negatives_per_positive=0), dict(objective="x")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError, match="exceeds num_layers"):
        TrainConfig(vft_layers=3).check_model(EncoderConfig(num_layers=2, max_positions=320))
    assert TrainConfig.from_dict(json.loads(c.to_json())) == c


def test_uniform_model_losses(dialogs, vocab):
    m = Encoder(tiny_config(vocab), seed=0)
    for name in ("mlm.decoder.weight", "mlm.decoder.bias", "nsp.weight", "nsp.bias"):
        m.params[name].data[:] = 0
    ex = list(generate_pretrain_set(tokenize_dialogs(dialogs, vocab), 4, 32, vocab, seed=0))
    loss = dpt_loss(ex, m)
    assert loss.mlm == pytest.approx(math.log(len(vocab)), rel=1e-6)
    assert loss.nsp == pytest.approx(math.log(2), rel=1e-6)
    assert float(loss.total.data) == pytest.approx(loss.mlm + loss.nsp, rel=1e-6)
    assert dpt_loss(ex, m, "mlm").nsp is None and dpt_loss(ex, m, "nsp").mlm is None


def test_dpt_loss_matches_hand_cross_entropy(dialogs, vocab):
    m = Encoder(tiny_config(vocab), seed=1, dtype=np.float64)
    ex = list(generate_pretrain_set(tokenize_dialogs(dialogs, vocab), 3, 32, vocab, seed=3))
    loss = dpt_loss(ex, m)
    out = m.forward(collate_pretrain(ex)[0])
    nll = []
    for i, e in enumerate(ex):
        logits = m.mlm_logits(out.last_hidden, np.full(len(e.mlm_positions), i), e.mlm_positions).data
        for row, t in zip(logits, e.mlm_targets):
            nll.append(np.log(np.exp(row - row.max()).sum()) + row.max() - row[t])
    nsp = m.nsp_logits(out.t_cls).data
    labels = [e.nsp_label for e in ex]
    nsp_nll = [np.log(np.exp(r).sum()) - r[y] for r, y in zip(nsp, labels)]
    assert loss.mlm == pytest.approx(np.mean(nll), abs=1e-6)
    assert loss.nsp == pytest.approx(np.mean(nsp_nll), abs=1e-6)


def test_bce_values():
    z = ag.Tensor(np.log(np.array([0.9 / 0.1, 0.2 / 0.8])).reshape(2, 1))
    loss = ag.binary_cross_entropy_with_logits(z, np.array([1, 0]))
    assert float(loss.data) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-9)
    assert float(loss.data) == pytest.approx(0.1643, abs=1e-4)
    half = ag.binary_cross_entropy_with_logits(ag.Tensor(np.zeros((3, 1))), np.array([1, 0, 1]))
    assert float(half.data) == pytest.approx(math.log(2))
    sure = ag.binary_cross_entropy_with_logits(ag.Tensor(np.array([[40.0]])), np.array([1]))
    assert 0 <= float(sure.data) < 1e-12


def test_finetune_loss_zero_head_is_ln2(vocab, tokenizer):
    m = Encoder(tiny_config(vocab), seed=0)
    m.params["rs.weight"].data[:] = 0
    inputs = [tokenizer.model_input(["how do i install cuda"], r) for r in ("thanks that worked", "still down")]
    assert float(finetune_loss(inputs, [1, 0], m).data) == pytest.approx(math.log(2), rel=1e-6)


class _One:
    """Minimal stand-in exposing the attributes adamw_step reads."""

    def __init__(self, value, grad):
        self.params = {"w": ag.Tensor(np.array([value]), requires_grad=True, name="w")}
        self.params["w"].grad = np.array([grad])


def test_adam_first_step():
    m = _One(1.0, 0.5)
    adamw_step(m, OptimizerState(), TrainConfig(weight_decay=0.0), 0.1)
    assert m.params["w"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_grad_no_change():
    m = _One(1.0, 0.0)
    adamw_step(m, OptimizerState(), TrainConfig(weight_decay=0.0), 0.1)
    assert m.params["w"].data[0] == 1.0


def test_adam_decoupled_decay():
    m = _One(2.0, 0.0)
    adamw_step(m, OptimizerState(), TrainConfig(weight_decay=0.5), 0.1)
    assert m.params["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert not decays("layers.0.attn.ln.gamma") and not decays("rs.bias") and decays("rs.weight")


def test_adam_missing_grad():
    m = _One(1.0, 0.0)
    m.params["w"].grad = None
    with pytest.raises(DataError, match="missing gradient"):
        adamw_step(m, OptimizerState(), TrainConfig(), 0.1)


def test_lr_schedule():
    c = TrainConfig(learning_rate=1e-3, max_steps=100)
    assert lr_schedule(0, c) == 0
    assert lr_schedule(10, c) == pytest.approx(1e-3)
    assert lr_schedule(5, c) == pytest.approx(5e-4)
    assert lr_schedule(55, c) == pytest.approx(5e-4)
    assert lr_schedule(100, c) == 0


def test_select_trainable(vocab):
    params = Encoder(tiny_config(vocab, num_layers=4), seed=0).params
    assert select_trainable(params, 4, 4) == set(params)
    zero = select_trainable(params, 0, 4)
    assert not any(n.startswith("layers.") for n in zero)
    assert {"embeddings.token", "pooler.weight", "rs.weight", "mlm.decoder.bias"} <= zero
    two = select_trainable(params, 2, 4)
    assert {n.split(".")[1] for n in two if n.startswith("layers.")} == {"2", "3"}
    assert "embeddings.token" not in select_trainable(params, 2, 4, freeze_embeddings=True)
    with pytest.raises(ConfigError):
        select_trainable(params, 5, 4)


def test_select_trainable_bert_base_indices():
    names = [f"layers.{i}.ff.in.weight" for i in range(12)] + ["embeddings.token"]
    got = select_trainable(names, 4, 12)
    assert got == {"embeddings.token"} | {f"layers.{i}.ff.in.weight" for i in range(8, 12)}


def positives():
    return [FineTuneExample([f"context {i}"], f"response {i}", 1) for i in range(10)]


def test_resample_negatives():
    pos = positives()
    pool = [p.response for p in pos]
    one = resample_negatives(pos, pool, 1, epoch=0, seed=0)
    assert len(one) == 20
    four = resample_negatives(pos, pool, 4, epoch=1, seed=0)
    assert len(four) == 50 and sum(x.label for x in four) == 10
    for i in range(10):
        group = four[i * 5 : (i + 1) * 5]
        negs = [x.response for x in group[1:]]
        assert group[0].label == 1 and len(set(negs)) == 4 and group[0].response not in negs
    assert four == resample_negatives(pos, pool, 4, epoch=1, seed=0)
    assert four != resample_negatives(pos, pool, 4, epoch=2, seed=0)
    with pytest.raises(DataError, match="pool too small"):
        resample_negatives(pos, pool[:4], 4, epoch=0, seed=0)


def test_post_train_loss_decreases_and_is_deterministic(dialogs, vocab):
    cfg = train_config(max_steps=40, seed=3, log_interval=40)
    mc = tiny_config(vocab, dropout_rate=0.0)
    examples = list(generate_pretrain_set(tokenize_dialogs(dialogs, vocab), 64, 32, vocab, seed=1))
    cfg.batch_size = 16
    r1 = post_train(None, vocab, cfg, model_config=mc, examples=examples)
    r2 = post_train(None, vocab, cfg, model_config=mc, examples=examples)
    assert r1.log == r2.log
    assert r1.log[-1]["loss_dpt"] < r1.log[0]["loss_dpt"]
    assert set(r1.log[0]) == {"step", "lr", "loss_dpt", "loss_mlm", "loss_nsp", "grad_norm"}


def test_post_train_objectives(dialogs, vocab):
    mc = tiny_config(vocab)
    for obj in ("mlm", "nsp"):
        rec = post_train(dialogs, vocab, train_config(max_steps=2, objective=obj), model_config=mc).log[0]
        assert (rec["loss_mlm"] is None) == (obj == "nsp")
        assert (rec["loss_nsp"] is None) == (obj == "mlm")


def test_post_train_keeps_rs_head(dialogs, vocab):
    m = Encoder(tiny_config(vocab), seed=0)
    before = m.params["rs.weight"].data.copy()
    post_train(dialogs, vocab, train_config(max_steps=3), model=m)
    np.testing.assert_array_equal(m.params["rs.weight"].data, before)


def test_resume_reproduces_next_step(dialogs, vocab, tmp_path):
    mc = tiny_config(vocab)
    full = post_train(dialogs, vocab, train_config(max_steps=6, seed=2), model_config=mc)
    part = train_config(max_steps=6, seed=2, checkpoint_interval=3)
    post_train(dialogs, vocab, part, model_config=mc, out_dir=tmp_path / "run")
    resumed = post_train(dialogs, vocab, train_config(max_steps=6, seed=2), resume_from=tmp_path / "run" / "step-3")
    by_step = {r["step"]: r for r in full.log}
    for rec in resumed.log:
        assert rec["loss_dpt"] == pytest.approx(by_step[rec["step"]]["loss_dpt"], abs=1e-6)
    assert resumed.log[0]["step"] == 4


def test_pretrain_batches_keyed_by_step(dialogs, vocab):
    b = PretrainBatches(vocab, train_config(), dialogs=dialogs)
    assert [e.to_json() for e in b(5)] == [e.to_json() for e in b(5)]
    assert [e.to_json() for e in b(5)] != [e.to_json() for e in b(6)]


def ft_data():
    ctx = [["how do i install cuda"], ["my wifi is down"], ["which python version"], ["grub fails to load"]]
    resp = ["sudo apt-get install cuda", "restart network manager", "python3 is the default", "reinstall grub"]
    out = []
    for i, c in enumerate(ctx):
        out.append(FineTuneExample(c, resp[i], 1))
        out.append(FineTuneExample(c, resp[(i + 1) % 4], 0))
    return out


def test_fine_tune_freezes_and_selects(vocab, tokenizer, tmp_path):
    m = Encoder(tiny_config(vocab), seed=0)
    before = m.state_dict()
    valid = [EvalInstance(["my wifi is down"], ["restart network manager", "reinstall grub"], 0)]
    cfg = train_config(vft_layers=1, epochs=2, negatives_per_positive=2)
    r = fine_tune(ft_data(), valid, tokenizer, cfg, model=m, out_dir=tmp_path / "ft")
    after = r.model.state_dict()
    for n in before:
        if n.startswith(("layers.0.", "mlm.", "nsp.")):
            np.testing.assert_array_equal(before[n], after[n])
    assert not np.array_equal(before["layers.1.ff.in.weight"], after["layers.1.ff.in.weight"])
    assert len(r.history) == 2 and "MRR" in r.history[0]
    assert (tmp_path / "ft" / "vocab.txt").exists() and (tmp_path / "ft" / "train_config.json").exists()


def test_fine_tune_rejects_t_above_l(vocab, tokenizer):
    m = Encoder(tiny_config(vocab), seed=0)
    with pytest.raises(ConfigError):
        fine_tune(ft_data(), None, tokenizer, train_config(vft_layers=3), model=m)


def test_fine_tune_deterministic(vocab, tokenizer):
    cfg = train_config(epochs=2, seed=5)
    logs = [fine_tune(ft_data(), None, tokenizer, cfg, model_config=tiny_config(vocab)).log for _ in range(2)]
    assert logs[0] == logs[1]
