"""Post-train a small encoder on an in-domain corpus, then fine-tune it for
response selection and compare with fine-tuning from random weights.

Takes a few minutes on one core.
"""

from rsdpt.encoder import Encoder, EncoderConfig
from rsdpt.synthetic import make_task
from rsdpt.tokenizer import Tokenizer, build_vocab
from rsdpt.trainer import TrainConfig, fine_tune, post_train

task = make_task(seed=0)
vocab = build_vocab(task.post_train_dialogs, 2000)
tok = Tokenizer(vocab, 48, 16)
model_cfg = EncoderConfig(num_layers=2, hidden_size=64, num_heads=4, ff_size=128, vocab_size=len(vocab), max_positions=64)
common = dict(max_context_len=48, max_response_len=16, seed=0, log_interval=250)

pt_cfg = TrainConfig(**common, learning_rate=1e-3, max_steps=1500, objective="mlm+nsp")
post = post_train(task.post_train_dialogs, vocab, pt_cfg, model_config=model_cfg,
                  callback=lambda r: print(f"  step {r['step']:5d}  mlm {r['loss_mlm']:.3f}  nsp {r['loss_nsp']:.3f}"))

ft_cfg = TrainConfig(**common, learning_rate=1e-4, epochs=5)
for name, init in [("post-trained", post.model), ("random init", Encoder(model_cfg, seed=0))]:
    result = fine_tune(task.train, task.valid, tok, ft_cfg, model=init.copy())
    best = result.history[result.best_epoch]
    print(f"{name:13s} R@1 {best['R@1']:.3f}  R@2 {best['R@2']:.3f}  R@5 {best['R@5']:.3f}  MRR {best['MRR']:.3f}")
