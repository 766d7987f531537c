"""Tune only the top layers and train with four resampled negatives per
positive."""

from rsdpt.encoder import Encoder, EncoderConfig
from rsdpt.synthetic import make_task
from rsdpt.tokenizer import Tokenizer, build_vocab
from rsdpt.trainer import TrainConfig, resample_negatives, select_trainable, vft_sweep

task = make_task(seed=1, num_dialogs=300, num_finetune=100, num_valid=50)
vocab = build_vocab(task.post_train_dialogs, 2000)
tok = Tokenizer(vocab, 32, 12)
cfg = EncoderConfig(num_layers=4, hidden_size=32, num_heads=4, ff_size=64, vocab_size=len(vocab), max_positions=44)
init = Encoder(cfg, seed=1)

for T in (0, 2, 4):
    tuned = sorted({n.split(".")[1] for n in select_trainable(init.params, T, 4) if n.startswith("layers.")})
    print(f"T={T}: tuned encoder layers {tuned}")

positives = [x for x in task.train if x.label == 1]
pool = [x.response for x in task.train]
epoch0 = resample_negatives(positives, pool, k=4, epoch=0, seed=0)
epoch1 = resample_negatives(positives, pool, k=4, epoch=1, seed=0)
print(f"{len(epoch0)} examples per epoch, negatives differ across epochs: {epoch0 != epoch1}")

train_cfg = TrainConfig(max_context_len=32, max_response_len=12, learning_rate=1e-3, epochs=2,
                        negatives_per_positive=4, log_interval=1000)
best_T, result, scores = vft_sweep(task.train, task.valid, tok, train_cfg, init, layer_counts=[0, 2, 4])
print("validation MRR by T:", {t: round(s, 3) for t, s in scores.items()}, "best T:", best_T)
