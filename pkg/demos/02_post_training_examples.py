"""Generate masked-LM + next-sentence examples from synthetic dialogs and
check their statistics."""

import numpy as np

from rsdpt.pretrain_gen import IS_NEXT, generate_pretrain_set, tokenize_dialogs
from rsdpt.synthetic import make_task
from rsdpt.tokenizer import build_vocab, decode_ids

task = make_task(seed=0, num_dialogs=300, num_finetune=10, num_valid=10)
vocab = build_vocab(task.post_train_dialogs, 2000)
dialogs = tokenize_dialogs(task.post_train_dialogs, vocab)

examples = list(generate_pretrain_set(dialogs, 1000, q=64, vocab=vocab, seed=0))
ex = examples[0]
n = int(ex.attention_mask.sum())
print("masked :", " ".join(decode_ids(ex.input_ids[:n], vocab)))
print("targets:", decode_ids(ex.mlm_targets, vocab), "at", ex.mlm_positions.tolist())
print("label  :", "IsNext" if ex.nsp_label == IS_NEXT else "NotNext", f"({ex.pair.dialog_a} / {ex.pair.dialog_b})")

maskable = sum(int((e.unmasked_ids()[e.attention_mask == 1] >= 6).sum()) for e in examples)
selected = sum(len(e.mlm_positions) for e in examples)
print(f"masked fraction {selected / maskable:.4f}, IsNext fraction {np.mean([e.nsp_label for e in examples]):.3f}")
