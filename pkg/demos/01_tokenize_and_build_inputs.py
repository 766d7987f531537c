"""Build a vocabulary from a handful of dialogs and look at how a
(context, response) pair becomes a fixed-length model input."""

from rsdpt.corpus import Dialog
from rsdpt.tokenizer import Tokenizer, Vocab, SPECIAL_TOKENS, build_vocab, decode_ids, tokenize

dialogs = [
    Dialog("d0", ["how do i install cuda", "sudo apt-get install cuda", "thanks that worked"]),
    Dialog("d1", ["my wifi is down", "restart network manager", "still down"]),
]
vocab = build_vocab(dialogs, 120)
print(f"vocab of {len(vocab)} tokens, first ten: {vocab.tokens[:10]}")

# Pieces fall back to characters when a word is missing from the vocab.
print(tokenize("sudo apt-get install cudnn", vocab))

# A hand-made vocab reproduces the usual subword split of "sudo".
small = Vocab(SPECIAL_TOKENS + ("sud", "##o", "apt", "-", "get", "install", "cuda"))
print(tokenize("sudo apt - get install cuda", small))

tok = Tokenizer(vocab, max_context_len=20, max_response_len=8)
mi = tok.model_input(["how do i install cuda", "which version"], "sudo apt-get install cuda")
live = mi.attention_mask == 1
print(" ".join(decode_ids(mi.input_ids[live], vocab)))
print("segments:", mi.segment_ids[live].tolist())

# Without the end-of-turn marker the turns simply run together.
plain = Tokenizer(vocab, 20, 8, eot=False).model_input(["how do i install cuda", "which version"], "ok")
print(" ".join(decode_ids(plain.input_ids[plain.attention_mask == 1], vocab)))
