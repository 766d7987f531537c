"""Drive the full pipeline through the ``rsdpt`` command: vocab, prepared
examples, post-training, fine-tuning, evaluation and prediction."""

import subprocess
import sys
import tempfile
from pathlib import Path

from rsdpt import corpus
from rsdpt.synthetic import make_task

work = Path(tempfile.mkdtemp(prefix="rsdpt-demo-"))
task = make_task(seed=2, num_dialogs=300, num_finetune=60, num_valid=30)
corpus.save_dialogs(task.post_train_dialogs, work / "dialogs.jsonl")
corpus.save_finetune(task.train, work / "train.jsonl")
corpus.save_eval(task.valid, work / "valid.jsonl")

small = ["--max-context-len", "32", "--max-response-len", "12", "--batch-size", "16", "--lr", "1e-3"]
arch = ["--layers", "2", "--hidden", "32", "--heads", "4", "--ff", "64"]


def rsdpt(*args):
    cmd = [sys.executable, "-m", "rsdpt.cli", *map(str, args)]
    print("$ rsdpt", " ".join(map(str, args)))
    subprocess.run(cmd, check=True, env={"RSDPT_LOG": "error", "PATH": ""})


rsdpt("build-vocab", "--input", work / "dialogs.jsonl", "--size", 8000, "--out", work / "vocab.txt")
rsdpt("prepare-pretrain", "--dialogs", work / "dialogs.jsonl", "--vocab", work / "vocab.txt", "--count", 200,
      "--seq-len", 44, "--out", work / "pretrain.jsonl")
rsdpt("post-train", "--pretrain-data", work / "pretrain.jsonl", "--vocab", work / "vocab.txt", "--max-steps", 50,
      *small, *arch, "--out", work / "dpt")
rsdpt("fine-tune", "--train", work / "train.jsonl", "--valid", work / "valid.jsonl", "--init", work / "dpt",
      "--vft-layers", 1, "--negatives", 4, "--epochs", 1, "--out", work / "ft")
rsdpt("evaluate", "--checkpoint", work / "ft", "--data", work / "valid.jsonl", "--report", work / "report.json")
rsdpt("predict", "--checkpoint", work / "ft", "--data", work / "valid.jsonl", "--out", work / "scores.jsonl")
print("artifacts in", work)
