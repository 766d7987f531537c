"""Dialogs, labeled fine-tuning triples and n-candidate evaluation instances,
with their JSON Lines / Ubuntu TSV loaders."""

from __future__ import annotations

import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class Dialog:
    id: str
    utterances: list[str]

    def __post_init__(self):
        if not isinstance(self.utterances, list) or not self.utterances:
            raise DataError(f"dialog {self.id!r}: needs at least one utterance")
        if any(not isinstance(u, str) or not u.strip() for u in self.utterances):
            raise DataError(f"dialog {self.id!r}: empty utterance")


@dataclass
class FineTuneExample:
    context: list[str]
    response: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if not self.context:
            raise DataError("empty context")


@dataclass
class EvalInstance:
    context: list[str]
    candidates: list[str]
    ground_truth_index: int

    def __post_init__(self):
        n = len(self.candidates)
        if n < 2:
            raise DataError(f"need at least 2 candidates, got {n}")
        if not self.context:
            raise DataError("empty context")
        if not isinstance(self.ground_truth_index, int) or not 0 <= self.ground_truth_index < n:
            raise DataError(f"ground_truth_index {self.ground_truth_index!r} out of range for {n} candidates")

    @property
    def n(self) -> int:
        return len(self.candidates)


@contextmanager
def _open_text(path):
    if str(path) == "-":
        yield sys.stdin
    else:
        with open(path, "r", encoding="utf-8") as fh:
            yield fh


def _jsonl_records(path) -> Iterator[tuple[int, dict]]:
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_dialogs(path) -> list[Dialog]:
    dialogs = []
    for lineno, obj in _jsonl_records(path):
        try:
            dialogs.append(Dialog(id=str(obj["id"]), utterances=obj["utterances"]))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return dialogs


def load_eval(path) -> list[EvalInstance]:
    out = []
    for lineno, obj in _jsonl_records(path):
        try:
            out.append(EvalInstance(list(obj["context"]), list(obj["candidates"]), obj["ground_truth_index"]))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except (DataError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def load_finetune(path) -> list[FineTuneExample]:
    out = []
    for lineno, obj in _jsonl_records(path):
        try:
            out.append(FineTuneExample(list(obj["context"]), str(obj["response"]), obj["label"]))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except (DataError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def _split_turns(field: str) -> list[str]:
    flat = field.replace("__eou__", " ")
    return [" ".join(turn.split()) for turn in flat.split("__eot__") if turn.strip()]


def import_ubuntu_tsv(path, strict: bool = True) -> list[FineTuneExample]:
    """Read ``context<TAB>response<TAB>label`` lines.

    Turns in the context are separated by ``__eot__``; ``__eou__`` marks a
    sentence end inside a turn and becomes a space. Lines whose context is
    empty raise, or are skipped and counted when ``strict`` is false.
    """
    out = []
    skipped = 0
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
            ctx_field, response, label = cols
            if label.strip() not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            context = _split_turns(ctx_field)
            if not context:
                if strict:
                    raise DataError(f"{path}:{lineno}: empty context")
                skipped += 1
                continue
            response = " ".join(response.replace("__eou__", " ").replace("__eot__", " ").split())
            out.append(FineTuneExample(context, response, int(label)))
    if skipped:
        logger.warning("skipped %d lines with empty context in %s", skipped, path)
    return out


def _write_jsonl(records: Iterable[dict], path):
    if str(path) == "-":
        for rec in records:
            sys.stdout.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def save_dialogs(dialogs: Iterable[Dialog], path):
    _write_jsonl((asdict(d) for d in dialogs), path)


def save_eval(instances: Iterable[EvalInstance], path):
    _write_jsonl((asdict(x) for x in instances), path)


def save_finetune(examples: Iterable[FineTuneExample], path):
    _write_jsonl((asdict(x) for x in examples), path)


def dialogs_to_positives(dialogs: Iterable[Dialog]) -> list[FineTuneExample]:
    """Last utterance as the positive response to the turns before it."""
    return [FineTuneExample(d.utterances[:-1], d.utterances[-1], 1) for d in dialogs if len(d.utterances) >= 2]


def eval_to_finetune(
    instances: Sequence[EvalInstance], negatives: int = 1, strategy: str = "random", seed: int = 0
) -> list[FineTuneExample]:
    """Turn n-candidate instances into labeled pairs with ``negatives`` negatives
    each, picked either as the first non-truth candidates or at random."""
    if strategy not in ("random", "first"):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    out = []
    for inst in instances:
        gt = inst.ground_truth_index
        others = [i for i in range(inst.n) if i != gt]
        if negatives > len(others):
            raise DataError(f"instance has only {len(others)} negatives, {negatives} requested")
        if strategy == "first":
            picks = others[:negatives]
        else:
            picks = [others[i] for i in rng.choice(len(others), size=negatives, replace=False)]
        out.append(FineTuneExample(list(inst.context), inst.candidates[gt], 1))
        out.extend(FineTuneExample(list(inst.context), inst.candidates[i], 0) for i in picks)
    return out
