"""Supervised fine-tuning on single-turn question/answer pairs.

Template: ``<s> [INST] {question} [/INST] {answer} </s>``. The markers
``[INST]``/``[/INST]`` are ordinary text. ``<s>`` and ``</s>`` become the BOS
and EOS ids, and the single spaces next to them are separators that the
special tokens absorb, so an item is::

    [BOS] + enc("[INST] {q} [/INST] ") + enc(answer) + [EOS]

Only predictions of answer tokens and of the final EOS contribute to the loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointIncompatible, MalformedRecord, TooLong
from .model import ModelConfig
from .tokenizer import TokenizerModel
from .trainer import (
    MonitorReport,
    OptimConfig,
    TrainState,
    cosine_lr,
    load_checkpoint,
    train_step,
    write_checkpoint,
)

log = logging.getLogger(__name__)

INST_OPEN = "[INST]"
INST_CLOSE = "[/INST]"
SFT_LR = 2e-5
MAX_EPOCHS = 3


@dataclass(frozen=True)
class ChatExample:
    question: str
    answer: str

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be non-empty")


@dataclass(frozen=True)
class SftBatchItem:
    """``loss_mask[t]`` says whether predicting ``tokens[t + 1]`` counts."""

    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    @property
    def n_loss_tokens(self) -> int:
        return sum(self.loss_mask)


def render_template(ex: ChatExample) -> str:
    return f"<s> {INST_OPEN} {ex.question} {INST_CLOSE} {ex.answer} </s>"


def parse_template(text: str) -> ChatExample:
    """Inverse of render_template; splits at the first closing marker."""
    head, tail = f"<s> {INST_OPEN} ", " </s>"
    if not (text.startswith(head) and text.endswith(tail)):
        raise ValueError("not a rendered chat example")
    body = text[len(head) : -len(tail)]
    q, sep, a = body.partition(f" {INST_CLOSE} ")
    if not sep:
        raise ValueError(f"missing {INST_CLOSE}")
    return ChatExample(q, a)


def prompt_text(ex: ChatExample) -> str:
    return f"{INST_OPEN} {ex.question} {INST_CLOSE} "


def build_sft_item(tokenizer: TokenizerModel, ex: ChatExample, context_len: int | None = None) -> SftBatchItem:
    prompt = tokenizer.encode(prompt_text(ex))
    answer = tokenizer.encode(ex.answer)
    tokens = [tokenizer.bos_id, *prompt, *answer, tokenizer.eos_id]
    if context_len is not None and len(tokens) > context_len:
        raise TooLong(f"example needs {len(tokens)} tokens, context is {context_len}")
    n_prompt = 1 + len(prompt)
    # target t predicts tokens[t + 1]; answer and EOS start at index n_prompt
    mask = [t + 1 >= n_prompt for t in range(len(tokens) - 1)]
    return SftBatchItem(tuple(tokens), tuple(mask))


def render_item(tokenizer: TokenizerModel, item: SftBatchItem) -> str:
    """Surface text of an item; equals render_template of its example."""
    middle = tokenizer.decode(item.tokens[1:-1])
    return f"<s> {middle} </s>"


def build_sft_items(
    tokenizer: TokenizerModel, examples: Sequence[ChatExample], context_len: int
) -> tuple[list[SftBatchItem], int]:
    """Items that fit the context, plus how many examples were skipped as TooLong."""
    items, skipped = [], 0
    for ex in examples:
        try:
            items.append(build_sft_item(tokenizer, ex, context_len))
        except TooLong as exc:
            skipped += 1
            log.warning("skipping example: %s", exc)
    return items, skipped


def load_sft_dataset(path: str | PathLike) -> tuple[list[ChatExample], list[MalformedRecord]]:
    examples, errors = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                q, a = rec["question"], rec["answer"]
                if not isinstance(q, str) or not isinstance(a, str):
                    raise TypeError("question and answer must be strings")
                examples.append(ChatExample(q, a))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(MalformedRecord(path, lineno, f"({type(exc).__name__}: {exc})"))
    return examples, errors


def collate(items: Sequence[SftBatchItem], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded inputs and targets; targets outside the loss mask are -1."""
    width = max(len(it.tokens) for it in items) - 1
    inputs = np.full((len(items), width), pad_id, dtype=np.int64)
    targets = np.full((len(items), width), -1, dtype=np.int64)
    for i, it in enumerate(items):
        n = len(it.tokens) - 1
        inputs[i, :n] = it.tokens[:-1]
        nxt = np.asarray(it.tokens[1:])
        targets[i, :n] = np.where(it.loss_mask, nxt, -1)
    return inputs, targets


def clamp_epochs(epochs: int) -> int:
    if not 1 <= epochs <= MAX_EPOCHS:
        clamped = min(max(epochs, 1), MAX_EPOCHS)
        log.warning("epochs=%d outside 1..%d, using %d", epochs, MAX_EPOCHS, clamped)
        return clamped
    return epochs


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return math.ceil(n_items / batch_size)


def sft_optim(total_steps: int, lr: float = SFT_LR, final_lr_ratio: float = 0.1) -> OptimConfig:
    """Pretraining optimizer settings with the fine-tuning peak lr and no warmup."""
    return OptimConfig(max_lr=lr, warmup_steps=0, total_steps=max(total_steps, 1), final_lr_ratio=final_lr_ratio)


def sft_fit(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    items: Sequence[SftBatchItem],
    steps: int,
    *,
    batch_size: int = 4,
    lr: float = SFT_LR,
    final_lr_ratio: float = 0.1,
    seed: int = 0,
    state: TrainState | None = None,
    pad_id: int = 0,
    log_file=None,
) -> tuple[TrainState, list[MonitorReport]]:
    """Fine-tune in place for ``steps`` steps.

    Items are visited in passes of ceil(N/B) batches, reshuffled before each
    pass. The lr follows the pretraining cosine shape from ``lr`` with no warmup.
    """
    if not items:
        raise ValueError("no SFT items to train on")
    optim = sft_optim(steps, lr, final_lr_ratio)
    state = state if state is not None else TrainState.fresh(params, seed)
    per_pass = steps_per_epoch(len(items), batch_size)
    reports: list[MonitorReport] = []
    order = None
    for done in range(steps):
        s = done % per_pass
        if s == 0:
            order = state.rng.permutation(len(items))
        chunk = [items[i] for i in order[s * batch_size : (s + 1) * batch_size]]
        inputs, targets = collate(chunk, pad_id)
        rep = train_step(params, config, optim, state, inputs, targets, lr=cosine_lr(done, optim))
        reports.append(rep)
        if log_file is not None:
            log_file.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")
    return state, reports


def sft_run(
    checkpoint: str | PathLike,
    tokenizer: TokenizerModel,
    data: str | PathLike,
    out_dir: str | PathLike,
    *,
    epochs: int = 1,
    batch_size: int = 4,
    lr: float = SFT_LR,
    seed: int = 0,
) -> Path:
    """Fine-tune a pretrained checkpoint on a question/answer file; returns the new checkpoint dir."""
    ck = load_checkpoint(checkpoint)
    if tokenizer.vocab_size != ck.config.vocab_size:
        raise CheckpointIncompatible(
            f"tokenizer vocab {tokenizer.vocab_size} != checkpoint vocab {ck.config.vocab_size}"
        )
    examples, errors = load_sft_dataset(data)
    for e in errors:
        log.warning("%s", e)
    items, skipped = build_sft_items(tokenizer, examples, ck.config.context_len)
    if not items:
        raise ValueError(f"{data}: no usable examples ({skipped} too long, {len(errors)} malformed)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sft_metrics.jsonl", "w", encoding="utf-8") as f:
        state, _ = sft_fit(
            ck.params,
            ck.config,
            items,
            clamp_epochs(epochs) * steps_per_epoch(len(items), batch_size),
            batch_size=batch_size,
            lr=lr,
            seed=seed,
            pad_id=tokenizer.pad_id,
            log_file=f,
        )
    extra = {
        "stage": "sft",
        "init": str(ck.path),
        "examples": len(items),
        "skipped_too_long": skipped,
        "malformed": len(errors),
    }
    return write_checkpoint(out_dir, ck.config, ck.params, state, None, extra)
