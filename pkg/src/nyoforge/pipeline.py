"""Wires a RunConfig into tokenizer, stream plan, scheduler and training state."""

from __future__ import annotations

import hashlib
import json
import logging
from os import PathLike
from pathlib import Path
from typing import Iterator

from .config import RunConfig
from .corpus import StreamPlan, plan_stream
from .errors import CheckpointIncompatible, VocabMismatch
from .model import init_params
from .scheduler import Scheduler, StreamCheckpoint
from .tokenizer import TokenizerModel, normalize, train_bpe
from .trainer import TrainResult, TrainState, load_checkpoint, train_loop

log = logging.getLogger(__name__)


def corpus_texts(cfg: RunConfig, max_documents: int = 0) -> Iterator[str]:
    """Texts of every configured dataset in sorted file order; malformed lines are skipped."""
    n = 0
    for spec in cfg.datasets:
        for rel in spec.matched_files():
            with open(spec.root / rel, encoding="utf-8", errors="replace") as f:
                for line in f:
                    try:
                        text = json.loads(line)["text"]
                    except (json.JSONDecodeError, KeyError, TypeError):
                        continue
                    if isinstance(text, str) and normalize(text):
                        yield text
                        n += 1
                        if max_documents and n >= max_documents:
                            return


def obtain_tokenizer(cfg: RunConfig) -> TokenizerModel:
    """Load the configured tokenizer, training and saving it first if the file is missing."""
    path = cfg.tokenizer.path
    if path is not None and path.exists():
        return TokenizerModel.load(path)
    log.info("training tokenizer to %d entries", cfg.tokenizer.vocab_size)
    tok = train_bpe(corpus_texts(cfg, cfg.tokenizer.max_documents), cfg.tokenizer.vocab_size)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tok.save(path)
    return tok


def tokenizer_digest(tok: TokenizerModel) -> str:
    return hashlib.sha256(tok.to_text().encode("utf-8")).hexdigest()


def build_plan(cfg: RunConfig) -> StreamPlan:
    return plan_stream(cfg.datasets, cfg.runtime.seed, cfg.runtime.world_size)


def build_scheduler(
    cfg: RunConfig,
    tokenizer: TokenizerModel,
    plan: StreamPlan | None = None,
    resume: StreamCheckpoint | list[StreamCheckpoint] | None = None,
    rank: int | None = None,
) -> Scheduler:
    rt = cfg.runtime
    plan = plan if plan is not None else build_plan(cfg)
    kw = dict(
        weights=cfg.weights,
        context_len=cfg.model.context_len,
        batch_size=rt.batch_size,
        num_workers=rt.num_workers,
        shuffle_buffer=rt.shuffle_buffer,
        policy=rt.exhaustion,
        threaded=rt.threaded,
        queue_depth=rt.queue_depth,
    )
    rank = rt.rank if rank is None else rank
    if resume is not None:
        return Scheduler.restore(plan, resume, tokenizer, rank=rank, **kw)
    return Scheduler(plan, tokenizer, rank=rank, shuffle_seed=rt.seed, **kw)


def run_pretrain(
    cfg: RunConfig,
    resume: str | PathLike | None = None,
    *,
    stop_after: int | None = None,
    on_trace=None,
) -> TrainResult:
    """Pretrain from scratch or from a checkpoint directory (a step dir or its parent)."""
    tokenizer = obtain_tokenizer(cfg)
    if tokenizer.vocab_size != cfg.model.vocab_size:
        raise VocabMismatch(f"tokenizer vocab {tokenizer.vocab_size} != model vocab {cfg.model.vocab_size}")
    plan = build_plan(cfg)
    digest = tokenizer_digest(tokenizer)
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config != cfg.model:
            raise CheckpointIncompatible(f"{ck.path}: model config differs from the run config")
        if ck.manifest.get("tokenizer_sha256", digest) != digest:
            raise VocabMismatch(f"{ck.path}: checkpoint was trained with a different tokenizer")
        if not ck.manifest.get("stream_at_file_boundary", True):
            log.warning("%s: stream checkpoint is mid-file; up to one file per dataset will be re-read", ck.path)
        params, state = ck.params, ck.state
        scheduler = build_scheduler(cfg, tokenizer, plan, resume=ck.stream)
        log.info("resuming from %s at step %d", ck.path, state.step)
    else:
        params = init_params(cfg.model, cfg.init_std, cfg.runtime.seed)
        state = TrainState.fresh(params, cfg.runtime.seed)
        scheduler = build_scheduler(cfg, tokenizer, plan)
    rt = cfg.runtime
    log_path = rt.log_path if rt.log_path is not None else Path(rt.checkpoint_dir) / "metrics.jsonl"
    with scheduler:
        return train_loop(
            cfg.model,
            cfg.optim,
            scheduler,
            params,
            state,
            checkpoint_dir=rt.checkpoint_dir,
            checkpoint_every=rt.checkpoint_every,
            log_path=log_path,
            stop_after=stop_after,
            manifest_extra={"seed": rt.seed, "tokenizer_sha256": digest},
            on_trace=on_trace,
        )
