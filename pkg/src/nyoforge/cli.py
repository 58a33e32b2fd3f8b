"""Command line entry point: ``nyoforge <command> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
Diagnostics go to stderr; machine-readable output goes to stdout or files.
The seed comes from ``--seed``, then ``NYOFORGE_SEED``, then the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import NyoforgeError
from .pipeline import build_plan, build_scheduler, obtain_tokenizer, run_pretrain
from .tokenizer import DEFAULT_VOCAB_SIZE, TokenizerModel, train_bpe

log = logging.getLogger("nyoforge")

SEED_ENV = "NYOFORGE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    return cfg.with_seed(seed) if seed is not None else cfg


def _validated(args) -> RunConfig | None:
    """Load the config; in --validate mode report problems and return None."""
    cfg = _resolve_config(args)
    problems = cfg.validate()
    if getattr(args, "validate", False):
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        if problems:
            raise NyoforgeError(f"{args.config}: {len(problems)} problem(s)")
        _emit({"config": str(args.config), "valid": True})
        return None
    if problems:
        raise NyoforgeError("; ".join(problems))
    return cfg


def _corpus_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"corpus {path} does not exist")
    return sorted(p for p in path.rglob("*") if p.is_file() and p.suffix in (".jsonl", ".txt"))


def _corpus_texts(path: Path):
    """Records of .jsonl files (their ``text``) and whole .txt files."""
    for f in _corpus_files(path):
        if f.suffix == ".txt":
            yield f.read_text(encoding="utf-8")
            continue
        with open(f, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)["text"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    log.warning("%s:%d: malformed record skipped", f, lineno)


# commands


def cmd_validate(args) -> int:
    args.validate = True
    _validated(args)
    return 0


def cmd_tokenizer_train(args) -> int:
    if (args.config is None) == (args.corpus is None):
        raise UsageError("give exactly one of --config or --corpus")
    if args.config is not None:
        cfg = _resolve_config(args)
        vocab = args.vocab_size or cfg.tokenizer.vocab_size
        cfg = dataclasses.replace(cfg, tokenizer=dataclasses.replace(cfg.tokenizer, path=None, vocab_size=vocab))
        tok = obtain_tokenizer(cfg)
    else:
        tok = train_bpe(_corpus_texts(Path(args.corpus)), args.vocab_size or DEFAULT_VOCAB_SIZE)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    _emit({"path": str(out), "vocab_size": tok.vocab_size, "merges": len(tok.merges)})
    return 0


def cmd_tokenize(args) -> int:
    tok = TokenizerModel.load(args.model)
    text = sys.stdin.read()
    ids = tok.encode(text, add_bos_eos=args.bos_eos)
    sys.stdout.write(" ".join(map(str, ids)) + "\n")
    return 0


def cmd_tokenizer_stats(args) -> int:
    tok = TokenizerModel.load(args.model)
    _emit(tok.compute_metrics(_corpus_texts(Path(args.corpus))).as_dict())
    return 0


def cmd_data_plan(args) -> int:
    cfg = _validated(args)
    if cfg is None:
        return 0
    _emit(build_plan(cfg).summary())
    return 0


def cmd_data_stream(args) -> int:
    cfg = _validated(args)
    if cfg is None:
        return 0
    if not 0 <= args.rank < cfg.runtime.world_size:
        raise UsageError(f"--rank must lie in 0..{cfg.runtime.world_size - 1}")
    tok = obtain_tokenizer(cfg)
    with build_scheduler(cfg, tok, rank=args.rank) as sched:
        for i, b in zip(range(args.steps), sched):
            rec = {"batch": i, **b.metadata()}
            if not args.dry_run:
                rec["tokens"] = b.tokens_array().tolist()
            _emit(rec)
        stats = sched.stats
    print(
        f"read {stats.records} records, {stats.documents} documents, {stats.malformed} malformed",
        file=sys.stderr,
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _validated(args)
    if cfg is None:
        return 0
    res = run_pretrain(cfg, resume=args.resume, stop_after=args.steps)
    last = res.reports[-1].loss if res.reports else {}
    _emit(
        {
            "steps": res.steps,
            "stream_exhausted": res.stream_exhausted,
            "checkpoints": [str(p) for p in res.checkpoints],
            "final_loss": last,
        }
    )
    return 0


def cmd_sft(args) -> int:
    from .sft import sft_run

    cfg = _validated(args)
    if cfg is None:
        return 0
    tok = obtain_tokenizer(cfg)
    s = cfg.sft
    out = Path(args.out) if args.out else Path(cfg.runtime.checkpoint_dir) / "sft"
    path = sft_run(
        args.init,
        tok,
        args.data,
        out,
        epochs=args.epochs if args.epochs is not None else s.epochs,
        batch_size=s.batch_size,
        lr=args.lr if args.lr is not None else s.lr,
        seed=cfg.runtime.seed,
    )
    _emit({"checkpoint": str(path)})
    return 0


def cmd_inspect(args) -> int:
    from .trainer import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    out = {"path": str(ck.path), "step": ck.state.step, "manifest": ck.manifest}
    if ck.stream is not None:
        stream = {
            "rank": ck.stream.rank,
            "world_size": ck.stream.world_size,
            "completed": {d: len(fs) for d, fs in sorted(ck.stream.completed.items())},
        }
        if args.config:
            plan = build_plan(_resolve_config(args))
            stream["assigned"] = {d: len(plan.rank_files(d, ck.stream.rank)) for d in plan.datasets}
        out["stream"] = stream
    _emit(out)
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    paths = render_report(args.log, args.out)
    sys.stdout.write(paths["summary"].read_text(encoding="utf-8"))
    print("wrote " + ", ".join(str(p) for p in paths.values()), file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nyoforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cfg_parent = _Parser(add_help=False)
    cfg_parent.add_argument("--config", required=True, help="TOML run config")
    cfg_parent.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config seed")
    cfg_parent.add_argument("--validate", action="store_true", help="check the config and exit")

    p = sub.add_parser("validate", parents=[cfg_parent], help="check a run config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("tokenizer-train", help="train a BPE tokenizer")
    p.add_argument("--config")
    p.add_argument("--corpus", help="directory of .jsonl/.txt files (instead of --config)")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("tokenize", help="encode stdin to token ids")
    p.add_argument("--model", required=True)
    p.add_argument("--bos-eos", action="store_true")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("tokenizer-stats", help="compression, fertility and continued-word share")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_tokenizer_stats)

    p = sub.add_parser("data-plan", parents=[cfg_parent], help="print the file plan summary")
    p.set_defaults(func=cmd_data_plan)

    p = sub.add_parser("data-stream", parents=[cfg_parent], help="stream batches for one rank")
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--dry-run", action="store_true", help="metadata only, no token arrays")
    p.set_defaults(func=cmd_data_stream)

    p = sub.add_parser("pretrain", parents=[cfg_parent], help="run pretraining")
    p.add_argument("--resume", help="checkpoint directory or its parent")
    p.add_argument("--steps", type=int, help="stop once the optimizer step reaches this value")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sft", parents=[cfg_parent], help="supervised fine-tuning")
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="jsonl with question/answer fields")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="adds per-dataset assigned file counts")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="figures and TSV summary from a metric log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nyoforge: error: {exc}", file=sys.stderr)
        return 1
    except (NyoforgeError, OSError, ValueError) as exc:
        print(f"nyoforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
