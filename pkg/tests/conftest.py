import json
from pathlib import Path

import pytest

from nyoforge.tokenizer import train_bpe

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


MICRO_CORPUS = [
    "The quick brown fox jumps over the lazy dog in 2024.",
    "Der schnelle braune Fuchs springt über den faulen Hund.",
    "Le renard brun rapide saute par-dessus le chien paresseux.",
    "def main():\n    return 42  # indentation matters",
    "日本語のテキストも少し含まれています。",
    "the the the fox fox dog",
]


@pytest.fixture(scope="session")
def micro_corpus():
    return list(MICRO_CORPUS)


@pytest.fixture(scope="session")
def tokenizer(micro_corpus):
    return train_bpe(micro_corpus, 400)


def write_jsonl(path: Path, texts):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for t in texts:
            f.write(json.dumps({"text": t}, ensure_ascii=False) + "\n")
    return path


def digit_record(n_tokens: int, fill: str = "7") -> str:
    """A text whose encoding (plus EOS) is exactly ``n_tokens`` long."""
    return fill * (n_tokens - 1)


def make_dataset(root: Path, name: str, lengths_per_file, fill="7"):
    """Write one jsonl file per entry of ``lengths_per_file`` (a list of doc token lengths)."""
    d = root / name
    for i, lengths in enumerate(lengths_per_file):
        write_jsonl(d / f"part-{i:03d}.jsonl", [digit_record(n, fill) for n in lengths])
    return d


def write_run_config(
    root: Path, tokenizer, *, files_per_source=6, context_len=9, checkpoint_every=2, extra_runtime="", optim=""
):
    """A tiny two-source pretraining setup where every file is one full sequence.

    Each file holds a single document of exactly ``context_len`` tokens, so
    every batch ends on a file boundary and resume is exact at any step.
    """
    make_dataset(root / "data", "A", [[context_len]] * files_per_source, fill="7")
    make_dataset(root / "data", "B", [[context_len]] * files_per_source, fill="3")
    tokenizer.save(root / "tok.txt")
    text = f"""
[[datasets]]
name = "A"
path = "data/A"
weight = 0.6

[[datasets]]
name = "B"
path = "data/B"
weight = 0.4

[tokenizer]
path = "tok.txt"
vocab_size = {tokenizer.vocab_size}

[model]
d_model = 16
n_heads = 2
n_layers = 1
context_len = {context_len}
vocab_size = {tokenizer.vocab_size}

[optim]
max_lr = 1e-2
warmup_steps = 1
total_steps = 1000
{optim}

[runtime]
seed = 5
batch_size = 2
checkpoint_dir = "ckpt"
checkpoint_every = {checkpoint_every}
{extra_runtime}
"""
    path = root / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path
