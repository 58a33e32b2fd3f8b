"""File planning and document reading: the first two stages of the data flow.

Files are shuffled per dataset with a seeded generator and dealt round-robin
to ranks. Inside a rank they are reshuffled and dealt to workers. Readers
turn line-delimited JSON records into EOS-terminated token documents.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import IoFailure, MalformedRecord, NoFilesMatched, RankOutOfRange
from .tokenizer import TokenizerModel, normalize


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: Path
    weight: float = 1.0
    file_glob: str = "*.jsonl"

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"dataset name must be a non-empty identifier, got {self.name!r}")
        if not self.weight >= 0:
            raise ValueError(f"dataset {self.name}: weight must be non-negative")

    def matched_files(self) -> list[str]:
        return sorted(p.relative_to(self.root).as_posix() for p in self.root.glob(self.file_glob) if p.is_file())


@dataclass(frozen=True)
class Document:
    dataset: str
    file: str
    index_in_file: int
    tokens: tuple[int, ...]
    last_in_file: bool = False


@dataclass
class ReadStats:
    records: int = 0
    documents: int = 0
    skipped_empty: int = 0
    errors: list[MalformedRecord] = field(default_factory=list)

    @property
    def malformed(self) -> int:
        return len(self.errors)

    def merge(self, other: "ReadStats") -> None:
        self.records += other.records
        self.documents += other.documents
        self.skipped_empty += other.skipped_empty
        self.errors.extend(other.errors)


def stable_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class StreamPlan:
    """Seeded per-dataset file order plus the round-robin rank assignment."""

    seed: int
    world_size: int
    files: dict[str, tuple[str, ...]]
    roots: dict[str, Path]

    @property
    def datasets(self) -> list[str]:
        return list(self.files)

    def rank_of(self, dataset: str, file: str) -> int:
        return self.files[dataset].index(file) % self.world_size

    def rank_assignment(self, dataset: str) -> dict[str, int]:
        return {f: i % self.world_size for i, f in enumerate(self.files[dataset])}

    def rank_files(self, dataset: str, rank: int) -> list[str]:
        if not 0 <= rank < self.world_size:
            raise RankOutOfRange(f"rank {rank} not in 0..{self.world_size - 1}")
        return list(self.files[dataset][rank :: self.world_size])

    def path(self, dataset: str, file: str) -> Path:
        return self.roots[dataset] / file

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "world_size": self.world_size,
            "datasets": {
                name: {
                    "files": len(files),
                    "per_rank": [len(files[r :: self.world_size]) for r in range(self.world_size)],
                }
                for name, files in self.files.items()
            },
        }


def plan_stream(specs: Sequence[DatasetSpec], seed: int, world_size: int) -> StreamPlan:
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"dataset names must be unique: {names}")
    files: dict[str, tuple[str, ...]] = {}
    for spec in specs:
        matched = spec.matched_files()
        if not matched:
            raise NoFilesMatched(spec.name)
        rng = np.random.default_rng([seed, stable_key(spec.name)])
        order = rng.permutation(len(matched))
        files[spec.name] = tuple(matched[i] for i in order)
    return StreamPlan(seed=seed, world_size=world_size, files=files, roots={s.name: s.root for s in specs})


def worker_split(plan: StreamPlan, rank: int, num_workers: int) -> dict[str, list[list[str]]]:
    """Per dataset, partition the rank's files into ``num_workers`` lists.

    The rank's files are reshuffled with a per-(dataset, rank) seed and worker
    ``j`` receives positions congruent to ``j`` modulo ``num_workers``.
    """
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    out = {}
    for name in plan.datasets:
        files = plan.rank_files(name, rank)
        rng = np.random.default_rng([plan.seed, stable_key(name), rank, 1])
        shuffled = [files[i] for i in rng.permutation(len(files))]
        out[name] = [shuffled[j::num_workers] for j in range(num_workers)]
    return out


def read_documents(
    tokenizer: TokenizerModel,
    path: str | PathLike,
    dataset: str,
    *,
    file_id: str | None = None,
    stats: ReadStats | None = None,
) -> Iterator[Document]:
    """Yield one EOS-terminated document per non-empty record, in file order.

    Malformed lines are skipped and recorded in ``stats``; an unreadable
    file raises IoFailure.
    """
    path = Path(path)
    file_id = file_id if file_id is not None else path.as_posix()
    stats = stats if stats is not None else ReadStats()
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IoFailure(path, exc.strerror or str(exc)) from exc
    index = 0
    with f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            stats.records += 1
            try:
                rec = json.loads(raw.decode("utf-8"))
                text = rec["text"]
                if not isinstance(text, str):
                    raise TypeError("text is not a string")
                if "meta" in rec and not isinstance(rec["meta"], dict):
                    raise TypeError("meta is not an object")
            except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
                stats.errors.append(MalformedRecord(path, lineno, f"({type(exc).__name__}: {exc})"))
                continue
            text = normalize(text)
            if not text:
                stats.skipped_empty += 1
                continue
            tokens = tokenizer.encode(text)
            tokens.append(tokenizer.eos_id)
            stats.documents += 1
            yield Document(dataset, file_id, index, tuple(tokens))
            index += 1
