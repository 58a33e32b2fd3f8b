"""Online data scheduler: multiplexing, content stuffing, batching, file-level resume.

One ``Scheduler`` serves one rank. Per dataset it walks the rank's files in a
fixed order (worker lists interleaved file by file), optionally with one
reader thread per worker feeding a bounded FIFO queue. A seeded multiplexer
picks the dataset of every next document; documents are stuffed into
fixed-length sequences, and a file counts as completed once the end of its
last document has been emitted. Checkpoints record completed files plus the
multiplexer's generator state.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field, replace
from os import PathLike
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import Document, ReadStats, StreamPlan, read_documents, stable_key, worker_split
from .errors import AllExhausted, CheckpointCorrupt, PlanMismatch, SchemaMismatch, StreamStopped
from .tokenizer import PAD_ID, TokenizerModel

CHECKPOINT_MAGIC = "NYOSTREAM v1"
RENORMALIZE = "renormalize"
STOP = "stop"


# multiplexer


def rng_state_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators are serializable")
    if st["has_uint32"]:
        raise ValueError("generator holds a buffered 32-bit draw; state is not 32 bytes")
    return st["state"]["state"].to_bytes(16, "little") + st["state"]["inc"].to_bytes(16, "little")


def rng_from_bytes(raw: bytes) -> np.random.Generator:
    if len(raw) != 32:
        raise ValueError("PCG64 state must be 32 bytes")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


class MuxState:
    """Mixture weights, the draw generator and the exhausted-source set."""

    def __init__(
        self,
        weights: Mapping[str, float],
        *,
        seed: int | None = None,
        rng_state: bytes | None = None,
        policy: str = RENORMALIZE,
    ):
        if policy not in (RENORMALIZE, STOP):
            raise ValueError(f"unknown exhaustion policy {policy!r}")
        self.weights = {}
        self.set_weights(weights)
        if rng_state is not None:
            self.rng = rng_from_bytes(rng_state)
        else:
            self.rng = np.random.default_rng(seed)
        self.policy = policy
        self.exhausted: set[str] = set()

    def set_weights(self, weights: Mapping[str, float]) -> None:
        if any(not w >= 0 for w in weights.values()):
            raise ValueError("mixture weights must be non-negative")
        if sum(weights.values()) <= 0:
            raise ValueError("mixture weights must sum to a positive value")
        self.weights = dict(weights)

    @property
    def rng_state(self) -> bytes:
        return rng_state_bytes(self.rng)

    def active(self) -> list[str]:
        return [d for d, w in self.weights.items() if w > 0 and d not in self.exhausted]

    def draw(self) -> str:
        """One categorical draw over the active, renormalized weights."""
        names = self.active()
        if not names:
            raise AllExhausted("every weighted source is exhausted")
        w = np.array([self.weights[n] for n in names], dtype=np.float64)
        cum = np.cumsum(w)
        u = self.rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        return names[min(idx, len(names) - 1)]


def mux_next(state: MuxState, streams: Mapping[str, "DatasetStream"]) -> tuple[Document, str]:
    """Pick the next document. Sources found empty are retired before the draw."""
    for name in state.active():
        if streams[name].peek() is None:
            state.exhausted.add(name)
            if state.policy == STOP:
                raise StreamStopped(f"source {name!r} exhausted under stop policy")
    name = state.draw()
    return next(streams[name]), name


# per-dataset document streams


def shuffle_buffer(items: Iterable[Document], rng: np.random.Generator, size: int) -> Iterator[Document]:
    """Streaming shuffle with a buffer of ``size`` items; size <= 1 passes through."""
    if size <= 1:
        yield from items
        return
    buf: list[Document] = []
    for item in items:
        if len(buf) < size:
            buf.append(item)
            continue
        j = int(rng.integers(size))
        yield buf[j]
        buf[j] = item
    for j in rng.permutation(len(buf)):
        yield buf[j]


def _mark_last(docs: Iterable[Document]) -> Iterator[Document]:
    prev = None
    for d in docs:
        if prev is not None:
            yield prev
        prev = d
    if prev is not None:
        yield replace(prev, last_in_file=True)


@dataclass
class FileReader:
    """Reads one file of one dataset into shuffled, last-flagged documents."""

    tokenizer: TokenizerModel
    plan: StreamPlan
    dataset: str
    shuffle_seed: int = 0
    buffer_size: int = 0
    stats: ReadStats = field(default_factory=ReadStats)

    def __call__(self, file: str) -> Iterator[Document]:
        docs = read_documents(
            self.tokenizer, self.plan.path(self.dataset, file), self.dataset, file_id=file, stats=self.stats
        )
        rng = np.random.default_rng([self.shuffle_seed, stable_key(self.dataset), stable_key(file)])
        return _mark_last(shuffle_buffer(docs, rng, self.buffer_size))


class _Worker(threading.Thread):
    def __init__(self, files: list[str], reader: FileReader, depth: int):
        super().__init__(daemon=True)
        self.files = files
        self.reader = reader
        self.queue: queue.Queue = queue.Queue(maxsize=depth)
        self.stop = threading.Event()

    def _put(self, item) -> bool:
        while not self.stop.is_set():
            try:
                self.queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def run(self):
        try:
            for f in self.files:
                for doc in self.reader(f):
                    if not self._put(("doc", doc)):
                        return
                if not self._put(("eof", f)):
                    return
        except BaseException as exc:  # handed to the consumer thread
            self._put(("error", exc))


def interleave_files(worker_lists: Sequence[Sequence[str]]) -> list[tuple[int, str]]:
    """File-by-file round robin over worker lists: (worker, file) pairs."""
    out = []
    longest = max((len(w) for w in worker_lists), default=0)
    for i in range(longest):
        for j, files in enumerate(worker_lists):
            if i < len(files):
                out.append((j, files[i]))
    return out


class DatasetStream:
    """Ordered documents of one dataset on one rank, with one-item lookahead."""

    def __init__(
        self,
        name: str,
        worker_lists: Sequence[Sequence[str]],
        reader: FileReader,
        *,
        completed: set[str] = frozenset(),
        threaded: bool = False,
        queue_depth: int = 16,
        on_empty_file=None,
    ):
        self.name = name
        self.order = [(w, f) for w, f in interleave_files(worker_lists) if f not in completed]
        self.reader = reader
        self.on_empty_file = on_empty_file
        self._workers: list[_Worker] = []
        if threaded:
            for j, files in enumerate(worker_lists):
                mine = [f for w, f in self.order if w == j]
                worker = _Worker(mine, reader, queue_depth)
                self._workers.append(worker)
            for worker in self._workers:
                worker.start()
        self._it = self._documents()
        self._peeked: Document | None = None
        self._done = False

    def _file_docs(self, worker: int, file: str) -> Iterator[Document]:
        if not self._workers:
            yield from self.reader(file)
            return
        q = self._workers[worker].queue
        while True:
            kind, payload = q.get()
            if kind == "doc":
                yield payload
            elif kind == "eof":
                if payload != file:
                    raise RuntimeError(f"worker order diverged: expected {file}, got {payload}")
                return
            else:
                raise payload

    def _documents(self) -> Iterator[Document]:
        for worker, file in self.order:
            n = 0
            for doc in self._file_docs(worker, file):
                n += 1
                yield doc
            if n == 0 and self.on_empty_file is not None:
                self.on_empty_file(self.name, file)

    def peek(self) -> Document | None:
        if self._peeked is None and not self._done:
            try:
                self._peeked = next(self._it)
            except StopIteration:
                self._done = True
        return self._peeked

    def __iter__(self):
        return self

    def __next__(self) -> Document:
        doc = self.peek()
        if doc is None:
            raise StopIteration
        self._peeked = None
        return doc

    def close(self) -> None:
        for w in self._workers:
            w.stop.set()


# stuffing and batching


@dataclass(frozen=True)
class Segment:
    dataset: str
    file: str
    index_in_file: int
    end: int
    ends_document: bool
    last_in_file: bool = False


@dataclass(frozen=True)
class PackedSequence:
    tokens: tuple[int, ...]
    segments: tuple[Segment, ...]
    pad_count: int = 0

    @property
    def doc_boundaries(self) -> tuple[int, ...]:
        """Cumulative end offset of every segment; the last equals the unpadded length."""
        return tuple(s.end for s in self.segments)

    @property
    def document_ends(self) -> tuple[int, ...]:
        """Offsets where a document actually finishes inside this sequence."""
        return tuple(s.end for s in self.segments if s.ends_document)

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(s.dataset for s in self.segments)

    def segment_slices(self) -> list[tuple[Segment, tuple[int, ...]]]:
        out, start = [], 0
        for s in self.segments:
            out.append((s, self.tokens[start : s.end]))
            start = s.end
        return out


def pack(documents: Iterable[Document], context_len: int, pad_id: int = PAD_ID) -> Iterator[PackedSequence]:
    """Stuff documents into sequences of exactly ``context_len`` tokens.

    Documents that do not fit are split across consecutive sequences. Only
    the final sequence of the stream may be padded.
    """
    if context_len < 2:
        raise ValueError("context_len must be >= 2")
    buf: list[int] = []
    segs: list[Segment] = []
    for doc in documents:
        pos, n = 0, len(doc.tokens)
        while pos < n:
            take = min(context_len - len(buf), n - pos)
            buf.extend(doc.tokens[pos : pos + take])
            pos += take
            done = pos == n
            segs.append(Segment(doc.dataset, doc.file, doc.index_in_file, len(buf), done, done and doc.last_in_file))
            if len(buf) == context_len:
                yield PackedSequence(tuple(buf), tuple(segs), 0)
                buf, segs = [], []
    if buf:
        pad = context_len - len(buf)
        yield PackedSequence(tuple(buf) + (pad_id,) * pad, tuple(segs), pad)


@dataclass(frozen=True)
class TokenBatch:
    sequences: tuple[PackedSequence, ...]
    source_tokens: dict[str, int]
    seq_range: tuple[int, int]

    @property
    def size(self) -> int:
        return len(self.sequences)

    @property
    def pad_count(self) -> int:
        return sum(s.pad_count for s in self.sequences)

    def tokens_array(self) -> np.ndarray:
        return np.array([s.tokens for s in self.sequences], dtype=np.int64)

    def metadata(self) -> dict:
        return {
            "sequences": self.size,
            "seq_range": list(self.seq_range),
            "source_tokens": dict(sorted(self.source_tokens.items())),
            "pad_tokens": self.pad_count,
            "documents_ended": sum(len(s.document_ends) for s in self.sequences),
        }


def batch(seqs: Iterable[PackedSequence], batch_size: int, start_index: int = 0) -> Iterator[TokenBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    group: list[PackedSequence] = []
    index = start_index

    def emit():
        counts: dict[str, int] = {}
        for s in group:
            for seg, toks in s.segment_slices():
                counts[seg.dataset] = counts.get(seg.dataset, 0) + len(toks)
        return TokenBatch(tuple(group), counts, (index, index + len(group)))

    for s in seqs:
        group.append(s)
        if len(group) == batch_size:
            yield emit()
            index += len(group)
            group = []
    if group:
        yield emit()


# checkpoints


@dataclass(frozen=True)
class StreamCheckpoint:
    rank: int
    world_size: int
    completed: dict[str, frozenset[str]]
    mux_rng: bytes
    shuffle_seed: int
    version: int = 1

    def to_text(self) -> str:
        lines = [CHECKPOINT_MAGIC, f"rank {self.rank}", f"world_size {self.world_size}"]
        for name in sorted(self.completed):
            files = sorted(self.completed[name])
            lines.append(f"completed {name} {len(files)}")
            for f in files:
                if "\n" in f:
                    raise ValueError(f"file name with newline cannot be checkpointed: {f!r}")
                lines.append(f)
        lines.append(f"mux_rng {self.mux_rng.hex()}")
        lines.append(f"shuffle_seed {self.shuffle_seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StreamCheckpoint":
        lines = text.split("\n")
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise SchemaMismatch(f"unsupported stream checkpoint header {lines[0] if lines else ''!r}")
        try:
            rank = int(_field(lines[1], "rank"))
            world_size = int(_field(lines[2], "world_size"))
            i = 3
            completed = {}
            while lines[i].startswith("completed "):
                _, name, n = lines[i].split(" ")
                n = int(n)
                completed[name] = frozenset(lines[i + 1 : i + 1 + n])
                if len(completed[name]) != n:
                    raise ValueError("truncated file list")
                i += 1 + n
            mux_rng = bytes.fromhex(_field(lines[i], "mux_rng"))
            shuffle_seed = int(_field(lines[i + 1], "shuffle_seed"))
            if len(mux_rng) != 32 or any(lines[i + 2 :]):
                raise ValueError("trailing data or bad rng length")
        except (IndexError, ValueError) as exc:
            raise CheckpointCorrupt(f"malformed stream checkpoint: {exc}") from exc
        return cls(rank, world_size, completed, mux_rng, shuffle_seed)

    def save(self, path: str | PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | PathLike) -> "StreamCheckpoint":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _field(line: str, key: str) -> str:
    k, _, v = line.partition(" ")
    if k != key:
        raise ValueError(f"expected {key!r}, got {line!r}")
    return v


# the per-rank scheduler


class Scheduler:
    """Streams TokenBatches for one rank and tracks file completion."""

    def __init__(
        self,
        plan: StreamPlan,
        tokenizer: TokenizerModel,
        *,
        weights: Mapping[str, float],
        context_len: int,
        batch_size: int,
        rank: int = 0,
        num_workers: int = 1,
        shuffle_seed: int = 0,
        shuffle_buffer: int = 0,
        policy: str = RENORMALIZE,
        threaded: bool = False,
        queue_depth: int = 16,
        completed: Mapping[str, Iterable[str]] | None = None,
        mux_rng: bytes | None = None,
    ):
        missing = set(weights) ^ set(plan.datasets)
        if missing:
            raise ValueError(f"weights and plan disagree on datasets: {sorted(missing)}")
        self.plan = plan
        self.tokenizer = tokenizer
        self.rank = rank
        self.context_len = context_len
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.stats = ReadStats()
        completed = completed or {}
        self.completed: dict[str, set[str]] = {d: set(completed.get(d, ())) for d in plan.datasets}
        self._open: set[tuple[str, str]] = set()
        splits = worker_split(plan, rank, num_workers)
        self.streams: dict[str, DatasetStream] = {}
        for name in plan.datasets:
            reader = FileReader(tokenizer, plan, name, shuffle_seed, shuffle_buffer, self.stats)
            self.streams[name] = DatasetStream(
                name,
                splits[name],
                reader,
                completed=self.completed[name],
                threaded=threaded,
                queue_depth=queue_depth,
                on_empty_file=self._file_done,
            )
        self.mux = MuxState(
            {d: weights[d] for d in plan.datasets},
            seed=[plan.seed, rank, 2] if mux_rng is None else None,
            rng_state=mux_rng,
            policy=policy,
        )
        self.sequences_emitted = 0
        self._batches = batch(self._sequences(), batch_size)

    @classmethod
    def restore(
        cls,
        plan: StreamPlan,
        checkpoints: StreamCheckpoint | Sequence[StreamCheckpoint],
        tokenizer: TokenizerModel,
        *,
        rank: int = 0,
        **kwargs,
    ) -> "Scheduler":
        """Resume after checkpoints from one or more ranks.

        Completed files of every checkpoint are skipped, so a run may resume
        under a different world size at an epoch boundary. The multiplexer
        state is taken from the checkpoint of the same rank and world size.
        """
        if isinstance(checkpoints, StreamCheckpoint):
            checkpoints = [checkpoints]
        completed: dict[str, set[str]] = {d: set() for d in plan.datasets}
        mux_rng = None
        shuffle_seed = kwargs.pop("shuffle_seed", None)
        for ck in checkpoints:
            if ck.version != 1:
                raise SchemaMismatch(f"stream checkpoint version {ck.version} unsupported")
            for name, files in ck.completed.items():
                if name not in plan.files:
                    raise PlanMismatch(f"checkpoint references unknown dataset {name!r}")
                unknown = set(files) - set(plan.files[name])
                if unknown:
                    raise PlanMismatch(f"checkpoint references files outside the plan: {sorted(unknown)[:5]}")
                completed[name] |= set(files)
            if ck.rank == rank and ck.world_size == plan.world_size:
                mux_rng = ck.mux_rng
            if shuffle_seed is None:
                shuffle_seed = ck.shuffle_seed
        return cls(
            plan,
            tokenizer,
            rank=rank,
            completed=completed,
            mux_rng=mux_rng,
            shuffle_seed=shuffle_seed or 0,
            **kwargs,
        )

    def _file_done(self, dataset: str, file: str) -> None:
        self.completed[dataset].add(file)
        self._open.discard((dataset, file))

    def documents(self) -> Iterator[Document]:
        while True:
            try:
                doc, name = mux_next(self.mux, self.streams)
            except (AllExhausted, StreamStopped):
                return
            self._open.add((name, doc.file))
            yield doc

    def _sequences(self) -> Iterator[PackedSequence]:
        for seq in pack(self.documents(), self.context_len, self.tokenizer.pad_id):
            for seg in seq.segments:
                if seg.last_in_file:
                    self._file_done(seg.dataset, seg.file)
            self.sequences_emitted += 1
            yield seq

    def __iter__(self):
        return self

    def __next__(self) -> TokenBatch:
        return next(self._batches)

    def at_file_boundary(self) -> bool:
        """True when no file is partially emitted and the stuffing buffer is empty."""
        return not self._open

    def set_weights(self, weights: Mapping[str, float]) -> None:
        """Hot re-weighting hook; call between batches."""
        self.mux.set_weights({d: weights.get(d, 0.0) for d in self.plan.datasets})

    def checkpoint(self) -> StreamCheckpoint:
        """Snapshot between batches."""
        return StreamCheckpoint(
            rank=self.rank,
            world_size=self.plan.world_size,
            completed={d: frozenset(fs) for d, fs in self.completed.items()},
            mux_rng=self.mux.rng_state,
            shuffle_seed=self.shuffle_seed,
        )

    def close(self) -> None:
        for s in self.streams.values():
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
