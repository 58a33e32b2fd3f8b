"""Byte-pair-encoding tokenizer with whitespace-run and digit rules.

Vocabulary layout (ids are dense):

    0            <pad>
    1            <s>      (BOS)
    2            </s>     (EOS)
    3..258       <0x00>..<0xFF> byte-fallback tokens
    259..282     runs of 1..24 U+0020 spaces
    283..292     the digits 0..9
    293..        learned alphabet characters, then merge results

Words never contain whitespace or ASCII digits, so no learned piece can
contain a digit and digits are always emitted one per token.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass
from os import PathLike
from typing import Iterable

from .errors import EmptyCorpus, IdOutOfRange, TargetTooSmall, TokenizerFormatError

MAGIC = "NYOTOK v1"

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

MAX_SPACE_RUN = 24
DIGITS = "0123456789"
BYTE_OFFSET = 3
SPACE_OFFSET = BYTE_OFFSET + 256
DIGIT_OFFSET = SPACE_OFFSET + MAX_SPACE_RUN
NUM_RESERVED = DIGIT_OFFSET + len(DIGITS)

DEFAULT_VOCAB_SIZE = 512
WONTON7B_VOCAB_SIZE = 139_776

NORMALIZATION_FORM = "NFC"

WORD = "word"
DIGIT = "digit"
SPACE_RUN = "space-run"
OTHER_BYTE = "other-byte"

_PRETOKEN_RE = re.compile(r"( +)|([0-9])|(\s)|([^\s0-9]+)")


@dataclass(frozen=True)
class Pretoken:
    kind: str
    text: str


@dataclass(frozen=True)
class TokenizerMetrics:
    compression_rate: float
    fertility: float
    continued_word_proportion: float
    n_bytes: int
    n_tokens: int
    n_words: int
    n_word_tokens: int

    def as_dict(self) -> dict:
        return {
            "compression_rate": self.compression_rate,
            "fertility": self.fertility,
            "continued_word_proportion": self.continued_word_proportion,
            "bytes": self.n_bytes,
            "tokens": self.n_tokens,
            "words": self.n_words,
            "word_tokens": self.n_word_tokens,
        }


def normalize(text: str) -> str:
    return unicodedata.normalize(NORMALIZATION_FORM, text)


def pretokenize(text: str) -> list[Pretoken]:
    """Split normalized text into word, digit, space-run and other-byte pretokens.

    Runs of U+0020 longer than 24 are chunked greedily from the left. Any
    other whitespace character becomes its own other-byte pretoken.
    """
    out = []
    for m in _PRETOKEN_RE.finditer(normalize(text)):
        spaces, digit, other, word = m.groups()
        if spaces is not None:
            n = len(spaces)
            while n > 0:
                take = min(n, MAX_SPACE_RUN)
                out.append(Pretoken(SPACE_RUN, " " * take))
                n -= take
        elif digit is not None:
            out.append(Pretoken(DIGIT, digit))
        elif other is not None:
            out.append(Pretoken(OTHER_BYTE, other))
        else:
            out.append(Pretoken(WORD, word))
    return out


def reserved_tokens() -> list[str]:
    tokens = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN]
    tokens += [f"<0x{b:02X}>" for b in range(256)]
    tokens += [" " * n for n in range(1, MAX_SPACE_RUN + 1)]
    tokens += list(DIGITS)
    return tokens


_SPECIAL_STRINGS = frozenset({PAD_TOKEN, BOS_TOKEN, EOS_TOKEN})


class TokenizerModel:
    """Immutable BPE model. Safe to share between readers once built."""

    def __init__(self, vocab: list[str], merges: list[tuple[str, str]]):
        reserved = reserved_tokens()
        if vocab[:NUM_RESERVED] != reserved:
            raise TokenizerFormatError("reserved token block is missing or out of order")
        if len(set(vocab)) != len(vocab):
            raise TokenizerFormatError("duplicate token strings in vocab")
        self.vocab: tuple[str, ...] = tuple(vocab)
        self.merges: tuple[tuple[str, str], ...] = tuple(merges)
        self._piece_ids = {tok: i for i, tok in enumerate(vocab) if i >= SPACE_OFFSET}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        for left, right in self.merges:
            if left + right not in self._piece_ids:
                raise TokenizerFormatError(f"merge result {left + right!r} not in vocab")
        self._word_cache: dict[str, tuple[int, ...]] = {}

    # ids and surfaces

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID

    @staticmethod
    def byte_id(b: int) -> int:
        return BYTE_OFFSET + b

    @staticmethod
    def space_run_id(n: int) -> int:
        if not 1 <= n <= MAX_SPACE_RUN:
            raise ValueError(f"space run length must be in 1..{MAX_SPACE_RUN}")
        return SPACE_OFFSET + n - 1

    @staticmethod
    def digit_id(d: str) -> int:
        return DIGIT_OFFSET + DIGITS.index(d)

    def token_surface(self, token_id: int) -> bytes:
        """UTF-8 bytes a token contributes to decoded text (empty for PAD/BOS/EOS)."""
        if not 0 <= token_id < len(self.vocab):
            raise IdOutOfRange(f"token id {token_id} outside 0..{len(self.vocab) - 1}")
        if token_id < BYTE_OFFSET:
            return b""
        if token_id < SPACE_OFFSET:
            return bytes([token_id - BYTE_OFFSET])
        return self.vocab[token_id].encode("utf-8")

    def is_special(self, token_id: int) -> bool:
        return token_id < SPACE_OFFSET

    # encoding

    def _bpe(self, symbols: list[str]) -> list[str]:
        ranks = self._ranks
        while len(symbols) > 1:
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        ids: list[int] = []
        run: list[str] = []

        def flush():
            if run:
                ids.extend(self._piece_ids[s] for s in self._bpe(run))
                run.clear()

        for ch in word:
            if ch in self._piece_ids:
                run.append(ch)
            else:
                flush()
                ids.extend(BYTE_OFFSET + b for b in ch.encode("utf-8"))
        flush()
        result = tuple(ids)
        self._word_cache[word] = result
        return result

    def encode_pretoken(self, pt: Pretoken) -> tuple[int, ...]:
        if pt.kind == WORD:
            return self._encode_word(pt.text)
        if pt.kind == DIGIT:
            return (self.digit_id(pt.text),)
        if pt.kind == SPACE_RUN:
            return (self.space_run_id(len(pt.text)),)
        return tuple(BYTE_OFFSET + b for b in pt.text.encode("utf-8"))

    def encode(self, text: str, add_bos_eos: bool = False) -> list[int]:
        ids = [BOS_ID] if add_bos_eos else []
        for pt in pretokenize(text):
            ids.extend(self.encode_pretoken(pt))
        if add_bos_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for i in ids:
            buf += self.token_surface(int(i))
        return buf.decode("utf-8", errors="replace")

    # metrics

    def compute_metrics(self, corpus: Iterable[str]) -> TokenizerMetrics:
        """Compression rate, fertility and continued-word proportion over a corpus.

        Words are whitespace-delimited runs; word tokens are the tokens emitted
        for the non-whitespace pretokens (words and digits) making up those runs.
        """
        n_bytes = n_tokens = n_words = n_word_tokens = 0
        for text in corpus:
            norm = normalize(text)
            n_bytes += len(norm.encode("utf-8"))
            n_words += len(norm.split())
            for pt in pretokenize(norm):
                k = len(self.encode_pretoken(pt))
                n_tokens += k
                if pt.kind in (WORD, DIGIT):
                    n_word_tokens += k
        if n_bytes == 0:
            raise EmptyCorpus("corpus contains no bytes")
        return TokenizerMetrics(
            compression_rate=n_bytes / n_tokens,
            fertility=n_word_tokens / n_words if n_words else 0.0,
            continued_word_proportion=(n_word_tokens - n_words) / n_word_tokens if n_word_tokens else 0.0,
            n_bytes=n_bytes,
            n_tokens=n_tokens,
            n_words=n_words,
            n_word_tokens=n_word_tokens,
        )

    # serialization

    def to_text(self) -> str:
        lines = [MAGIC, f"vocab {len(self.vocab)}"]
        lines += [f"{i}\t{_escape(tok)}" for i, tok in enumerate(self.vocab)]
        lines.append(f"merges {len(self.merges)}")
        lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TokenizerModel":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            if lines[0] != MAGIC:
                raise TokenizerFormatError(f"bad header {lines[0]!r}")
            kw, n = lines[1].split(" ")
            if kw != "vocab":
                raise TokenizerFormatError("expected vocab section")
            n = int(n)
            vocab = []
            for expect, line in enumerate(lines[2 : 2 + n]):
                idx, tok = line.split("\t", 1)
                if int(idx) != expect:
                    raise TokenizerFormatError(f"non-dense id {idx}")
                vocab.append(_unescape(tok))
            kw, m = lines[2 + n].split(" ")
            if kw != "merges":
                raise TokenizerFormatError("expected merges section")
            m = int(m)
            merges = []
            for line in lines[3 + n : 3 + n + m]:
                left, right = line.split("\t")
                merges.append((_unescape(left), _unescape(right)))
            if len(vocab) != n or len(merges) != m or len(lines) != 3 + n + m:
                raise TokenizerFormatError("section length mismatch")
        except (IndexError, ValueError) as exc:
            raise TokenizerFormatError(f"malformed tokenizer file: {exc}") from exc
        return cls(vocab, merges)

    def save(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: str | PathLike) -> "TokenizerModel":
        with open(path, encoding="utf-8", newline="") as f:
            return cls.from_text(f.read())


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "\\" and i + 1 < len(s):
            nxt = s[i + 1]
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def train_bpe(corpus: Iterable[str], target_vocab_size: int = DEFAULT_VOCAB_SIZE) -> TokenizerModel:
    """Learn merges inside word pretokens until the vocab reaches the target size.

    The alphabet is filled first with the most frequent word characters; the
    remaining budget goes to merges. Ties between equally frequent pairs go to
    the lexicographically smaller pair. Characters that do not make it into
    the alphabet fall back to byte tokens and never take part in merges.
    """
    if target_vocab_size <= NUM_RESERVED:
        raise TargetTooSmall(
            f"target vocab {target_vocab_size} cannot hold the {NUM_RESERVED} reserved tokens plus any piece"
        )
    word_counts: Counter[str] = Counter()
    saw_text = False
    for text in corpus:
        for pt in pretokenize(text):
            saw_text = True
            if pt.kind == WORD:
                word_counts[pt.text] += 1
    if not saw_text:
        raise EmptyCorpus("corpus has no non-empty records")

    char_counts: Counter[str] = Counter()
    for w, c in word_counts.items():
        for ch in w:
            char_counts[ch] += c
    room = target_vocab_size - NUM_RESERVED
    alphabet = [ch for ch, _ in sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0]))][:room]
    vocab = reserved_tokens() + alphabet
    taken = set(vocab)
    in_alphabet = set(alphabet)

    # None marks a byte-fallback character: it blocks merges on either side.
    words: list[list[str | None]] = []
    freqs: list[int] = []
    for w, c in sorted(word_counts.items()):
        words.append([ch if ch in in_alphabet else None for ch in w])
        freqs.append(c)

    pair_counts: Counter[tuple[str, str]] = Counter()
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, syms in enumerate(words):
        for pair in _pairs(syms):
            pair_counts[pair] += freqs[idx]
            where[pair].add(idx)

    merges: list[tuple[str, str]] = []
    banned: set[tuple[str, str]] = set()
    while len(vocab) < target_vocab_size:
        candidates = [(-c, p) for p, c in pair_counts.items() if c > 0 and p not in banned]
        if not candidates:
            break
        _, best = min(candidates)
        left, right = best
        new = left + right
        if new in _SPECIAL_STRINGS:
            banned.add(best)
            continue
        merges.append(best)
        banned.add(best)
        if new not in taken:
            vocab.append(new)
            taken.add(new)
        for idx in sorted(where.pop(best, ())):
            syms = words[idx]
            for pair in _pairs(syms):
                pair_counts[pair] -= freqs[idx]
            merged = _merge(syms, left, right)
            words[idx] = merged
            for pair in _pairs(merged):
                pair_counts[pair] += freqs[idx]
                where[pair].add(idx)
        pair_counts.pop(best, None)
    return TokenizerModel(vocab, merges)


def _pairs(syms: list[str | None]):
    for a, b in zip(syms, syms[1:]):
        if a is not None and b is not None:
            yield (a, b)


def _merge(syms: list[str | None], left: str, right: str) -> list[str | None]:
    out: list[str | None] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out
