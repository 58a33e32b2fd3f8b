import itertools
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from nyoforge.errors import EmptyCorpus, IdOutOfRange, TargetTooSmall, TokenizerFormatError
from nyoforge.tokenizer import (
    BOS_ID,
    DIGIT,
    EOS_ID,
    MAX_SPACE_RUN,
    NUM_RESERVED,
    OTHER_BYTE,
    PAD_ID,
    SPACE_RUN,
    WORD,
    TokenizerModel,
    normalize,
    pretokenize,
    train_bpe,
)


def scan_pretokens(text):
    """Character-scan oracle: classify each char, then group runs."""
    out = []
    for cls, grp in itertools.groupby(
        normalize(text),
        key=lambda c: "space" if c == " " else "digit" if c in "0123456789" else "ws" if c.isspace() else "word",
    ):
        chars = "".join(grp)
        if cls == "space":
            while chars:
                out.append((SPACE_RUN, chars[:24]))
                chars = chars[24:]
        elif cls == "digit":
            out += [(DIGIT, c) for c in chars]
        elif cls == "ws":
            out += [(OTHER_BYTE, c) for c in chars]
        else:
            out.append((WORD, chars))
    return out


def best_pair_bruteforce(words):
    counts = Counter()
    for w in words:
        for a, b in zip(w, w[1:]):
            counts[(a, b)] += 1
    top = max(counts.values())
    return min(p for p, c in counts.items() if c == top), counts


def test_pretokenize_examples():
    assert [(p.kind, p.text) for p in pretokenize("ab 12")] == [
        (WORD, "ab"),
        (SPACE_RUN, " "),
        (DIGIT, "1"),
        (DIGIT, "2"),
    ]
    assert pretokenize("") == []
    assert [len(p.text) for p in pretokenize(" " * 30)] == [24, 6]


@given(st.text(max_size=80))
def test_pretokenize_matches_scan_oracle(s):
    got = [(p.kind, p.text) for p in pretokenize(s)]
    assert got == scan_pretokens(s)
    assert "".join(t for _, t in got) == normalize(s)


def test_first_merge_abab():
    model = train_bpe(["abab"], NUM_RESERVED + 3)
    (best, _) = best_pair_bruteforce(["abab"])
    assert best == ("a", "b")
    assert model.merges == (("a", "b"),)
    assert model.vocab_size == NUM_RESERVED + 3


def test_tie_break_lexicographic():
    (best, counts) = best_pair_bruteforce(["abcabc"])
    assert counts[("a", "b")] == counts[("b", "c")] == 2
    assert best == ("a", "b")
    model = train_bpe(["abcabc"], NUM_RESERVED + 4)
    assert model.merges[0] == ("a", "b")


def test_digit_only_corpus_learns_nothing():
    model = train_bpe(["123 456", "7890"], 400)
    assert model.merges == ()
    assert model.vocab_size == NUM_RESERVED


def test_vocab_reaches_target_or_saturates(micro_corpus):
    assert train_bpe(micro_corpus, 350).vocab_size == 350
    small = train_bpe(["ab"], 1000)
    assert small.vocab_size == NUM_RESERVED + 3  # a, b, ab


def test_merge_order_matches_exhaustive_recount():
    corpus = ["low lower lowest newer wider", "new newest widest low"]
    model = train_bpe(corpus, NUM_RESERVED + 30)
    words = [list(p.text) for t in corpus for p in pretokenize(t) if p.kind == WORD]
    for left, right in model.merges:
        best, _ = best_pair_bruteforce(words)
        assert (left, right) == best
        merged = []
        for w in words:
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            merged.append(out)
        words = merged


def test_training_errors():
    with pytest.raises(EmptyCorpus):
        train_bpe([], 400)
    with pytest.raises(EmptyCorpus):
        train_bpe(["", ""], 400)
    with pytest.raises(TargetTooSmall):
        train_bpe(["abc"], NUM_RESERVED)


def test_determinism(micro_corpus):
    a = train_bpe(micro_corpus, 380).to_text()
    b = train_bpe(list(micro_corpus), 380).to_text()
    assert a == b


def test_encode_examples(tokenizer):
    assert tokenizer.encode("2024") == [tokenizer.digit_id(d) for d in "2024"]
    assert tokenizer.encode("    ") == [tokenizer.space_run_id(4)]
    ids = tokenizer.encode("hi", add_bos_eos=True)
    assert ids[0] == BOS_ID and ids[-1] == EOS_ID


def test_decode_examples(tokenizer):
    assert tokenizer.decode([]) == ""
    assert tokenizer.decode([PAD_ID] * 5) == ""
    s = "héllo  wörld"
    assert tokenizer.decode(tokenizer.encode(s, add_bos_eos=True)) == s
    with pytest.raises(IdOutOfRange):
        tokenizer.decode([tokenizer.vocab_size])


def test_tabs_and_unknown_chars_use_byte_fallback(tokenizer):
    ids = tokenizer.encode("\t")
    assert ids == [tokenizer.byte_id(9)]
    ids = tokenizer.encode("🦀")
    assert ids == [tokenizer.byte_id(b) for b in "🦀".encode()]


@pytest.mark.parametrize("n", range(1, 101))
def test_space_runs(tokenizer, n):
    ids = tokenizer.encode(" " * n)
    expected = [tokenizer.space_run_id(24)] * (n // 24)
    if n % 24:
        expected.append(tokenizer.space_run_id(n % 24))
    assert ids == expected


def test_vocab_invariants(tokenizer):
    vocab = tokenizer.vocab
    assert len(set(vocab)) == len(vocab)
    runs = [t for i, t in enumerate(vocab) if not tokenizer.is_special(i) and set(t) == {" "}]
    assert sorted(len(t) for t in runs) == list(range(1, MAX_SPACE_RUN + 1))
    for i in range(tokenizer.vocab_size):
        surface = tokenizer.token_surface(i).decode("utf-8", errors="replace")
        if any(c.isdigit() and c in "0123456789" for c in surface):
            assert len(surface) == 1
    for d in "0123456789":
        assert vocab[tokenizer.digit_id(d)] == d


@given(st.text(max_size=60))
@settings(max_examples=300)
def test_roundtrip_property(tokenizer, s):
    assert tokenizer.decode(tokenizer.encode(s)) == normalize(s)


def test_special_string_in_text_is_not_a_special(micro_corpus):
    model = train_bpe(micro_corpus + ["<s> <s> <s> </s>"] * 5, 420)
    ids = model.encode("<s>")
    assert BOS_ID not in ids
    assert model.decode(ids) == "<s>"


def test_serialization_roundtrip(tmp_path, micro_corpus):
    model = train_bpe(micro_corpus + ["back\\slash back\\slash"], 420)
    path = tmp_path / "tok.txt"
    model.save(path)
    text = path.read_text(encoding="utf-8")
    assert text.startswith("NYOTOK v1\nvocab 420\n0\t<pad>\n")
    loaded = TokenizerModel.load(path)
    assert loaded.vocab == model.vocab
    assert loaded.merges == model.merges
    assert loaded.to_text() == text


def test_serialization_escapes():
    model = TokenizerModel.from_text(train_bpe(["a\\b a\\b"], NUM_RESERVED + 4).to_text())
    assert "a\\" in model.vocab or "\\b" in model.vocab
    with pytest.raises(TokenizerFormatError):
        TokenizerModel.from_text("NYOTOK v2\n")


def test_metrics_aa_example():
    model = train_bpe(["aa aa"], NUM_RESERVED + 2)
    assert model.encode("aa aa") == [model.vocab.index("aa"), model.space_run_id(1), model.vocab.index("aa")]
    m = model.compute_metrics(["aa aa"])
    assert m.compression_rate == pytest.approx(5 / 3)
    assert m.fertility == 1.0
    assert m.continued_word_proportion == 0.0


def test_metrics_two_way_split():
    model = train_bpe(["ab"], NUM_RESERVED + 2)  # a, b only
    m = model.compute_metrics(["ab ab ab"])
    assert m.fertility == 2.0
    assert m.continued_word_proportion == 0.5
    assert train_bpe(["a"], NUM_RESERVED + 1).compute_metrics(["a"]).fertility == 1.0
    with pytest.raises(EmptyCorpus):
        model.compute_metrics([""])
