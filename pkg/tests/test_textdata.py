import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odeblocks.nnkit import DataError
from odeblocks.textdata import (
    UNK,
    Vocab,
    batchify,
    build_vocab,
    bundled_corpus,
    iter_epochs,
    load_corpus,
    split_text,
)


def test_char_vocab_example():
    v = build_vocab("abab", "char")
    assert len(v) == 3
    assert v.itos == [UNK, "a", "b"]


def test_word_vocab_cutoff():
    v = build_vocab("a b a", "word", max_size=2)
    assert v.itos == [UNK, "a"]
    assert v.encode("b a").tolist() == [0, 1]


def test_vocab_deterministic_and_frequency_ranked():
    text = "the cat sat on the mat"
    assert build_vocab(text, "char") == build_vocab(text, "char")
    v = build_vocab(text, "char")
    assert v.itos[1] == " " and v.itos[2] == "t"


def test_empty_corpus_rejected():
    with pytest.raises(DataError):
        build_vocab("", "char")
    with pytest.raises(DataError):
        build_vocab("   \n", "word")


@settings(max_examples=50)
@given(st.text(min_size=1, max_size=200))
def test_char_round_trip(text):
    v = build_vocab(text, "char")
    assert v.decode(v.encode(text)) == text


@settings(max_examples=50)
@given(st.text(min_size=1, max_size=200))
def test_vocab_tsv_round_trip(tmp_path_factory, text):
    v = build_vocab(text, "char")
    path = tmp_path_factory.mktemp("v") / "vocab.tsv"
    v.save(path)
    lines = path.read_text(encoding="utf-8").split("\n")[:-1]
    assert len(lines) == len(v)
    assert all(len(ln.split("\t")) == 2 for ln in lines)
    assert Vocab.load(path) == v


def test_batchify_hand_count():
    ids = np.arange(10)
    batches = batchify(ids, 1, 4)
    assert len(batches) == 2
    assert sum(b.inputs.size for b in batches) == 8
    used = {int(t) for b in batches for t in b.inputs.ravel()}
    assert used == set(range(8))


def test_batchify_exact_length():
    assert len(batchify(np.arange(3 * 5), 3, 4)) == 1
    with pytest.raises(DataError):
        batchify(np.arange(3 * 5 - 1), 3, 4)


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 9), st.integers(0, 60))
def test_targets_are_stream_successors(batch, seq, extra):
    n = batch * (seq + 1) + extra
    stream = np.random.default_rng(n).permutation(n)  # distinct values
    succ = {int(a): int(b) for a, b in zip(stream[:-1], stream[1:])}
    batches = batchify(stream, batch, seq)
    for b in batches:
        assert b.inputs.shape == b.targets.shape == (batch, seq)
        for x, y in zip(b.inputs.ravel(), b.targets.ravel()):
            assert succ[int(x)] == int(y)
    # windows within a lane are contiguous and non-overlapping
    for lane in range(batch):
        seen = np.concatenate([b.inputs[lane] for b in batches])
        pos = [int(np.where(stream == s)[0][0]) for s in seen]
        assert pos == list(range(pos[0], pos[0] + len(pos)))


def test_iter_epochs_covers_each_window_per_epoch():
    batches = batchify(np.arange(200), 2, 9)
    it = iter_epochs(batches, np.random.default_rng(0))
    first = [next(it) for _ in range(len(batches))]
    second = [next(it) for _ in range(len(batches))]
    key = lambda b: int(b.inputs[0, 0])  # noqa: E731
    assert sorted(map(key, first)) == sorted(map(key, batches)) == sorted(map(key, second))
    assert list(map(key, first)) != list(map(key, second))


def test_split_determinism():
    text = "x" * 95 + "y" * 5
    train, valid = split_text(text)
    assert (train, valid) == split_text(text)
    assert len(train) == 90 and train + valid == text


def test_bundled_corpus():
    text = bundled_corpus()
    assert 500_000 < len(text) <= 1_000_000
    assert load_corpus() == text
    train, valid = split_text(text)
    assert len(valid) == len(text) - int(len(text) * 0.9)


def test_load_corpus_from_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("héllo\n", encoding="utf-8")
    assert load_corpus(path) == "héllo\n"
