import numpy as np
import pytest

from config import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from data import (
    SentencePair,
    Vocabulary,
    apply_bpe,
    apply_mapping,
    build_vocab,
    collate,
    learn_bpe,
    make_batches,
    make_synthetic,
    read_corpus,
    remove_bpe,
    unpad_batch,
    write_corpus,
)
from errors import InputError


def test_build_vocab_sizes():
    vocab = build_vocab(["a b", "a"], min_count=1)
    assert len(vocab) == 6
    assert vocab.id_to_token[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert vocab.id_to_token[4] == "a"


def test_build_vocab_min_count_maps_rare_to_unk():
    vocab = build_vocab(["a b", "a"], min_count=2)
    assert "b" not in vocab
    assert vocab.encode(["a", "b"]) == [4, UNK_ID]


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(InputError):
        build_vocab([])


def test_vocab_round_trip_on_generated_corpus():
    pairs = make_synthetic("reverse", 50, (1, 9), 15, seed=11)
    vocab = build_vocab([p.source for p in pairs])
    for pair in pairs:
        assert vocab.decode(vocab.encode(pair.source)) == pair.source


def test_eos_is_the_source_end_token():
    assert Vocabulary().id_to_token[EOS_ID] == "</s>"


def test_vocab_requires_reserved_prefix():
    with pytest.raises(InputError):
        Vocabulary(["a", "b"])


def test_sentence_pair_rejects_empty_side():
    with pytest.raises(InputError):
        SentencePair([], ["a"])


def test_synthetic_tasks():
    copy = make_synthetic("copy", 20, (1, 8), 6, seed=2)
    assert all(p.source == p.target for p in copy)
    reverse = make_synthetic("reverse", 20, (1, 8), 6, seed=2)
    assert all(p.target == p.source[::-1] for p in reverse)
    assert apply_mapping(["a", "c"], {"a": "x", "b": "y", "c": "z"}) == ["x", "z"]


def test_map_task_uses_one_bijection_across_seeds():
    train = make_synthetic("map", 200, (3, 6), 5, seed=1)
    dev = make_synthetic("map", 200, (3, 6), 5, seed=99)
    mapping = {}
    for pair in train + dev:
        for s, t in zip(pair.source, pair.target):
            assert mapping.setdefault(s, t) == t
    assert len(set(mapping.values())) == len(mapping)


def test_synthetic_is_seed_deterministic():
    a = make_synthetic("map", 30, (2, 10), 12, seed=7)
    b = make_synthetic("map", 30, (2, 10), 12, seed=7)
    assert a == b
    assert a != make_synthetic("map", 30, (2, 10), 12, seed=8)


def test_synthetic_rejects_bad_length_range():
    with pytest.raises(InputError):
        make_synthetic("copy", 5, (0, 3), 4, seed=0)
    with pytest.raises(InputError):
        make_synthetic("copy", 5, (3, 65), 4, seed=0)


def test_make_batches_sizes_and_padding():
    vocab = build_vocab(["a b c d e"])
    pairs = [
        SentencePair(["a", "b"], ["a"]),
        SentencePair(["a", "b", "c", "d", "e"], ["b", "c"]),
        SentencePair(["c"], ["d"]),
    ]
    batches = make_batches(pairs, vocab, 2, seed=None)
    assert [b.size for b in batches] == [2, 1]
    first = batches[0]
    assert first.src_ids.shape == (2, 5)
    np.testing.assert_array_equal(first.src_pad_mask[0], [False, False, True, True, True])
    np.testing.assert_array_equal(first.src_ids[0, 2:], [PAD_ID] * 3)


def test_batch_teacher_forcing_shift(copy_pairs, copy_vocab):
    for batch in make_batches(copy_pairs, copy_vocab, 8, seed=4):
        assert np.all(batch.tgt_in_ids[:, 0] == BOS_ID)
        for b in range(batch.size):
            length = int((~batch.tgt_pad_mask[b]).sum())
            assert batch.tgt_out_ids[b, length - 1] == EOS_ID
            np.testing.assert_array_equal(batch.tgt_out_ids[b, : length - 1], batch.tgt_in_ids[b, 1:length])
        i_max = batch.tgt_in_ids.shape[1]
        np.testing.assert_array_equal(batch.causal_mask, np.triu(np.ones((i_max, i_max), dtype=bool), k=1))


def test_make_batches_is_seed_deterministic(copy_pairs, copy_vocab):
    a = make_batches(copy_pairs, copy_vocab, 6, seed=9)
    b = make_batches(copy_pairs, copy_vocab, 6, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.src_ids, y.src_ids)
        np.testing.assert_array_equal(x.tgt_out_ids, y.tgt_out_ids)


def test_unpad_reproduces_pairs(copy_pairs, copy_vocab):
    batches = make_batches(copy_pairs, copy_vocab, 7, seed=None)
    restored = [pair for batch in batches for pair in unpad_batch(batch, copy_vocab)]
    assert restored == list(copy_pairs)


def test_collate_rejects_overlong_pairs():
    vocab = build_vocab(["a"])
    with pytest.raises(InputError):
        collate([SentencePair(["a"] * 65, ["a"])], vocab, vocab)
    with pytest.raises(InputError):
        collate([SentencePair(["a"], ["a"] * 65)], vocab, vocab)


def test_collate_accepts_full_length_pair():
    vocab = build_vocab(["a"])
    batch = collate([SentencePair(["a"] * 64, ["a"] * 64)], vocab, vocab)
    assert batch.src_ids.shape == (1, 64)
    assert batch.tgt_in_ids.shape == batch.tgt_out_ids.shape == (1, 65)
    assert batch.tgt_in_ids[0, 0] == BOS_ID and batch.tgt_out_ids[0, -1] == EOS_ID


def test_make_batches_rejects_bad_batch_size(copy_pairs, copy_vocab):
    with pytest.raises(InputError):
        make_batches(copy_pairs, copy_vocab, 0, seed=0)


def test_corpus_round_trip(tmp_path):
    pairs = make_synthetic("map", 10, (1, 5), 6, seed=3)
    path = tmp_path / "corpus.tsv"
    write_corpus(str(path), pairs)
    assert read_corpus(str(path)) == pairs


def test_read_corpus_reports_line_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a b\tc\nno tab here\n", encoding="utf-8")
    with pytest.raises(InputError, match=":2:"):
        read_corpus(str(path))


def test_bpe_segments_and_restores():
    sentences = [["lower", "lowest", "low"], ["newer", "wider"]] * 3
    merges = learn_bpe(sentences, 10)
    assert merges
    for sentence in sentences:
        pieces = apply_bpe(sentence, merges)
        assert remove_bpe(pieces) == sentence


def test_bpe_is_deterministic():
    sentences = [["abab", "baba"], ["abba"]]
    assert learn_bpe(sentences, 5) == learn_bpe(sentences, 5)
