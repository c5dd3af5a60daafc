import itertools
import logging
import os
from collections import Counter
from typing import List

import numpy as np
import pytest
from pytyped.macros.boxed import Boxed

from tests.tetree import common
from tetree.config import CorpusConfig
from tetree.corpus import BLANK_ID
from tetree.corpus import PAD_ID
from tetree.corpus import BatchSampler
from tetree.corpus import CorpusRecord
from tetree.corpus import Example
from tetree.corpus import ParallelCorpus
from tetree.corpus import Vocab
from tetree.corpus import build_vocab
from tetree.corpus import clean_records
from tetree.corpus import corpus_hash
from tetree.corpus import iterate_batches
from tetree.corpus import load_corpus
from tetree.corpus import make_batch
from tetree.corpus import make_source_batch
from tetree.corpus import post_process
from tetree.corpus import random_pad
from tetree.corpus import read_records
from tetree.corpus import required_frames
from tetree.corpus import split
from tetree.corpus import write_records
from tetree.errors import ContractException
from tetree.errors import DataException
from tetree.errors import Rejection


def _is_subsequence(short: List[int], long: List[int]) -> bool:
    it = iter(long)
    return all(any(x == y for y in it) for x in short)


def test_post_process() -> None:
    cfg = CorpusConfig()
    assert post_process("Comment  ça va", cfg) == Boxed("COMMENT ÇA VA")
    assert post_process("Привет мир", cfg) == Boxed("ПРИВЕТ МИР")
    rejected = post_process("Hello, world", cfg)
    assert isinstance(rejected, list) and isinstance(rejected[0], Rejection)
    assert post_process("Hello, world", CorpusConfig(punctuation_filter=False)) == Boxed("HELLO, WORLD")
    assert post_process("abc 日本", cfg) == Boxed("ABC")
    assert isinstance(post_process("日本", cfg), list)


def test_post_process_removes_every_character_of_other_scripts() -> None:
    cfg = CorpusConfig(punctuation_filter=False)
    assert isinstance(post_process("你好。", cfg), list)
    assert post_process("HELLO नमस्ते", cfg) == Boxed("HELLO")
    assert post_process("SALUT ٣٤", cfg) == Boxed("SALUT")
    assert post_process("e\u0301te 2024 – «ok»", cfg) == Boxed("E\u0301TE 2024 – «OK»")
    assert post_process("Мир 7", cfg) == Boxed("МИР 7")


def test_clean_records_drops_rejected_sentences() -> None:
    records = [
        CorpusRecord("a", "hi", {"fr": "salut", "de": "hallo!"}),
        CorpusRecord("b", "hi?", {"fr": "salut"}),
        CorpusRecord("c", "hi", {"de": "hallo."}),
    ]
    kept, dropped = clean_records(records, CorpusConfig())
    assert dropped == 2
    assert kept == [CorpusRecord("a", "HI", {"fr": "SALUT"})]


def test_clean_records_logs_every_drop_as_a_warning(caplog) -> None:
    caplog.set_level(logging.DEBUG, logger="tetree.corpus")
    records = [CorpusRecord("a", "hi", {"fr": "salut", "de": "日本"}), CorpusRecord("b", "日本", {"fr": "salut"})]
    kept, dropped = clean_records(records, CorpusConfig())
    assert dropped == 1
    assert kept == [CorpusRecord("a", "HI", {"fr": "SALUT"})]
    drops = [r for r in caplog.records if r.name == "tetree.corpus"]
    assert len(drops) == 3
    assert {r.levelno for r in drops} == {logging.WARNING}
    messages = " ".join(r.getMessage() for r in drops)
    assert "example b" in messages
    assert "de target of example a" in messages
    assert "Dropped 1 of 2 examples" in messages


def test_vocab_reserves_blank_and_pad() -> None:
    vocab = build_vocab(["BA", "AC"])
    assert vocab.tokens == ["<BLANK>", "<PAD>", "B", "A", "C"]
    assert vocab.encode("CAB") == [4, 3, 2]
    assert vocab.decode([BLANK_ID, 4, PAD_ID, 3]) == "CA"
    with pytest.raises(DataException):
        vocab.encode("Z")
    with pytest.raises(DataException):
        Vocab(["A", "<PAD>"])


def test_vocab_language_tokens_and_persistence(tmp_path) -> None:
    vocab = build_vocab(["AB"]).with_language_tokens(["fr", "de"])
    assert vocab.language_token("fr") == 4
    assert vocab.language_token("de") == 5
    assert vocab.decode([2, 4, 3, 5]) == "AB"
    path = os.path.join(str(tmp_path), "vocab.txt")
    vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded == vocab
    assert loaded.fingerprint() == vocab.fingerprint()
    assert build_vocab(["AB"]).fingerprint() != vocab.fingerprint()


def test_records_round_trip_and_duplicate_ids(tmp_path) -> None:
    path = os.path.join(str(tmp_path), "corpus.jsonl")
    write_records(path, common.tiny_records)
    assert read_records(path) == common.tiny_records
    digest = corpus_hash(path)
    assert len(digest) == 64 and corpus_hash(path) == digest

    write_records(path, [common.tiny_records[0], common.tiny_records[0]])
    with pytest.raises(DataException):
        read_records(path)


def test_load_corpus_builds_vocabulary(tmp_path) -> None:
    path = os.path.join(str(tmp_path), "corpus.jsonl")
    write_records(path, common.tiny_records)
    corpus, vocab = load_corpus(path, CorpusConfig())
    assert len(corpus) == 4
    assert corpus.languages == ["aa", "ab", "ba"]
    assert vocab == common.tiny_vocab()


def test_random_pad_keeps_source_as_subsequence() -> None:
    rng = np.random.default_rng(0)
    for case in range(300):
        source = [int(x) for x in rng.integers(2, 9, size=int(rng.integers(0, 10)))]
        total = len(source) + int(rng.integers(1, 10))
        padded = random_pad(source, total, case)
        assert len(padded) == total
        assert [x for x in padded if x != PAD_ID] == source
        assert _is_subsequence(source, padded)
    assert random_pad([5, 6], 6, 3) == random_pad([5, 6], 6, 3)
    assert random_pad([], 3, 0) == [PAD_ID] * 3
    with pytest.raises(ContractException):
        random_pad([2, 3, 4], 2, 0)


def test_random_pad_reaches_every_placement() -> None:
    seen: Counter = Counter()
    for seed in range(10000):
        padded = random_pad([5, 6], 4, seed)
        seen[tuple(i for i, x in enumerate(padded) if x != PAD_ID)] += 1
    assert set(seen) == set(itertools.combinations(range(4), 2))
    assert all(count > 10000 / 6 * 0.8 for count in seen.values())


def test_required_frames_counts_repeats() -> None:
    assert required_frames([]) == 0
    assert required_frames([2, 3, 4]) == 3
    assert required_frames([2, 2, 3, 3, 3]) == 8


def test_split_is_seeded_and_exhaustive() -> None:
    examples = [Example("x%03d" % i, (2,), {"fr": (2,)}) for i in range(101)]
    train, test = split(ParallelCorpus(examples), 0.5, seed=7)
    assert (len(train), len(test)) == (50, 51)
    assert sorted(train.ids() + test.ids()) == sorted(e.id for e in examples)
    again, _ = split(ParallelCorpus(list(reversed(examples))), 0.5, seed=7)
    assert again.ids() == train.ids()
    with pytest.raises(ContractException):
        split(ParallelCorpus(examples[:1]), 0.5, 0)
    with pytest.raises(ContractException):
        split(ParallelCorpus(examples), 1.0, 0)


def test_make_batch_shapes_and_masks() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    batch = make_batch(corpus.examples, ["aa", "ab", "ba"], seed=0, pad_margin=3)
    # longest target "A B" has three symbols
    assert batch.frames == 3 + 3
    assert batch.size == 4
    assert batch.targets["ab"].mask.tolist() == [True, False, True, True]
    assert batch.targets["ba"].lengths.tolist() == [1, 2, 0, 1]
    assert batch.targets["aa"].present == 3
    for row, example in zip(batch.inputs.tolist(), corpus.examples):
        assert [x for x in row if x != PAD_ID] == list(example.source)


def test_make_batch_widens_for_ctc_and_language_tokens() -> None:
    example = Example("r", (2,), {"fr": (3, 3, 3)})
    batch = make_batch([example], ["fr"], seed=1, pad_margin=0)
    assert batch.frames == 5
    tagged = make_batch([Example("s", (2, 2, 2, 2), {"fr": (3,)})], ["fr"], 1, 0, {"fr": 9})
    assert tagged.frames == 5
    row = tagged.inputs_for("fr")[0].tolist()
    assert [x for x in row if x != PAD_ID] == [9, 2, 2, 2, 2]
    with pytest.raises(ContractException):
        make_batch([], ["fr"], 0)


def test_make_source_batch_uses_source_length() -> None:
    batch = make_source_batch([[2, 3], [4]], seed=0, pad_margin=4)
    assert batch.frames == 6
    assert batch.targets == {}


def test_batch_sampler_is_a_pure_function_of_step() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    sampler = BatchSampler(corpus, ["aa", "ab", "ba"], batch_size=3, seed=5, pad_margin=2)
    first = [sampler.batch(k) for k in range(4)]
    fresh = BatchSampler(corpus, ["aa", "ab", "ba"], batch_size=3, seed=5, pad_margin=2)
    for k in reversed(range(4)):
        again = fresh.batch(k)
        assert again.example_ids == first[k].example_ids
        np.testing.assert_array_equal(again.inputs, first[k].inputs)
    # the first epoch visits every example once
    assert sorted(first[0].example_ids + first[1].example_ids[:1]) == ["e0", "e1", "e2", "e3"]


def test_iterate_batches_covers_the_corpus_in_order() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    batches = list(iterate_batches(corpus, ["aa"], batch_size=3, seed=0, pad_margin=1))
    assert [b.example_ids for b in batches] == [["e0", "e1"], ["e3"]]
