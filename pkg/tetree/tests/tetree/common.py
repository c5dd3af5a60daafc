from dataclasses import replace
from typing import List

import numpy as np

from tetree.config import ModelDims
from tetree.config import TrainConfig
from tetree.corpus import CorpusRecord
from tetree.corpus import ParallelCorpus
from tetree.corpus import Vocab
from tetree.corpus import build_vocab
from tetree.corpus import record_sentences
from tetree.corpus import tokenize
from tetree.langtree import HierarchyNode


# root -> {alpha -> {aa, ab}, beta -> {ba}}, one layer per node: 6 nodes, paths of 3 layers each.
def small_hierarchy() -> HierarchyNode:
    return HierarchyNode(
        name="root",
        layers=1,
        children=[
            HierarchyNode(
                name="alpha",
                layers=1,
                children=[HierarchyNode("aa", 1, language="aa"), HierarchyNode("ab", 1, language="ab")],
            ),
            HierarchyNode(name="beta", layers=1, children=[HierarchyNode("ba", 1, language="ba")]),
        ],
    )


tiny_records: List[CorpusRecord] = [
    CorpusRecord("e0", "AB", {"aa": "BA", "ab": "AB", "ba": "C"}),
    CorpusRecord("e1", "C", {"aa": "C", "ba": "CC"}),
    CorpusRecord("e2", "BC", {"ab": "CB"}),
    CorpusRecord("e3", "A B", {"aa": "A B", "ab": "B A", "ba": "A"}),
]


def tiny_vocab() -> Vocab:
    return build_vocab(record_sentences(tiny_records))


def tiny_corpus(vocab: Vocab) -> ParallelCorpus:
    return tokenize(tiny_records, vocab)


def tiny_dims(vocab_size: int, learned_positions: bool = False) -> ModelDims:
    return ModelDims(d_model=8, d_ff=16, n_heads=2, vocab_size=vocab_size, learned_positions=learned_positions,
                     max_positions=64)


def tiny_train_config(**overrides: object) -> TrainConfig:
    cfg = TrainConfig(learning_rate=1e-2, batch_size=4, steps=4, pad_margin=2, precision=64, eval_every=2,
                      eval_examples=4)
    return replace(cfg, **overrides)  # type: ignore


def uniform_log_probs(frames: int, vocab: int) -> np.ndarray:
    return np.full((frames, vocab), -np.log(vocab))
