import json
import os
from dataclasses import replace

import numpy as np
import pytest

from tests.tetree import common
from tetree.config import Arch
from tetree.corpus import Batch
from tetree.corpus import CorpusRecord
from tetree.corpus import LanguageTargets
from tetree.corpus import make_batch
from tetree.corpus import tokenize
from tetree.errors import NumericException
from tetree.langtree import ModelGraph
from tetree.langtree import build_tet
from tetree.langtree import build_variant
from tetree.optim import OptimizerState
from tetree.trainer import fit
from tetree.trainer import language_order
from tetree.trainer import learning_rate_at
from tetree.trainer import shared_parameter_names
from tetree.trainer import train_step

LANGUAGES = ["aa", "ab", "ba"]


def _graph(seed: int = 0, arch: Arch = Arch.TET) -> ModelGraph:
    return build_variant(common.small_hierarchy(), arch, common.tiny_dims(len(common.tiny_vocab())), seed=seed)


def _full_batch() -> Batch:
    corpus = common.tiny_corpus(common.tiny_vocab())
    return make_batch(corpus.examples, LANGUAGES, seed=0, pad_margin=2)


def test_language_order_and_warmup() -> None:
    g = _graph()
    batch = _full_batch()
    assert language_order(g, batch, common.tiny_train_config()) == LANGUAGES
    assert language_order(g, batch, common.tiny_train_config(language_order=["ba", "zz"])) == ["ba", "aa", "ab"]
    cfg = common.tiny_train_config(warmup_steps=4)
    assert learning_rate_at(cfg, 0) == pytest.approx(2.5e-3)
    assert learning_rate_at(cfg, 3) == pytest.approx(1e-2)
    assert learning_rate_at(cfg, 10) == pytest.approx(1e-2)


def test_shared_parameters() -> None:
    shared = shared_parameter_names(_graph())
    assert {"embed.table", "node0.wq", "node1.wq"} <= shared
    assert "node4.wq" not in shared
    assert not any(name.startswith("head.") for name in shared)


def test_shared_nodes_are_stepped_once_per_language() -> None:
    g = _graph()
    opt = OptimizerState()
    before = g.nodes[5].params.wq.values.copy()
    result = train_step(g, _full_batch(), common.tiny_train_config(), opt)
    assert not result.aborted
    assert sorted(result.losses) == LANGUAGES
    assert all(np.isfinite(v) for v in result.losses.values())
    assert opt.step_of("node0.wq") == 3
    assert opt.step_of("embed.table") == 3
    assert opt.step_of("node1.wq") == 2
    assert opt.step_of("node4.wq") == 1
    assert opt.step_of("head.aa.w") == 1
    assert not np.array_equal(before, g.nodes[5].params.wq.values)
    assert all(p.grad is None for p in g.parameters().values())


def test_joint_accumulation_steps_every_parameter_once() -> None:
    g = _graph()
    opt = OptimizerState()
    train_step(g, _full_batch(), common.tiny_train_config(joint_accumulation=True), opt)
    assert opt.step_of("node0.wq") == 1
    assert opt.step_of("node1.wq") == 1
    assert opt.step_of("head.ba.w") == 1


def test_language_order_changes_the_update() -> None:
    a, b = _graph(), _graph()
    train_step(a, _full_batch(), common.tiny_train_config(), OptimizerState())
    train_step(b, _full_batch(), common.tiny_train_config(language_order=["ba", "ab", "aa"]), OptimizerState())
    assert not np.array_equal(a.nodes[0].params.wq.values, b.nodes[0].params.wq.values)


def test_non_finite_loss_rolls_the_step_back() -> None:
    g = _graph()
    opt = OptimizerState()
    before = {name: t.values.copy() for name, t in g.parameters().items()}
    batch = Batch(
        inputs=np.array([[2, 3]]),
        input_lengths=np.array([2]),
        targets={
            "aa": LanguageTargets(np.array([[2]]), np.array([1]), np.array([True])),
            "ab": LanguageTargets(np.array([[2, 2, 2]]), np.array([3]), np.array([True])),
        },
    )
    result = train_step(g, batch, common.tiny_train_config(), opt)
    assert result.aborted
    assert result.failed_languages == ["ab"]
    assert np.isfinite(result.losses["aa"]) and result.losses["ab"] == float("inf")
    for name, t in g.parameters().items():
        np.testing.assert_array_equal(t.values, before[name])
    assert opt.moments == {}


def test_fit_gives_up_after_repeated_aborts() -> None:
    g = _graph()
    g.embedding.values[...] = np.nan
    vocab = common.tiny_vocab()
    cfg = common.tiny_train_config(max_aborted_steps=1)
    with pytest.raises(NumericException) as caught:
        fit(g, common.tiny_corpus(vocab), cfg, vocab)
    assert caught.value.step == 1


def test_fit_writes_records_and_checkpoints(tmp_path) -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    out = str(tmp_path)
    report = fit(_graph(), corpus, common.tiny_train_config(checkpoint_every=2), vocab, test=corpus, out_dir=out)
    assert report.final_step == 4
    assert report.aborted_steps == 0
    assert [r.step for r in report.records] == [2, 4]
    assert sorted(report.records[0].languages) == LANGUAGES
    assert all(s.wer is not None for s in report.records[-1].languages.values())
    with open(os.path.join(out, "train.jsonl"), encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    assert [line["step"] for line in lines] == [2, 4]
    assert report.checkpoint == os.path.join(out, "final.tet")
    assert os.path.exists(os.path.join(out, "final.tet"))
    assert os.path.exists(os.path.join(out, "checkpoint-000002.tet"))


def test_fit_is_deterministic() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    graphs = [_graph(seed=1, arch=Arch.TENC_ALL), _graph(seed=1, arch=Arch.TENC_ALL)]
    for g in graphs:
        fit(g, corpus, common.tiny_train_config(), vocab)
    first, second = (g.parameters() for g in graphs)
    for name, t in first.items():
        np.testing.assert_array_equal(t.values, second[name].values)


def test_small_tree_trains_with_float32() -> None:
    vocab = common.tiny_vocab()
    g = build_tet(common.small_hierarchy(), common.tiny_dims(len(vocab)), seed=0, dtype=np.dtype(np.float32))
    report = fit(g, common.tiny_corpus(vocab), common.tiny_train_config(precision=32), vocab)
    assert g.dtype == np.float32
    assert all(np.isfinite(s.loss) for r in report.records for s in r.languages.values())


def test_parameters_off_the_language_path_stay_untouched() -> None:
    g = _graph()
    full = _full_batch()
    before = {name: t.values.copy() for name, t in g.parameters().items()}
    on_path = set(g.path_parameters("ba"))
    train_step(g, replace(full, targets={"ba": full.targets["ba"]}), common.tiny_train_config(), OptimizerState())
    for name, t in g.parameters().items():
        if name in on_path:
            continue
        np.testing.assert_array_equal(t.values, before[name])
    assert not np.array_equal(g.nodes[4].params.wq.values, before["node4.wq"])


def test_zero_learning_rate_keeps_the_loss_constant() -> None:
    g = _graph()
    batch = _full_batch()
    cfg = common.tiny_train_config(learning_rate=0.0)
    opt = OptimizerState()
    first = train_step(g, batch, cfg, opt, step=0)
    second = train_step(g, batch, cfg, opt, step=1)
    assert first.losses == second.losses


def test_loss_decreases_on_a_copy_task() -> None:
    vocab = common.tiny_vocab()
    sources = ["AB", "C", "BC", "A B", "CA", "B"]
    records = [CorpusRecord("c%d" % i, s, {l: s for l in LANGUAGES}) for i, s in enumerate(sources)]
    batch = make_batch(tokenize(records, vocab).examples, LANGUAGES, seed=0, pad_margin=2)
    g = _graph(seed=3)
    cfg = common.tiny_train_config()
    opt = OptimizerState()
    losses = [float(np.mean(list(train_step(g, batch, cfg, opt, step).losses.values()))) for step in range(40)]
    assert all(np.isfinite(losses))
    assert losses[-1] < 0.8 * losses[0]
