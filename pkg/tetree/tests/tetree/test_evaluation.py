import csv
import os
from contextlib import contextmanager
from typing import Dict
from typing import Iterator
from typing import List

import numpy as np
import pytest

from tests.tetree import common
from tetree import evaluation
from tetree.config import Arch
from tetree.corpus import BLANK_ID
from tetree.corpus import Example
from tetree.corpus import ParallelCorpus
from tetree.corpus import make_batch
from tetree.errors import ContractException
from tetree.evaluation import EvalReport
from tetree.evaluation import LanguageEval
from tetree.evaluation import _Tally
from tetree.evaluation import bench
from tetree.evaluation import compare
from tetree.evaluation import cosine_distances
from tetree.evaluation import embedding_clustering
from tetree.evaluation import evaluate
from tetree.evaluation import family_ratio
from tetree.evaluation import model_vocab
from tetree.evaluation import relative_reduction
from tetree.evaluation import render_table
from tetree.evaluation import tally_logits
from tetree.evaluation import translate
from tetree.evaluation import wer
from tetree.evaluation import word_errors
from tetree.evaluation import write_distance_csv
from tetree.langtree import build_variant
from tetree.langtree import default_hierarchy

LANGUAGES = ["aa", "ab", "ba"]


def _report(wers: Dict[str, float]) -> EvalReport:
    return EvalReport({l: LanguageEval(w, 0, 1, 1) for l, w in wers.items()})


def test_word_error_rate() -> None:
    assert wer("the cat sat", "the cat sit") == pytest.approx(1.0 / 3.0)
    assert word_errors("a b c d", "a c d e") == (2, 4)
    assert wer("a b", "a b") == 0.0
    assert wer("", "") == 0.0
    assert wer("", "x y") == 2.0
    assert wer("a b", "") == 1.0


def _one_hot_logits(rows: List[List[int]], frames: int, vocab: int) -> np.ndarray:
    logits = np.full((len(rows), frames, vocab), -10.0)
    for b, ids in enumerate(rows):
        for t in range(frames):
            logits[b, t, ids[t] if t < len(ids) else BLANK_ID] = 0.0
    return logits


def test_tally_scores_perfect_and_blank_outputs() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    examples = [e for e in corpus.examples if "aa" in e.targets]
    batch = make_batch(examples, ["aa"], seed=0, pad_margin=3)
    targets = batch.targets["aa"]
    perfect: List[List[int]] = []
    for b in range(batch.size):
        row = targets.tokens[b, : targets.lengths[b]].tolist()
        spaced: List[int] = []
        for token in row:
            spaced.extend([token, BLANK_ID])
        perfect.append(spaced)
    tallies: Dict[str, _Tally] = {}
    tally_logits({"aa": _one_hot_logits(perfect, batch.frames, len(vocab))}, batch, vocab, tallies, decode_samples=2)
    result = tallies["aa"].to_eval()
    assert result.wer == 0.0
    assert result.examples == 3
    assert len(result.samples) == 2
    assert result.samples[0].reference == result.samples[0].hypothesis

    tallies = {}
    blank = _one_hot_logits([[] for _ in range(batch.size)], batch.frames, len(vocab))
    tally_logits({"aa": blank}, batch, vocab, tallies)
    assert tallies["aa"].to_eval().wer == 100.0


def test_evaluate_and_translate_cover_every_language() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    for arch in (Arch.TET, Arch.TENC_ALL):
        g = build_variant(common.small_hierarchy(), arch, common.tiny_dims(len(vocab)), seed=0)
        report = evaluate(g, corpus, vocab, batch_size=3, pad_margin=2)
        assert sorted(report.languages) == LANGUAGES
        assert report.languages["aa"].examples == 3
        assert report.languages["ab"].examples == 3
        assert report.languages["ba"].examples == 3
        assert all(e.wer >= 0.0 for e in report.languages.values())
        outputs = translate(g, [vocab.encode("AB"), vocab.encode("C")], vocab, pad_margin=2)
        assert sorted(outputs) == LANGUAGES
        assert all(len(lines) == 2 for lines in outputs.values())
    assert translate(g, [], vocab) == {l: [] for l in LANGUAGES}


def test_model_vocab_checks_the_output_size() -> None:
    vocab = common.tiny_vocab()
    shared = build_variant(common.small_hierarchy(), Arch.TENC_ALL, common.tiny_dims(len(vocab)), seed=0)
    assert len(model_vocab(shared, vocab)) == len(vocab) + 3
    other = build_variant(common.small_hierarchy(), Arch.TET, common.tiny_dims(len(vocab) + 1), seed=0)
    with pytest.raises(ContractException):
        model_vocab(other, vocab)


def test_relative_reduction() -> None:
    assert relative_reduction(35.6, 16.9) == pytest.approx(52.5, abs=0.05)
    assert relative_reduction(24.9, 16.9) == pytest.approx(32.1, abs=0.05)
    assert np.isnan(relative_reduction(0.0, 1.0))


def test_compare_averages_over_seeds() -> None:
    reports = {
        "tet": [_report({"aa": 10.0, "ro": 20.0}), _report({"aa": 14.0, "ro": 22.0})],
        "tenc-lang": [_report({"aa": 20.0, "ro": 30.0}), _report({"aa": 24.0, "ro": 18.0})],
    }
    comparison = compare(reports, {"tet": 100, "tenc-lang": 200}, low_resource="ro")
    tet = comparison.variants["tet"]
    assert tet.wer == {"aa": 12.0, "ro": 21.0}
    assert tet.average == pytest.approx(16.5)
    assert tet.average_std == pytest.approx(1.5)
    assert tet.seeds == 2
    assert comparison.variants["tenc-lang"].parameters == 200
    assert comparison.reductions["tenc-lang"] == pytest.approx(100.0 * (23.0 - 16.5) / 23.0)
    assert comparison.low_resource_wins == {"tenc-lang": 1}
    with pytest.raises(ContractException):
        compare({"tenc-lang": reports["tenc-lang"]}, {})


def test_compare_requires_equal_tet_and_random_tree_sizes() -> None:
    reports = {"tet": [_report({"aa": 10.0})], "tet-rnd": [_report({"aa": 12.0})]}
    comparison = compare(reports, {"tet": 100, "tet-rnd": 100})
    assert comparison.variants["tet-rnd"].parameters == comparison.variants["tet"].parameters == 100
    with pytest.raises(ContractException) as caught:
        compare(reports, {"tet": 100, "tet-rnd": 101})
    assert "tet-rnd" in str(caught.value)


def test_render_table() -> None:
    table = render_table({"TET": {"da": 10.0, "sv": 20.0}, "TEnc-Lang": {"da": 30.0}}, ["da", "sv"], title="WER")
    lines = table.splitlines()
    assert lines[0] == "WER"
    assert lines[1].split(" | ") == ["Model    ", "  Da", "  Sv", "Avg."]
    assert lines[3].endswith("15.0")
    assert "--" in lines[4]
    assert lines[4].endswith("30.0")


def test_bench_counts_layers() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    g = build_variant(common.small_hierarchy(), Arch.TET, common.tiny_dims(len(vocab)), seed=0)
    report = bench(g, corpus, repetitions=3, batch_size=5, warmup=0, pad_margin=2)
    assert report.batch_size == 5
    assert report.layers_executed.shared == 6
    assert report.layers_executed.per_language_sum == 9
    assert report.theoretical_ratio == pytest.approx(1.5)
    assert report.forward_all_ms > 0.0
    with pytest.raises(ContractException):
        bench(g, corpus, repetitions=2)


def test_bench_on_the_default_tree() -> None:
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    g = build_variant(default_hierarchy(), Arch.TET, common.tiny_dims(len(vocab)), seed=0)
    relabelled = ParallelCorpus(
        [Example(e.id, e.source, {l: e.targets.get("aa", e.source) for l in g.languages}) for e in corpus.examples]
    )
    report = bench(g, relabelled, repetitions=3, batch_size=2, warmup=0, pad_margin=2, threads=2)
    assert report.layers_predicted.shared == 24
    assert report.layers_predicted.per_language_sum == 48
    assert report.theoretical_ratio == pytest.approx(2.0)


def test_bench_pins_blas_threads_for_both_sides(monkeypatch) -> None:
    pinned: List[int] = []
    inside: List[bool] = []

    @contextmanager
    def recording_limits(limits: int) -> Iterator[None]:
        pinned.append(limits)
        inside.append(True)
        try:
            yield
        finally:
            inside.append(False)

    monkeypatch.setattr(evaluation, "threadpool_limits", recording_limits)
    vocab = common.tiny_vocab()
    corpus = common.tiny_corpus(vocab)
    g = build_variant(common.small_hierarchy(), Arch.TET, common.tiny_dims(len(vocab)), seed=0)
    report = bench(g, corpus, repetitions=3, batch_size=3, warmup=1, pad_margin=2, threads=2, blas_threads=1)
    assert pinned == [1]
    assert inside == [True, False]
    assert report.blas_threads == 1
    assert report.threads == 2
    assert report.layers_executed == report.layers_predicted
    with pytest.raises(ContractException):
        bench(g, corpus, repetitions=3, blas_threads=0)


def test_cosine_distances_and_family_ratio() -> None:
    vectors = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]])
    d = cosine_distances(vectors)
    np.testing.assert_allclose(np.diag(d), 0.0)
    np.testing.assert_allclose(d, d.T)
    families = {"a": "x", "b": "x", "c": "y", "d": "y"}
    ratio = family_ratio(d, ["a", "b", "c", "d"], families)
    assert ratio is not None and ratio < 0.1
    assert family_ratio(d, ["a", "b"], families) is None


def test_embedding_clustering(tmp_path) -> None:
    vocab = common.tiny_vocab()
    g = build_variant(common.small_hierarchy(), Arch.TET, common.tiny_dims(len(vocab)), seed=0)
    report = embedding_clustering(g, [vocab.encode("AB"), vocab.encode("C A")], [0, -1], pad_margin=2)
    assert report.families == {"aa": "alpha", "ab": "alpha", "ba": "beta"}
    assert [layer.layer for layer in report.layers] == [0, -1]
    first = np.array(report.layers[0].distances)
    np.testing.assert_allclose(first, 0.0, atol=1e-12)
    assert report.layers[1].ratio is not None
    with pytest.raises(ContractException):
        embedding_clustering(g, [vocab.encode("AB")], [3])
    with pytest.raises(ContractException):
        embedding_clustering(g, [], [0])

    path = os.path.join(str(tmp_path), "distances.csv")
    write_distance_csv(path, report.layers[1])
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["language", "aa", "ab", "ba"]
    assert [r[0] for r in rows[1:]] == LANGUAGES
    assert float(rows[1][1]) == 0.0


def test_twin_languages_cluster_together() -> None:
    vocab = common.tiny_vocab()
    g = build_variant(common.small_hierarchy(), Arch.TET, common.tiny_dims(len(vocab)), seed=4)
    twin = g.nodes[3].params.named()
    for name, t in g.nodes[2].params.named().items():
        t.values = twin[name].values.copy()
    report = embedding_clustering(g, [vocab.encode("AB"), vocab.encode("C A"), vocab.encode("BC")], [-1], pad_margin=2)
    distances = np.array(report.layers[0].distances)
    assert report.layers[0].languages == LANGUAGES
    assert distances[0, 1] < 1e-12
    assert distances[0, 2] > 1e-6 and distances[1, 2] > 1e-6
    assert report.layers[0].ratio is not None and report.layers[0].ratio < 1e-6
