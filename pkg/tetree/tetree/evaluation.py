"""
Scoring and diagnostics: word error rate, per-language evaluation, inference benchmarks, embedding clustering
and cross-variant comparison tables.
"""
import csv
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from tetree.config import Arch
from tetree.corpus import BLANK_ID
from tetree.corpus import PAD_ID
from tetree.corpus import Batch
from tetree.corpus import ParallelCorpus
from tetree.corpus import Vocab
from tetree.corpus import iterate_batches
from tetree.corpus import make_batch
from tetree.corpus import make_source_batch
from tetree.ctc import decode_rows
from tetree.encoder import count_layer_invocations
from tetree.encoder import forward_all
from tetree.encoder import forward_path
from tetree.encoder import hidden_states
from tetree.errors import ContractException
from tetree.langtree import CountMode
from tetree.langtree import ModelGraph
from tetree.langtree import language_families
from tetree.langtree import layer_count

logger = logging.getLogger(__name__)


def word_errors(reference: str, hypothesis: str) -> Tuple[int, int]:
    """
        Word-level Levenshtein distance with unit costs, and the reference word count.
    """
    ref = reference.split()
    hyp = hypothesis.split()
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i]
        for j, h in enumerate(hyp, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h)))
        previous = current
    return previous[-1], len(ref)


def wer(reference: str, hypothesis: str) -> float:
    """
        Edit distance over words divided by the reference word count. An empty reference counts as one word,
        so an empty pair scores 0 and an empty reference against k hypothesis words scores k.
    """
    errors, words = word_errors(reference, hypothesis)
    return errors / max(1, words)


@dataclass
class DecodeSample:
    id: str
    reference: str
    hypothesis: str


@dataclass
class LanguageEval:
    wer: float  # percent
    errors: int
    words: int
    examples: int
    samples: List[DecodeSample] = field(default_factory=list)


@dataclass
class EvalReport:
    languages: Dict[str, LanguageEval]

    @property
    def average_wer(self) -> float:
        if not self.languages:
            return float("nan")
        return float(np.mean([e.wer for e in self.languages.values()]))

    def wer_row(self) -> Dict[str, float]:
        return {l: e.wer for l, e in self.languages.items()}


@dataclass
class _Tally:
    errors: int = 0
    words: int = 0
    examples: int = 0
    samples: List[DecodeSample] = field(default_factory=list)

    def to_eval(self) -> LanguageEval:
        return LanguageEval(100.0 * self.errors / max(1, self.words), self.errors, self.words, self.examples, self.samples)


def model_vocab(g: ModelGraph, vocab: Vocab) -> Vocab:
    """
        The vocabulary the graph's heads predict over: `vocab` plus language tokens for a shared encoder.
    """
    extended = vocab.with_language_tokens(g.languages) if g.arch == Arch.TENC_ALL else vocab
    expected = g.heads[next(iter(g.heads))].bias.shape[0]
    if len(extended) != expected:
        raise ContractException("Vocabulary of %d tokens does not match the model's %d outputs." % (len(extended), expected))
    return extended


def tally_logits(
    logits: Dict[str, np.ndarray],
    batch: Batch,
    vocab: Vocab,
    tallies: Dict[str, _Tally],
    decode_samples: int = 0,
) -> None:
    """
        Greedy-decodes each language's [B x T x V] logits and accumulates word errors against the batch targets.
    """
    for language, values in logits.items():
        targets = batch.targets.get(language)
        if targets is None:
            continue
        tally = tallies.setdefault(language, _Tally())
        for b, ids in enumerate(decode_rows(values, BLANK_ID)):
            if not targets.mask[b]:
                continue
            reference = vocab.decode(targets.tokens[b, : targets.lengths[b]].tolist())
            hypothesis = vocab.decode(ids)
            errors, words = word_errors(reference, hypothesis)
            tally.errors += errors
            tally.words += words if words or not errors else 1
            tally.examples += 1
            if len(tally.samples) < decode_samples:
                example_id = batch.example_ids[b] if b < len(batch.example_ids) else str(b)
                tally.samples.append(DecodeSample(example_id, reference, hypothesis))


def evaluate(
    g: ModelGraph,
    testset: ParallelCorpus,
    vocab: Vocab,
    languages: Optional[Sequence[str]] = None,
    batch_size: int = 32,
    seed: int = 0,
    pad_margin: int = 50,
    decode_samples: int = 3,
) -> EvalReport:
    """
        WER (%) per language over the test examples that carry it. Languages the test set lacks are skipped
        with a warning.
    """
    requested = list(languages) if languages is not None else g.languages
    available = {l for e in testset.examples for l in e.targets}
    missing = [l for l in requested if l not in available]
    if missing:
        logger.warning("Languages %s have no test examples and are excluded from evaluation.", missing)
    evaluated = [l for l in requested if l in available and l in g.leaves]

    decode_vocab = model_vocab(g, vocab)
    tallies: Dict[str, _Tally] = {}
    for batch in iterate_batches(testset, evaluated, batch_size, seed, pad_margin, g.language_tokens or None):
        logits = forward_all(g, batch)
        tally_logits(
            {l: logits[l].values for l in evaluated}, batch, decode_vocab, tallies, decode_samples
        )
    return EvalReport({l: tallies[l].to_eval() for l in evaluated if l in tallies})


def translate(
    g: ModelGraph, sources: Sequence[Sequence[int]], vocab: Vocab, seed: int = 0, pad_margin: int = 50
) -> Dict[str, List[str]]:
    """
        Decodes every source into every language of the graph with one `forward_all` per batch.
    """
    if not sources:
        return {l: [] for l in g.languages}
    decode_vocab = model_vocab(g, vocab)
    batch = make_source_batch(sources, seed, pad_margin, g.language_tokens or None)
    logits = forward_all(g, batch)
    return {l: [decode_vocab.decode(ids) for ids in decode_rows(logits[l].values)] for l in g.languages}


@dataclass
class LayerCounts:
    shared: int
    per_language_sum: int


@dataclass
class BenchReport:
    arch: Arch
    batch_size: int
    repetitions: int
    threads: int
    layers_executed: LayerCounts
    layers_predicted: LayerCounts
    theoretical_ratio: float
    forward_all_ms: float
    per_language_ms: float
    forward_all_ms_per_sentence: float
    per_language_ms_per_sentence: float
    speedup: float
    sentences_per_second: float
    blas_threads: int = 1


def _median_ms(run: Callable[[], object], repetitions: int) -> float:
    timings = []
    for _ in range(repetitions):
        started = time.perf_counter()
        run()
        timings.append((time.perf_counter() - started) * 1000.0)
    return float(statistics.median(timings))


def bench_batch(g: ModelGraph, testset: ParallelCorpus, batch_size: int, seed: int = 0, pad_margin: int = 50) -> Batch:
    """
        The first `batch_size` test examples, cycling when the set is smaller.
    """
    if len(testset) == 0:
        raise ContractException("Cannot benchmark on an empty test set.")
    chosen = [testset.examples[i % len(testset)] for i in range(batch_size)]
    languages = sorted({l for e in chosen for l in e.targets})
    return make_batch(chosen, languages, seed, pad_margin, g.language_tokens or None)


def bench(
    g: ModelGraph,
    testset: ParallelCorpus,
    repetitions: int = 5,
    threads: int = 1,
    batch_size: int = 32,
    warmup: int = 1,
    seed: int = 0,
    pad_margin: int = 50,
    blas_threads: int = 1,
) -> BenchReport:
    """
        Median wall-clock of one `forward_all` against `forward_path` for every language on the same batch.
        Executed layer counts are instrumented and must equal the predicted counts.

        Both sides are scheduled alike: with `threads` > 1 the sibling nodes of `forward_all` and the languages
        of the per-language side each run on a pool of that many workers. BLAS libraries are pinned to
        `blas_threads` for the whole measurement.
    """
    if repetitions < 3:
        raise ContractException("bench needs at least 3 repetitions but received %d." % repetitions)
    if threads < 1 or blas_threads < 1:
        raise ContractException("bench needs at least one thread but received %d and %d." % (threads, blas_threads))
    batch = bench_batch(g, testset, batch_size, seed, pad_margin)

    def run_all() -> object:
        return forward_all(g, batch, threads)

    def run_each() -> object:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(lambda l: forward_path(g, l, batch), g.languages))
        return [forward_path(g, l, batch) for l in g.languages]

    with threadpool_limits(limits=blas_threads):
        for _ in range(warmup):
            run_all()
            run_each()

        with count_layer_invocations() as all_counter:
            run_all()
        with count_layer_invocations() as each_counter:
            run_each()

        all_ms = _median_ms(run_all, repetitions)
        each_ms = _median_ms(run_each, repetitions)
    predicted = LayerCounts(
        layer_count(g, CountMode.MULTI_TARGET_SHARED), layer_count(g, CountMode.PER_LANGUAGE_SUM)
    )
    executed = LayerCounts(all_counter.count, each_counter.count)
    if executed != predicted:
        raise ContractException(
            "Instrumented layer counts %s differ from the predicted %s." % (str(executed), str(predicted))
        )

    size = batch.size
    return BenchReport(
        arch=g.arch,
        batch_size=size,
        repetitions=repetitions,
        threads=threads,
        layers_executed=executed,
        layers_predicted=predicted,
        theoretical_ratio=predicted.per_language_sum / predicted.shared,
        forward_all_ms=all_ms,
        per_language_ms=each_ms,
        forward_all_ms_per_sentence=all_ms / size,
        per_language_ms_per_sentence=each_ms / size,
        speedup=each_ms / all_ms if all_ms > 0 else float("nan"),
        sentences_per_second=1000.0 * size / all_ms if all_ms > 0 else float("nan"),
        blas_threads=blas_threads,
    )


@dataclass
class LayerDistances:
    layer: int
    languages: List[str]
    distances: List[List[float]]
    ratio: Optional[float] = None


@dataclass
class ClusteringReport:
    arch: Arch
    sentences: int
    families: Dict[str, str]
    layers: List[LayerDistances]


def cosine_distances(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.where(norms > 0, norms, 1.0)
    distances = 1.0 - unit @ unit.T
    distances = (distances + distances.T) / 2.0
    np.fill_diagonal(distances, 0.0)
    return distances


def family_ratio(distances: np.ndarray, languages: Sequence[str], families: Dict[str, str]) -> Optional[float]:
    """
        Mean within-family distance over mean cross-family distance; None without both kinds of pairs.
    """
    within: List[float] = []
    cross: List[float] = []
    for i in range(len(languages)):
        for j in range(i + 1, len(languages)):
            same = families.get(languages[i]) == families.get(languages[j])
            (within if same else cross).append(float(distances[i, j]))
    if len(set(families.get(l) for l in languages)) < 2 or not within or not cross:
        return None
    cross_mean = float(np.mean(cross))
    return float(np.mean(within)) / cross_mean if cross_mean > 0 else None


def embedding_clustering(
    g: ModelGraph,
    sentences: Sequence[Sequence[int]],
    layer_indices: Sequence[int],
    languages: Optional[Sequence[str]] = None,
    seed: int = 0,
    pad_margin: int = 50,
) -> ClusteringReport:
    """
        Mean-pools each language's hidden states over the non-padding frames of all sentences, per requested
        layer (negative indices count from the end of the path), and compares languages by cosine distance.
    """
    if not sentences:
        raise ContractException("embedding_clustering needs at least one sentence.")
    chosen = list(languages) if languages is not None else g.languages
    batch = make_source_batch(sentences, seed, pad_margin, g.language_tokens or None)
    pooled: Dict[str, List[np.ndarray]] = {}
    for language in chosen:
        frames = batch.inputs_for(language) != PAD_ID
        states = hidden_states(g, batch, language)
        vectors = []
        for index in layer_indices:
            if not -len(states) <= index < len(states):
                raise ContractException("Layer %d is outside a path of %d layers." % (index, len(states)))
            h = states[index]
            vectors.append((h * frames[:, :, None]).sum(axis=(0, 1)) / max(1, int(frames.sum())))
        pooled[language] = vectors

    families = language_families(g.hierarchy)
    layers: List[LayerDistances] = []
    for k, index in enumerate(layer_indices):
        distances = cosine_distances(np.stack([pooled[l][k] for l in chosen]))
        layers.append(LayerDistances(index, chosen, distances.tolist(), family_ratio(distances, chosen, families)))
    return ClusteringReport(g.arch, len(sentences), {l: families.get(l, "") for l in chosen}, layers)


def write_distance_csv(path: str, distances: LayerDistances) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["language"] + distances.languages)
        for language, row in zip(distances.languages, distances.distances):
            writer.writerow([language] + ["%.12g" % d for d in row])


@dataclass
class VariantSummary:
    wer: Dict[str, float]
    average: float
    average_std: float
    seeds: int
    parameters: int


@dataclass
class ComparisonReport:
    variants: Dict[str, VariantSummary]
    reference: str
    reductions: Dict[str, float]
    low_resource: Optional[str] = None
    low_resource_wins: Dict[str, int] = field(default_factory=dict)


def relative_reduction(baseline: float, candidate: float) -> float:
    return 100.0 * (baseline - candidate) / baseline if baseline > 0 else float("nan")


def compare(
    reports: Dict[str, List[EvalReport]],
    parameters: Dict[str, int],
    reference: str = Arch.TET.value,
    low_resource: Optional[str] = None,
) -> ComparisonReport:
    """
        Averages each variant's per-language WER over its seeds and reports how much lower the reference
        variant's average is than every other variant's, in percent of the other's average.
    """
    if reference not in reports:
        raise ContractException("Reference variant %s has no reports." % reference)
    tet, rnd = parameters.get(Arch.TET.value), parameters.get(Arch.TET_RND.value)
    if tet is not None and rnd is not None and tet != rnd:
        raise ContractException("%s has %d parameters but %s has %d; they must be equal." % (
            Arch.TET_RND.value, rnd, Arch.TET.value, tet))
    variants: Dict[str, VariantSummary] = {}
    for variant, runs in reports.items():
        if not runs:
            raise ContractException("Variant %s has no reports." % variant)
        languages = sorted({l for r in runs for l in r.languages})
        means = {l: float(np.mean([r.languages[l].wer for r in runs if l in r.languages])) for l in languages}
        averages = [r.average_wer for r in runs]
        variants[variant] = VariantSummary(
            wer=means,
            average=float(np.mean(list(means.values()))),
            average_std=float(np.std(averages)),
            seeds=len(runs),
            parameters=parameters.get(variant, 0),
        )

    base = variants[reference].average
    reductions = {v: relative_reduction(s.average, base) for v, s in variants.items() if v != reference}
    wins: Dict[str, int] = {}
    if low_resource is not None:
        for variant, runs in reports.items():
            if variant == reference:
                continue
            wins[variant] = sum(
                1
                for mine, theirs in zip(reports[reference], runs)
                if low_resource in mine.languages and low_resource in theirs.languages
                and mine.languages[low_resource].wer < theirs.languages[low_resource].wer
            )
    return ComparisonReport(variants, reference, reductions, low_resource, wins)


def render_table(rows: Dict[str, Dict[str, float]], languages: Optional[Sequence[str]] = None, title: str = "") -> str:
    """
        Aligned text table with one column per language and a macro-average column recomputed per row.
    """
    columns = list(languages) if languages is not None else sorted({l for r in rows.values() for l in r})
    header = ["Model"] + [l.capitalize() for l in columns] + ["Avg."]
    body: List[List[str]] = []
    for name, values in rows.items():
        present = [values[l] for l in columns if l in values]
        cells = ["%.1f" % values[l] if l in values else "--" for l in columns]
        average = "%.1f" % float(np.mean(present)) if present else "--"
        body.append([name] + cells + [average])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells: List[str]) -> str:
        return " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    out = [title] if title else []
    out.append(line(header))
    out.append("-+-".join("-" * w for w in widths))
    out.extend(line(r) for r in body)
    return "\n".join(out) + "\n"
