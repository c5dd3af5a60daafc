"""
Parallel corpus handling: cleaning, character vocabulary, tokenization, the train/test split and
randomly padded batches for the non-autoregressive encoder.

A corpus file is JSON lines with one record per example: `{"id": ..., "src": ..., "tgt": {"fr": ..., ...}}`.
Target maps may be partial; an example only needs its source and at least one target.
"""
import hashlib
import logging
import math
import re
import unicodedata
from dataclasses import dataclass
from dataclasses import field
from functools import lru_cache
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple
from typing import Union

import numpy as np
from pytyped.macros.boxed import Boxed

from tetree import codec
from tetree.config import CorpusConfig
from tetree.errors import ContractException
from tetree.errors import DataException
from tetree.errors import LookupException
from tetree.errors import Rejection

logger = logging.getLogger(__name__)

BLANK_TOKEN = "<BLANK>"
PAD_TOKEN = "<PAD>"
BLANK_ID = 0
PAD_ID = 1

_WHITESPACE = re.compile(r"\s+")
_LATIN_RANGE_END = 0x0250
_GENERAL_PUNCTUATION = range(0x2000, 0x2070)

Seed = Union[int, Sequence[int]]


@dataclass
class CorpusRecord:
    id: str
    src: str
    tgt: Dict[str, str]


corpus_record_decoder = codec.decoder_for(CorpusRecord)
corpus_record_encoder = codec.encoder_for(CorpusRecord)


class Vocab:
    """
        Character vocabulary. Id 0 is the CTC blank, id 1 the padding filler; both are reserved and never
        produced by `encode`. A multilingual shared-encoder vocabulary appends one `<2XX>` token per language.
    """

    def __init__(self, tokens: Sequence[str]) -> None:
        if len(tokens) < 2 or tokens[BLANK_ID] != BLANK_TOKEN or tokens[PAD_ID] != PAD_TOKEN:
            raise DataException("Vocabulary must start with the reserved tokens %s and %s." % (BLANK_TOKEN, PAD_TOKEN))
        self.tokens: List[str] = list(tokens)
        self.ids: Dict[str, int] = {}
        for i, token in enumerate(self.tokens):
            if token in self.ids:
                raise DataException("Duplicate vocabulary token %r at line %d." % (token, i))
            self.ids[token] = i
        self.language_tokens: Dict[str, int] = {
            t[2:-1].lower(): i for i, t in enumerate(self.tokens) if _is_language_token(t)
        }
        self._reserved = {BLANK_ID, PAD_ID} | set(self.language_tokens.values())

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for c in text:
            i = self.ids.get(c)
            if i is None or i in self._reserved:
                raise DataException("Character %r is not in the vocabulary." % c)
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i not in self._reserved)

    def language_token(self, language: str) -> int:
        i = self.language_tokens.get(language)
        if i is None:
            raise LookupException("language token", language, sorted(self.language_tokens))
        return i

    def with_language_tokens(self, languages: Sequence[str]) -> "Vocab":
        extra = [language_token_text(l) for l in languages if language_token_text(l) not in self.ids]
        return Vocab(self.tokens + extra)

    def text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        codec.write_text_atomically(path, self.text())

    @staticmethod
    def load(path: str) -> "Vocab":
        with open(path, "r", encoding="utf-8", newline="\n") as f:
            content = f.read()
        if not content.endswith("\n"):
            content += "\n"
        return Vocab(content.split("\n")[:-1])


def language_token_text(language: str) -> str:
    return "<2%s>" % language.upper()


def _is_language_token(token: str) -> bool:
    return len(token) > 4 and token.startswith("<2") and token.endswith(">")


def build_vocab(sentences: Iterable[str]) -> Vocab:
    """
        Characters in order of first appearance after the two reserved tokens.
    """
    tokens = [BLANK_TOKEN, PAD_TOKEN]
    seen = set(tokens)
    for sentence in sentences:
        for c in sentence:
            if c not in seen:
                seen.add(c)
                tokens.append(c)
    return Vocab(tokens)


def _script_of(c: str) -> str:
    name = unicodedata.name(c, "")
    return name.split(" ", 1)[0] if name else ""


def _keeps_symbol(c: str, category: str, allowed: Set[str]) -> bool:
    if category.startswith("N"):
        return "0" <= c <= "9" or _script_of(c) in allowed
    if category[0] in "PS":
        code = ord(c)
        return code < _LATIN_RANGE_END or code in _GENERAL_PUNCTUATION or _script_of(c) in allowed
    return False


def post_process(text: str, config: CorpusConfig) -> Union[Boxed[str], List[Rejection]]:
    """
        Uppercases, rejects sentences containing filtered punctuation when the filter is on, and removes every
        character from scripts outside `config.allowed_scripts`. Letters are kept by script, digits only when
        ASCII or of an allowed script, and punctuation or symbols only from the Latin range or the general
        punctuation block. A combining mark is kept only while its base character is. Whitespace runs collapse
        to one space.
    """
    upper = text.upper()
    if config.punctuation_filter:
        found = sorted({c for c in upper if c in config.filtered_characters})
        if found:
            return [Rejection("contains filtered punctuation %s" % "".join(found))]

    allowed = set(config.allowed_scripts)
    kept: List[str] = []
    base_kept = False
    for c in upper:
        category = unicodedata.category(c)
        if category.startswith("M"):
            if base_kept and (_script_of(c) in allowed or _script_of(c) == "COMBINING"):
                kept.append(c)
            continue
        if category.startswith("L"):
            base_kept = _script_of(c) in allowed
        elif category.startswith("Z") or c.isspace():
            kept.append(" ")
            base_kept = False
            continue
        else:
            base_kept = _keeps_symbol(c, category, allowed)
        if base_kept:
            kept.append(c)
    cleaned = _WHITESPACE.sub(" ", "".join(kept)).strip()
    if not cleaned:
        return [Rejection("empty after cleaning")]
    return Boxed(cleaned)


@dataclass(frozen=True)
class Example:
    id: str
    source: Tuple[int, ...]
    targets: Dict[str, Tuple[int, ...]]


@dataclass
class ParallelCorpus:
    examples: List[Example]
    languages: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.languages:
            self.languages = sorted({l for e in self.examples for l in e.targets})

    def __len__(self) -> int:
        return len(self.examples)

    def ids(self) -> List[str]:
        return [e.id for e in self.examples]


def clean_records(records: Iterable[CorpusRecord], config: CorpusConfig) -> Tuple[List[CorpusRecord], int]:
    """
        Applies `post_process` to every sentence. A rejected source drops the example; a rejected target drops
        only that language. Returns the surviving records and the number of dropped examples.
    """
    kept: List[CorpusRecord] = []
    dropped = 0
    for record in records:
        src = post_process(record.src, config)
        if not isinstance(src, Boxed):
            logger.warning("Dropping example %s: %s", record.id, src[0].reason)
            dropped += 1
            continue
        targets: Dict[str, str] = {}
        for language, text in record.tgt.items():
            tgt = post_process(text, config)
            if isinstance(tgt, Boxed):
                targets[language] = tgt.t
            else:
                logger.warning("Dropping %s target of example %s: %s", language, record.id, tgt[0].reason)
        if not targets:
            dropped += 1
            continue
        kept.append(CorpusRecord(record.id, src.t, targets))
    if dropped:
        logger.warning("Dropped %d of %d examples during cleaning.", dropped, dropped + len(kept))
    return kept, dropped


def read_records(path: str) -> List[CorpusRecord]:
    records = codec.read_jsonl(path, corpus_record_decoder)
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataException("Duplicate example id '%s' in %s." % (r.id, path))
        seen.add(r.id)
    return records


def write_records(path: str, records: Iterable[CorpusRecord]) -> None:
    codec.write_jsonl(path, records, corpus_record_encoder)


def record_sentences(records: Iterable[CorpusRecord]) -> Iterable[str]:
    for r in records:
        yield r.src
        for language in sorted(r.tgt):
            yield r.tgt[language]


def tokenize(records: Iterable[CorpusRecord], vocab: Vocab) -> ParallelCorpus:
    examples = [
        Example(
            r.id,
            tuple(vocab.encode(r.src)),
            {language: tuple(vocab.encode(text)) for language, text in sorted(r.tgt.items())},
        )
        for r in records
    ]
    return ParallelCorpus(examples)


def load_corpus(path: str, config: CorpusConfig, vocab: Optional[Vocab] = None) -> Tuple[ParallelCorpus, Vocab]:
    """
        Reads, cleans and tokenizes a corpus file. Without a vocabulary one is built from the cleaned text.
    """
    records, _ = clean_records(read_records(path), config)
    if vocab is None:
        vocab = build_vocab(record_sentences(records))
    return tokenize(records, vocab), vocab


def corpus_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def split(corpus: ParallelCorpus, ratio: float, seed: int) -> Tuple[ParallelCorpus, ParallelCorpus]:
    """
        Seeded train/test partition. The training side receives floor(n * ratio) examples, clamped so that
        both sides are non-empty. The partition depends only on the example ids and the seed.
    """
    n = len(corpus)
    if n < 2:
        raise ContractException("Cannot split a corpus of %d examples." % n)
    if not 0.0 < ratio < 1.0:
        raise ContractException("Split ratio must lie strictly between 0 and 1 but received %g." % ratio)
    ordered = sorted(corpus.examples, key=lambda e: e.id)
    permutation = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(n * ratio + 1e-9)), 1), n - 1)
    train = [ordered[i] for i in permutation[:n_train]]
    test = [ordered[i] for i in permutation[n_train:]]
    return ParallelCorpus(train, corpus.languages), ParallelCorpus(test, corpus.languages)


def language_complete_subset(corpus: ParallelCorpus, languages: Sequence[str]) -> ParallelCorpus:
    return ParallelCorpus(
        [e for e in corpus.examples if all(l in e.targets for l in languages)], list(languages)
    )


def random_pad(source: Sequence[int], total_len: int, seed: Seed, pad_id: int = PAD_ID) -> List[int]:
    """
        Scatters `source` over `total_len` frames in order: the source occupies a uniformly random sorted set of
        positions and every other frame is `pad_id`.
    """
    return _random_pad(source, total_len, np.random.default_rng(seed), pad_id)


def _random_pad(source: Sequence[int], total_len: int, rng: np.random.Generator, pad_id: int) -> List[int]:
    n = len(source)
    if total_len < n:
        raise ContractException("Cannot pad a source of %d tokens into %d frames." % (n, total_len))
    frames = [pad_id] * total_len
    positions = np.sort(rng.choice(total_len, size=n, replace=False))
    for position, token in zip(positions, source):
        frames[int(position)] = token
    return frames


def required_frames(target: Sequence[int]) -> int:
    """
        Shortest input length over which CTC can emit `target`: one frame per token plus a blank between repeats.
    """
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


@dataclass
class LanguageTargets:
    tokens: np.ndarray  # [B x U] int64, rows padded with PAD_ID beyond their length
    lengths: np.ndarray  # [B] int64
    mask: np.ndarray  # [B] bool, True where the example has this language

    @property
    def present(self) -> int:
        return int(self.mask.sum())


@dataclass
class Batch:
    inputs: np.ndarray  # [B x T_in] int64
    input_lengths: np.ndarray  # [B] source lengths before padding
    targets: Dict[str, LanguageTargets]
    example_ids: List[str] = field(default_factory=list)
    language_inputs: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def frames(self) -> int:
        return int(self.inputs.shape[1])

    def inputs_for(self, language: str) -> np.ndarray:
        if self.language_inputs:
            found = self.language_inputs.get(language)
            if found is None:
                raise LookupException("batch language", language, sorted(self.language_inputs))
            return found
        return self.inputs


def _padded_inputs(
    sources: Sequence[Sequence[int]],
    total_len: int,
    seed: int,
    language_tokens: Optional[Dict[str, int]],
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    rows = [random_pad(s, total_len, [seed, b]) for b, s in enumerate(sources)]
    inputs = np.asarray(rows, dtype=np.int64).reshape(len(sources), total_len)
    language_inputs: Dict[str, np.ndarray] = {}
    for k, (language, token) in enumerate(sorted((language_tokens or {}).items())):
        tagged = [random_pad([token] + list(s), total_len, [seed, b, k + 1]) for b, s in enumerate(sources)]
        language_inputs[language] = np.asarray(tagged, dtype=np.int64).reshape(len(sources), total_len)
    return inputs, language_inputs


def make_batch(
    examples: Sequence[Example],
    languages: Sequence[str],
    seed: int,
    pad_margin: int = 50,
    language_tokens: Optional[Dict[str, int]] = None,
) -> Batch:
    """
        Builds a randomly padded batch. Every row has T_in frames where T_in is the longest present target plus
        `pad_margin`, widened to fit the longest source (plus its language token when `language_tokens` is
        given) and every target's CTC minimum.

        :param language_tokens: Language-token ids for a shared multilingual encoder. When set, the batch also
            carries one input matrix per language with that language's token prepended before padding.
    """
    if not examples:
        raise ContractException("Cannot build an empty batch.")
    for e in examples:
        if not any(l in e.targets for l in languages):
            raise ContractException("Example %s has none of the requested languages %s." % (e.id, list(languages)))

    longest_target = 0
    minimum = 0
    for e in examples:
        for l in languages:
            t = e.targets.get(l)
            if t is not None:
                longest_target = max(longest_target, len(t))
                minimum = max(minimum, required_frames(t))
    offset = 1 if language_tokens else 0
    longest_source = max(len(e.source) for e in examples) + offset
    total_len = max(longest_target + pad_margin, longest_source, minimum)

    inputs, language_inputs = _padded_inputs([e.source for e in examples], total_len, seed, language_tokens)

    targets: Dict[str, LanguageTargets] = {}
    for l in languages:
        width = max([len(e.targets[l]) for e in examples if l in e.targets], default=0)
        tokens = np.full((len(examples), width), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(examples), dtype=np.int64)
        mask = np.zeros(len(examples), dtype=bool)
        for b, e in enumerate(examples):
            t = e.targets.get(l)
            if t is not None:
                tokens[b, : len(t)] = t
                lengths[b] = len(t)
                mask[b] = True
        targets[l] = LanguageTargets(tokens, lengths, mask)

    return Batch(
        inputs=inputs,
        input_lengths=np.asarray([len(e.source) for e in examples], dtype=np.int64),
        targets=targets,
        example_ids=[e.id for e in examples],
        language_inputs=language_inputs,
    )


def make_source_batch(
    sources: Sequence[Sequence[int]],
    seed: int,
    pad_margin: int = 50,
    language_tokens: Optional[Dict[str, int]] = None,
) -> Batch:
    """
        Inference-time batch without targets: T_in is the longest source plus `pad_margin`.
    """
    if not sources:
        raise ContractException("Cannot build an empty batch.")
    offset = 1 if language_tokens else 0
    total_len = max(len(s) for s in sources) + offset + pad_margin
    inputs, language_inputs = _padded_inputs(sources, total_len, seed, language_tokens)
    return Batch(
        inputs=inputs,
        input_lengths=np.asarray([len(s) for s in sources], dtype=np.int64),
        targets={},
        language_inputs=language_inputs,
    )


class BatchSampler:
    """
        Deterministic batch stream: the batch drawn at step k depends only on (seed, k), so a run resumed from a
        checkpoint at step k sees exactly the batches an uninterrupted run would.
    """

    def __init__(
        self,
        corpus: ParallelCorpus,
        languages: Sequence[str],
        batch_size: int,
        seed: int,
        pad_margin: int = 50,
        language_tokens: Optional[Dict[str, int]] = None,
    ) -> None:
        self.examples = [e for e in corpus.examples if any(l in e.targets for l in languages)]
        if not self.examples:
            raise DataException("No training example has any of the languages %s." % list(languages))
        self.languages = list(languages)
        self.batch_size = batch_size
        self.seed = seed
        self.pad_margin = pad_margin
        self.language_tokens = language_tokens
        self._permutation = lru_cache(maxsize=4)(self._epoch_permutation)

    def _epoch_permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.examples))

    def batch(self, step: int) -> Batch:
        n = len(self.examples)
        chosen: List[Example] = []
        for g in range(step * self.batch_size, (step + 1) * self.batch_size):
            chosen.append(self.examples[int(self._permutation(g // n)[g % n])])
        padding_seed = int(np.random.SeedSequence([self.seed, step]).generate_state(1)[0])
        return make_batch(chosen, self.languages, padding_seed, self.pad_margin, self.language_tokens)


def iterate_batches(
    corpus: ParallelCorpus,
    languages: Sequence[str],
    batch_size: int,
    seed: int,
    pad_margin: int = 50,
    language_tokens: Optional[Dict[str, int]] = None,
) -> Iterable[Batch]:
    """
        Sequential, unshuffled batches over the whole corpus, used for evaluation.
    """
    for start in range(0, len(corpus), batch_size):
        chunk = [e for e in corpus.examples[start : start + batch_size] if any(l in e.targets for l in languages)]
        if chunk:
            yield make_batch(chunk, languages, seed + start, pad_margin, language_tokens)
