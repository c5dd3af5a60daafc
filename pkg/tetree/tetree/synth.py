"""
Seeded synthetic corpora with a known family structure.

Each family owns a random bijection over the alphabet; each member language copies its family's bijection and
then re-maps a (1 - overlap) share of the symbols among themselves. A target sentence is the source with every
symbol translated by the language's mapping, so languages of one family are close by construction.
"""
import logging
from dataclasses import dataclass
from typing import Dict
from typing import List
from typing import Tuple

import numpy as np

from tetree.config import SynthConfig
from tetree.corpus import CorpusRecord
from tetree.errors import ContractException
from tetree.langtree import HierarchyNode

logger = logging.getLogger(__name__)

FAMILY_POOLS: List[Tuple[str, List[str]]] = [
    ("germanic", ["da", "sv", "nl", "de"]),
    ("romance", ["fr", "it", "pt", "ro"]),
    ("slavic", ["pl", "ru", "cs", "uk"]),
    ("celtic", ["ga", "cy", "gd", "br"]),
]


@dataclass
class SyntheticLanguage:
    code: str
    family: str
    mapping: Dict[str, str]


@dataclass
class SyntheticCorpus:
    records: List[CorpusRecord]
    hierarchy: HierarchyNode
    languages: List[SyntheticLanguage]
    family_mappings: Dict[str, Dict[str, str]]


def family_name(index: int) -> str:
    return FAMILY_POOLS[index][0] if index < len(FAMILY_POOLS) else "family%d" % index


def language_code(family_index: int, member_index: int) -> str:
    if family_index < len(FAMILY_POOLS):
        pool = FAMILY_POOLS[family_index][1]
        if member_index < len(pool):
            return pool[member_index]
        return "%s%d" % (pool[0], member_index)
    return "f%dl%d" % (family_index, member_index)


def perturbed_symbols(alphabet_size: int, overlap: float) -> int:
    """
        Symbols re-mapped per member language. Any overlap below 1 moves at least two symbols, the fewest a
        bijection can change.
    """
    count = int(round((1.0 - overlap) * alphabet_size))
    if overlap < 1.0:
        count = max(2, count)
    return min(count, alphabet_size)


def perturb_mapping(base: Dict[str, str], count: int, rng: np.random.Generator) -> Dict[str, str]:
    """
        Re-maps `count` randomly chosen symbols by rotating their images, so each of them changes while the
        mapping stays a bijection. A single symbol cannot move without breaking the bijection, so `count` below 2
        leaves the mapping unchanged.
    """
    mapping = dict(base)
    if count < 2:
        return mapping
    symbols = sorted(base)
    chosen = [symbols[int(i)] for i in rng.choice(len(symbols), size=count, replace=False)]
    images = [base[s] for s in chosen]
    for s, image in zip(chosen, images[1:] + images[:1]):
        mapping[s] = image
    return mapping


def _random_sentence(config: SynthConfig, rng: np.random.Generator) -> str:
    words = []
    for _ in range(int(rng.integers(config.min_words, config.max_words + 1))):
        length = int(rng.integers(1, config.max_word_length + 1))
        words.append("".join(config.alphabet[int(i)] for i in rng.integers(0, len(config.alphabet), size=length)))
    return " ".join(words)


def _translate(sentence: str, mapping: Dict[str, str]) -> str:
    return "".join(mapping.get(c, c) for c in sentence)


def _choose_targets(
    languages: List[str], resources: Dict[str, float], rng: np.random.Generator
) -> List[str]:
    chosen = [l for l in languages if rng.random() < resources.get(l, 1.0)]
    if not chosen:
        chosen = [max(languages, key=lambda l: (resources.get(l, 1.0), -languages.index(l)))]
    return chosen


def generate_family_corpus(config: SynthConfig) -> SyntheticCorpus:
    config.validate()
    if config.families <= 0 or config.leaves_per_family <= 0:
        raise ContractException("Need at least one family with at least one language.")
    if len(set(config.alphabet)) != len(config.alphabet) or " " in config.alphabet:
        raise ContractException("The synthetic alphabet must consist of distinct non-space symbols.")

    rng = np.random.default_rng(config.seed)
    symbols = list(config.alphabet)
    count = perturbed_symbols(len(symbols), config.overlap)

    family_mappings: Dict[str, Dict[str, str]] = {}
    languages: List[SyntheticLanguage] = []
    family_nodes: List[HierarchyNode] = []
    for f in range(config.families):
        name = family_name(f)
        images = [symbols[int(i)] for i in rng.permutation(len(symbols))]
        base = dict(zip(symbols, images))
        family_mappings[name] = base
        leaves: List[HierarchyNode] = []
        for m in range(config.leaves_per_family):
            code = language_code(f, m)
            languages.append(SyntheticLanguage(code, name, perturb_mapping(base, count, rng)))
            leaves.append(HierarchyNode(name=code, layers=config.leaf_layers, language=code))
        family_nodes.append(HierarchyNode(name=name, layers=config.family_layers, children=leaves))

    unknown = sorted(set(config.resources) - {l.code for l in languages})
    if unknown:
        logger.warning("Ignoring resource fractions for unknown languages %s.", unknown)

    hierarchy = HierarchyNode(name="root", layers=config.root_layers, children=family_nodes)
    records = _generate_records(config, rng, {l.code: l.mapping for l in languages})
    logger.info(
        "Generated %d synthetic examples over %d families and %d languages.",
        len(records), config.families, len(languages),
    )
    return SyntheticCorpus(records, hierarchy, languages, family_mappings)


def generate_copy_corpus(config: SynthConfig) -> SyntheticCorpus:
    """
        Every language copies the source verbatim. The hierarchy is a root with one child per language.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    identity = {s: s for s in config.alphabet}
    codes = [language_code(f, m) for f in range(config.families) for m in range(config.leaves_per_family)]
    languages = [SyntheticLanguage(code, "copy", identity) for code in codes]
    hierarchy = HierarchyNode(
        name="root",
        layers=config.root_layers,
        children=[HierarchyNode(name=c, layers=config.leaf_layers, language=c) for c in codes],
    )
    records = _generate_records(config, rng, {c: identity for c in codes})
    return SyntheticCorpus(records, hierarchy, languages, {"copy": identity})


def _generate_records(
    config: SynthConfig, rng: np.random.Generator, mappings: Dict[str, Dict[str, str]]
) -> List[CorpusRecord]:
    codes = list(mappings)
    width = len(str(max(config.examples - 1, 0)))
    records: List[CorpusRecord] = []
    for i in range(config.examples):
        source = _random_sentence(config, rng)
        targets = {l: _translate(source, mappings[l]) for l in _choose_targets(codes, config.resources, rng)}
        records.append(CorpusRecord(id="s%0*d" % (width, i), src=source, tgt=targets))
    return records


def mapping_agreement(a: Dict[str, str], b: Dict[str, str]) -> float:
    return sum(1 for s in a if a[s] == b.get(s)) / max(1, len(a))
