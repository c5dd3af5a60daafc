"""
Language-family hierarchies and their compilation into encoder-layer graphs.

A hierarchy node with `layers = k` becomes a chain of k graph nodes, each holding one encoder layer. The TET
graph is the compiled hierarchy itself; the baselines reuse its path depths:

    TET_RND    same topology, leaf languages permuted by a seeded bijection
    TENC_LANG  one independent chain per language, as deep as that language's TET path
    TENC_ALL   one chain as deep as the deepest TET path, shared by all languages through <2XX> input tokens
"""
import logging
import os
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from enum import Enum
from typing import Dict
from typing import List
from typing import Optional
from typing import Set

import numpy as np
from pytyped.json.decoder import JsDecodeException
from pytyped.json.decoder import JsonDecoder
from pytyped.json.decoder import JsonIntegerDecoder
from pytyped.json.decoder import JsonListDecoder
from pytyped.json.decoder import JsonObjectDecoder
from pytyped.json.decoder import JsonOptionalDecoder
from pytyped.json.decoder import json_string_decoder
from pytyped.json.encoder import JsonBasicEncoder
from pytyped.json.encoder import JsonEncoder
from pytyped.json.encoder import JsonListEncoder
from pytyped.json.encoder import JsonObjectEncoder
from pytyped.json.encoder import JsonOptionalEncoder
from pytyped.macros.boxed import Boxed
from pytyped.macros.extractor import WithDefault

from tetree import codec
from tetree.autodiff import Tensor
from tetree.config import Arch
from tetree.config import ModelDims
from tetree.errors import ContractException
from tetree.errors import DataException
from tetree.errors import LookupException

logger = logging.getLogger(__name__)

RESOURCES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources")
DEFAULT_HIERARCHIES = {
    "indo-european": "indo_european.json",
    "tatoeba": "tatoeba.json",
}


@dataclass
class HierarchyNode:
    name: str
    layers: int = 1
    children: List["HierarchyNode"] = field(default_factory=list)
    language: Optional[str] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


def _hierarchy_decoder() -> JsonDecoder[HierarchyNode]:
    node: JsonObjectDecoder[HierarchyNode] = JsonObjectDecoder(
        field_decoders={}, field_defaults={}, constructor=lambda args: HierarchyNode(**args)
    )
    node.add_field("name", WithDefault(json_string_decoder, Boxed("")))
    node.add_field("layers", WithDefault(JsonIntegerDecoder(), Boxed(1)))
    node.add_field("children", WithDefault(JsonListDecoder(node), list))
    node.add_field("language", WithDefault(JsonOptionalDecoder(json_string_decoder), None))
    return node


def _hierarchy_encoder() -> JsonEncoder[HierarchyNode]:
    basic = JsonBasicEncoder()
    node: JsonObjectEncoder[HierarchyNode] = JsonObjectEncoder(field_encoders={})
    node.add_field("name", basic)
    node.add_field("layers", basic)
    node.add_field("children", JsonListEncoder(node))
    node.add_field("language", JsonOptionalEncoder(basic))
    return node


hierarchy_decoder = _hierarchy_decoder()
hierarchy_encoder = _hierarchy_encoder()


def _named(node: HierarchyNode) -> HierarchyNode:
    children = [_named(c) for c in node.children]
    return replace(node, name=node.name or node.language or "", children=children)


def leaves(h: HierarchyNode) -> List[HierarchyNode]:
    if h.is_leaf:
        return [h]
    return [leaf for c in h.children for leaf in leaves(c)]


def languages_of(h: HierarchyNode) -> List[str]:
    return [leaf.language for leaf in leaves(h) if leaf.language is not None]


def validate_hierarchy(h: HierarchyNode) -> None:
    seen: Set[str] = set()

    def visit(node: HierarchyNode) -> None:
        if node.layers < 1:
            raise ContractException("Node '%s' must have at least one layer but declares %d." % (node.name, node.layers))
        if node.is_leaf:
            if not node.language:
                raise ContractException("Leaf node '%s' carries no language code." % node.name)
            if node.language in seen:
                raise ContractException("Duplicate language code '%s' in the hierarchy." % node.language)
            seen.add(node.language)
        elif node.language is not None:
            raise ContractException("Internal node '%s' must not carry a language code." % node.name)
        for c in node.children:
            visit(c)

    visit(h)


def depths(h: HierarchyNode) -> Dict[str, int]:
    """
        Root-to-leaf layer sums per language.
    """
    result: Dict[str, int] = {}

    def visit(node: HierarchyNode, above: int) -> None:
        total = above + node.layers
        if node.language is not None:
            result[node.language] = total
        for c in node.children:
            visit(c, total)

    visit(h, 0)
    return result


def language_families(h: HierarchyNode) -> Dict[str, str]:
    """
        Each language's top-level group: the name of the root child whose subtree contains it.
    """
    if h.is_leaf:
        return {h.language: h.name} if h.language else {}
    return {language: child.name for child in h.children for language in languages_of(child)}


def parse_hierarchy(plain: object) -> HierarchyNode:
    h = _named(hierarchy_decoder.read(plain))  # type: ignore
    validate_hierarchy(h)
    return h


def load_hierarchy(path: str) -> HierarchyNode:
    """
        Reads a hierarchy file. The hierarchy is configuration, so unreadable JSON raises `ContractException`.
    """
    try:
        h = _named(codec.read_json(path, hierarchy_decoder))
    except (DataException, JsDecodeException) as e:
        raise ContractException("Invalid hierarchy file %s: %s" % (path, str(e)))
    validate_hierarchy(h)
    return h


def save_hierarchy(path: str, h: HierarchyNode) -> None:
    codec.write_json(path, h, hierarchy_encoder)


def default_hierarchy(name: str = "indo-european") -> HierarchyNode:
    file_name = DEFAULT_HIERARCHIES.get(name)
    if file_name is None:
        raise LookupException("default hierarchy", name, sorted(DEFAULT_HIERARCHIES))
    return load_hierarchy(os.path.join(RESOURCES, file_name))


def resolve_hierarchy(name_or_path: str) -> HierarchyNode:
    """
        Accepts either a path to a hierarchy file or the name of a shipped default.
    """
    if name_or_path in DEFAULT_HIERARCHIES and not os.path.exists(name_or_path):
        return default_hierarchy(name_or_path)
    return load_hierarchy(name_or_path)


class CountMode(Enum):
    MULTI_TARGET_SHARED = "multi_target_shared"
    PER_LANGUAGE_SUM = "per_language_sum"


LAYER_PARAMETERS = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "w1", "b1", "w2", "b2",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
]


@dataclass
class EncoderLayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self) -> Dict[str, Tensor]:
        return {n: getattr(self, n) for n in LAYER_PARAMETERS}


@dataclass
class LeafHead:
    weight: Tensor  # [d_model x |V|]
    bias: Tensor  # [|V|]


@dataclass
class GraphNode:
    id: int
    parent: Optional[int]
    label: str
    params: EncoderLayerParams


@dataclass
class ModelGraph:
    arch: Arch
    dims: ModelDims
    hierarchy: HierarchyNode
    seed: int
    nodes: Dict[int, GraphNode]  # insertion order is parent-first
    leaves: Dict[str, int]  # language -> leaf node id
    heads: Dict[str, LeafHead]
    head_of: Dict[str, str]  # language -> key into heads
    embedding: Tensor
    positions: Optional[Tensor] = None
    language_tokens: Dict[str, int] = field(default_factory=dict)
    leaf_assignment: Dict[str, str] = field(default_factory=dict)

    @property
    def languages(self) -> List[str]:
        return list(self.leaves)

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def children(self, node_id: Optional[int]) -> List[int]:
        return [n.id for n in self.nodes.values() if n.parent == node_id]

    def head_for(self, language: str) -> LeafHead:
        self._check(language)
        return self.heads[self.head_of[language]]

    def _check(self, language: str) -> None:
        if language not in self.leaves:
            raise LookupException("language", language, self.languages)

    def parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {"embed.table": self.embedding}
        if self.positions is not None:
            named["pos.table"] = self.positions
        for node in self.nodes.values():
            for n, t in node.params.named().items():
                named["node%d.%s" % (node.id, n)] = t
        for key, head in self.heads.items():
            named["head.%s.w" % key] = head.weight
            named["head.%s.b" % key] = head.bias
        return named

    def path_parameters(self, language: str) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {"embed.table": self.embedding}
        if self.positions is not None:
            named["pos.table"] = self.positions
        for node_id in path_for(self, language):
            for n, t in self.nodes[node_id].params.named().items():
                named["node%d.%s" % (node_id, n)] = t
        key = self.head_of[language]
        named["head.%s.w" % key] = self.heads[key].weight
        named["head.%s.b" % key] = self.heads[key].bias
        return named


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype: np.dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_layer(dims: ModelDims, seed: int, node_id: int, dtype: np.dtype) -> EncoderLayerParams:
    rng = np.random.default_rng([seed, node_id])
    d, f = dims.d_model, dims.d_ff

    def proj(fan_in: int, fan_out: int, name: str) -> Tensor:
        return Tensor(_xavier(rng, fan_in, fan_out, dtype), requires_grad=True, name=name)

    def const(size: int, value: float, name: str) -> Tensor:
        return Tensor(np.full(size, value, dtype=dtype), requires_grad=True, name=name)

    return EncoderLayerParams(
        wq=proj(d, d, "wq"), bq=const(d, 0.0, "bq"),
        wk=proj(d, d, "wk"), bk=const(d, 0.0, "bk"),
        wv=proj(d, d, "wv"), bv=const(d, 0.0, "bv"),
        wo=proj(d, d, "wo"), bo=const(d, 0.0, "bo"),
        w1=proj(d, f, "w1"), b1=const(f, 0.0, "b1"),
        w2=proj(f, d, "w2"), b2=const(d, 0.0, "b2"),
        ln1_g=const(d, 1.0, "ln1_g"), ln1_b=const(d, 0.0, "ln1_b"),
        ln2_g=const(d, 1.0, "ln2_g"), ln2_b=const(d, 0.0, "ln2_b"),
    )


# Seed-stream offsets keep node, embedding and head initializations independent.
_EMBED_STREAM = 1_000_000
_POSITION_STREAM = 1_000_001
_HEAD_STREAM = 2_000_000
_PERMUTATION_STREAM = 3_000_000


def _init_head(dims: ModelDims, vocab_size: int, seed: int, index: int, dtype: np.dtype) -> LeafHead:
    rng = np.random.default_rng([seed, _HEAD_STREAM + index])
    return LeafHead(
        weight=Tensor(_xavier(rng, dims.d_model, vocab_size, dtype), requires_grad=True, name="head.w"),
        bias=Tensor(np.zeros(vocab_size, dtype=dtype), requires_grad=True, name="head.b"),
    )


def _init_inputs(dims: ModelDims, vocab_size: int, seed: int, dtype: np.dtype) -> Dict[str, Optional[Tensor]]:
    rng = np.random.default_rng([seed, _EMBED_STREAM])
    embedding = Tensor(_xavier(rng, vocab_size, dims.d_model, dtype), requires_grad=True, name="embed.table")
    positions: Optional[Tensor] = None
    if dims.learned_positions:
        prng = np.random.default_rng([seed, _POSITION_STREAM])
        positions = Tensor(
            _xavier(prng, dims.max_positions, dims.d_model, dtype), requires_grad=True, name="pos.table"
        )
    return {"embedding": embedding, "positions": positions}


def _check_dims(dims: ModelDims) -> None:
    dims.validate()
    if dims.vocab_size < 3:
        raise ContractException("vocab_size must cover the reserved tokens and at least one symbol: %d." % dims.vocab_size)


def build_tet(h: HierarchyNode, dims: ModelDims, seed: int, dtype: np.dtype = np.dtype(np.float64)) -> ModelGraph:
    validate_hierarchy(h)
    _check_dims(dims)
    nodes: Dict[int, GraphNode] = {}
    leaf_ids: Dict[str, int] = {}

    def visit(node: HierarchyNode, parent: Optional[int]) -> None:
        last = parent
        for i in range(node.layers):
            node_id = len(nodes)
            label = node.name if node.layers == 1 else "%s.%d" % (node.name, i)
            nodes[node_id] = GraphNode(node_id, last, label, init_layer(dims, seed, node_id, dtype))
            last = node_id
        if node.language is not None and last is not None:
            leaf_ids[node.language] = last
        for c in node.children:
            visit(c, last)

    visit(h, None)
    languages = list(leaf_ids)
    heads = {l: _init_head(dims, dims.vocab_size, seed, i, dtype) for i, l in enumerate(languages)}
    inputs = _init_inputs(dims, dims.vocab_size, seed, dtype)
    return ModelGraph(
        arch=Arch.TET,
        dims=dims,
        hierarchy=h,
        seed=seed,
        nodes=nodes,
        leaves=leaf_ids,
        heads=heads,
        head_of={l: l for l in languages},
        embedding=inputs["embedding"],  # type: ignore
        positions=inputs["positions"],
    )


def random_leaf_assignment(languages: List[str], seed: int) -> Dict[str, str]:
    """
        Maps each leaf slot (named by the language the hierarchy puts there) to the language trained at it.
    """
    permutation = np.random.default_rng([seed, _PERMUTATION_STREAM]).permutation(len(languages))
    return {slot: languages[int(j)] for slot, j in zip(languages, permutation)}


def _relabel(node: HierarchyNode, assignment: Dict[str, str]) -> HierarchyNode:
    language = assignment[node.language] if node.language is not None else None
    name = language if node.language is not None and node.name == node.language else node.name
    return replace(node, name=name or "", language=language, children=[_relabel(c, assignment) for c in node.children])


def build_variant(
    h: HierarchyNode, variant: Arch, dims: ModelDims, seed: int, dtype: np.dtype = np.dtype(np.float64)
) -> ModelGraph:
    if variant == Arch.TET:
        return build_tet(h, dims, seed, dtype)
    validate_hierarchy(h)
    _check_dims(dims)
    languages = languages_of(h)
    path_depths = depths(h)

    if variant == Arch.TET_RND:
        assignment = random_leaf_assignment(languages, seed)
        g = build_tet(_relabel(h, assignment), dims, seed, dtype)
        g.arch = Arch.TET_RND
        g.hierarchy = h
        g.leaf_assignment = assignment
        return g

    if variant == Arch.TENC_LANG:
        nodes: Dict[int, GraphNode] = {}
        leaf_ids: Dict[str, int] = {}
        for l in languages:
            parent: Optional[int] = None
            for i in range(path_depths[l]):
                node_id = len(nodes)
                nodes[node_id] = GraphNode(node_id, parent, "%s.%d" % (l, i), init_layer(dims, seed, node_id, dtype))
                parent = node_id
            leaf_ids[l] = parent  # type: ignore
        heads = {l: _init_head(dims, dims.vocab_size, seed, i, dtype) for i, l in enumerate(languages)}
        inputs = _init_inputs(dims, dims.vocab_size, seed, dtype)
        return ModelGraph(
            arch=Arch.TENC_LANG, dims=dims, hierarchy=h, seed=seed, nodes=nodes, leaves=leaf_ids, heads=heads,
            head_of={l: l for l in languages}, embedding=inputs["embedding"],  # type: ignore
            positions=inputs["positions"],
        )

    if variant == Arch.TENC_ALL:
        depth = max(path_depths.values())
        nodes = {}
        parent = None
        for i in range(depth):
            nodes[i] = GraphNode(i, parent, "shared.%d" % i, init_layer(dims, seed, i, dtype))
            parent = i
        vocab_size = dims.vocab_size + len(languages)
        inputs = _init_inputs(dims, vocab_size, seed, dtype)
        return ModelGraph(
            arch=Arch.TENC_ALL, dims=dims, hierarchy=h, seed=seed, nodes=nodes,
            leaves={l: depth - 1 for l in languages},
            heads={"all": _init_head(dims, vocab_size, seed, 0, dtype)},
            head_of={l: "all" for l in languages},
            embedding=inputs["embedding"],  # type: ignore
            positions=inputs["positions"],
            language_tokens={l: dims.vocab_size + i for i, l in enumerate(languages)},
        )

    raise ContractException("Unknown model variant %s." % str(variant))


def path_for(g: ModelGraph, language: str) -> List[int]:
    g._check(language)
    path: List[int] = []
    node_id: Optional[int] = g.leaves[language]
    while node_id is not None:
        path.append(node_id)
        node_id = g.nodes[node_id].parent
    path.reverse()
    return path


def layer_count(g: ModelGraph, mode: CountMode) -> int:
    """
        Encoder-layer evaluations needed to produce every language.

        With a shared encoder (TENC_ALL) each language feeds a different input through the chain, so no
        activation can be reused and both modes agree.
    """
    per_language_sum = sum(len(path_for(g, l)) for l in g.languages)
    if mode == CountMode.PER_LANGUAGE_SUM or g.arch == Arch.TENC_ALL:
        return per_language_sum
    return len({n for l in g.languages for n in path_for(g, l)})


def node_depths(g: ModelGraph) -> List[int]:
    result: Dict[int, int] = {}
    for node in g.nodes.values():
        result[node.id] = 1 if node.parent is None else result[node.parent] + 1
    return sorted(result.values())


def layer_parameter_count(dims: ModelDims) -> int:
    d, f = dims.d_model, dims.d_ff
    return 4 * d * d + 4 * d + d * f + f + f * d + d + 4 * d


def parameter_count(g: ModelGraph) -> int:
    return sum(int(t.values.size) for t in g.parameters().values())


def describe(g: ModelGraph) -> List[str]:
    """
        One line per graph node, indented by depth, naming the languages whose path ends there.
    """
    lines: List[str] = []
    per_layer = layer_parameter_count(g.dims)

    def visit(node_id: int, indent: int) -> None:
        node = g.nodes[node_id]
        owners = [l for l, leaf in g.leaves.items() if leaf == node_id]
        suffix = " -> %s" % ", ".join(owners) if owners else ""
        lines.append("%s[%d] %s (%d params)%s" % ("  " * indent, node.id, node.label, per_layer, suffix))
        for c in g.children(node_id):
            visit(c, indent + 1)

    for root in g.children(None):
        visit(root, 0)
    return lines
