"""
Encoder forward passes over a `ModelGraph`.

`forward_path` runs one language's root-to-leaf chain. `forward_all` walks the tree once, computing every shared
node a single time and handing its activation to all branches below it. Both execute the same primitive sequence
for a given language, so their logits agree bitwise.
"""
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional

import numpy as np

from tetree import autodiff as ad
from tetree.autodiff import Tensor
from tetree.config import Arch
from tetree.corpus import Batch
from tetree.errors import ContractException
from tetree.errors import DimensionException
from tetree.langtree import EncoderLayerParams
from tetree.langtree import LeafHead
from tetree.langtree import ModelGraph
from tetree.langtree import path_for

logger = logging.getLogger(__name__)


class InvocationCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def increment(self) -> None:
        with self._lock:
            self.count += 1


_counters: List[InvocationCounter] = []
_counters_lock = threading.Lock()


@contextmanager
def count_layer_invocations() -> Iterator[InvocationCounter]:
    """
        Counts `encoder_layer` calls made from any thread while the context is open.
    """
    counter = InvocationCounter()
    with _counters_lock:
        _counters.append(counter)
    try:
        yield counter
    finally:
        with _counters_lock:
            _counters.remove(counter)


def positional_encoding(length: int, d_model: int, dtype: np.dtype = np.dtype(np.float64)) -> np.ndarray:
    """
        Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
    """
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table.astype(dtype)


def embed(tokens: np.ndarray, embedding: Tensor, positions: Optional[Tensor] = None) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ContractException("embed expects a [B x T] id matrix but received shape %s." % str(tokens.shape))
    length = tokens.shape[1]
    x = ad.gather(embedding, tokens)
    if positions is None:
        return ad.add(x, positional_encoding(length, embedding.shape[1], embedding.dtype))
    if length > positions.shape[0]:
        raise ContractException("Input of %d frames exceeds %d learned positions." % (length, positions.shape[0]))
    return ad.add(x, ad.gather(positions, np.arange(length)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, k = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * k))


def self_attention(x: Tensor, p: EncoderLayerParams, n_heads: int) -> Tensor:
    """
        Full bidirectional multi-head attention: softmax(Q K^T / sqrt(d_head)) V per head.
    """
    d = x.shape[-1]
    q = _split_heads(ad.linear(x, p.wq, p.bq), n_heads)
    k = _split_heads(ad.linear(x, p.wk, p.bk), n_heads)
    v = _split_heads(ad.linear(x, p.wv, p.bv), n_heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    attended = ad.matmul(ad.softmax_rows(scores), v)
    return ad.linear(_merge_heads(attended), p.wo, p.bo)


def feed_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


def encoder_layer(x: Tensor, p: EncoderLayerParams, n_heads: int, eps: float = 1e-5) -> Tensor:
    """
    Pre-norm residual block: y = x + Attn(LN1(x)); out = y + FFN(LN2(y)).

    :param x: Activations of shape [B x T x d_model].
    """
    if len(x.shape) != 3 or x.shape[-1] != p.wq.shape[0]:
        raise DimensionException("encoder_layer input does not match layer width", x.shape, p.wq.shape)
    if x.shape[-1] % n_heads != 0:
        raise ContractException("d_model=%d is not divisible by n_heads=%d." % (x.shape[-1], n_heads))
    for counter in list(_counters):
        counter.increment()
    y = ad.add(x, self_attention(ad.layer_norm(x, p.ln1_g, p.ln1_b, eps), p, n_heads))
    return ad.add(y, feed_forward(ad.layer_norm(y, p.ln2_g, p.ln2_b, eps), p))


def head_logits(x: Tensor, head: LeafHead) -> Tensor:
    return ad.linear(x, head.weight, head.bias)


def _embed_for(g: ModelGraph, batch: Batch, language: str) -> Tensor:
    return embed(batch.inputs_for(language), g.embedding, g.positions)


def forward_path(g: ModelGraph, language: str, batch: Batch) -> Tensor:
    """
        Logits of shape [B x T_in x |V|] for one language: embed, the layers of `path_for`, then its head.
    """
    path = path_for(g, language)
    x = _embed_for(g, batch, language)
    for node_id in path:
        x = encoder_layer(x, g.nodes[node_id].params, g.dims.n_heads, g.dims.ln_eps)
    return head_logits(x, g.head_for(language))


def hidden_states(g: ModelGraph, batch: Batch, language: str) -> List[np.ndarray]:
    """
        Activations after each layer on the language's path, root first.
    """
    x = _embed_for(g, batch, language)
    states: List[np.ndarray] = []
    for node_id in path_for(g, language):
        x = encoder_layer(x, g.nodes[node_id].params, g.dims.n_heads, g.dims.ln_eps)
        states.append(x.values)
    return states


@dataclass
class _Level:
    node_ids: List[int]


def _levels(g: ModelGraph) -> List[_Level]:
    depth: Dict[int, int] = {}
    levels: Dict[int, List[int]] = {}
    for node in g.nodes.values():
        depth[node.id] = 0 if node.parent is None else depth[node.parent] + 1
        levels.setdefault(depth[node.id], []).append(node.id)
    return [_Level(levels[d]) for d in sorted(levels)]


def forward_all(g: ModelGraph, batch: Batch, threads: int = 1) -> Dict[str, Tensor]:
    """
    Logits for every language of the graph.

    :param threads: Worker count for evaluating sibling nodes concurrently. Ignored while a tape is recording,
        since tapes are per-thread.
    """
    parallel = threads > 1 and ad.active_tape() is None
    if g.arch == Arch.TENC_ALL:
        if parallel:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return dict(zip(g.languages, pool.map(lambda l: forward_path(g, l, batch), g.languages)))
        return {l: forward_path(g, l, batch) for l in g.languages}

    x0 = embed(batch.inputs, g.embedding, g.positions)
    activations: Dict[int, Tensor] = {}

    def run(node_id: int) -> Tensor:
        node = g.nodes[node_id]
        x = x0 if node.parent is None else activations[node.parent]
        return encoder_layer(x, node.params, g.dims.n_heads, g.dims.ln_eps)

    if parallel:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for level in _levels(g):
                for node_id, out in zip(level.node_ids, pool.map(run, level.node_ids)):
                    activations[node_id] = out
    else:
        for node_id in g.nodes:
            activations[node_id] = run(node_id)

    return {l: head_logits(activations[g.leaves[l]], g.head_for(l)) for l in g.languages}
