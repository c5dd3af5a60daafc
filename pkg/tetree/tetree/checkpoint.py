"""
Single-file checkpoints.

Layout: the 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON header, then every parameter block
named in the header, in header order, as little-endian floats of the header's dtype. Optimizer moments, when
saved, follow as blocks named `adam.m/<param>` and `adam.v/<param>`.
"""
import json
import logging
import os
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
from pytyped.json.decoder import JsDecodeException

from tetree import codec
from tetree import langtree
from tetree.config import Arch
from tetree.config import ModelDims
from tetree.errors import CheckpointException
from tetree.langtree import ModelGraph
from tetree.optim import MomentState
from tetree.optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"TETCKPT1"
FORMAT_VERSION = 1


@dataclass
class ParameterBlock:
    name: str
    shape: List[int]


@dataclass
class CheckpointHeader:
    format_version: int
    arch: Arch
    dims: ModelDims
    hierarchy_json: str
    vocab_hash: str
    seed: int
    dtype: str
    blocks: List[ParameterBlock]
    step: int = 0
    adam_steps: Dict[str, int] = field(default_factory=dict)


header_decoder = codec.decoder_for(CheckpointHeader)
header_encoder = codec.encoder_for(CheckpointHeader)


@dataclass
class Checkpoint:
    graph: ModelGraph
    header: CheckpointHeader
    optimizer: Optional[OptimizerState] = None


def _block_dtype(dtype: np.dtype) -> str:
    return "<f4" if np.dtype(dtype) == np.float32 else "<f8"


def save_checkpoint(
    path: str,
    g: ModelGraph,
    vocab_hash: str,
    optimizer: Optional[OptimizerState] = None,
    step: int = 0,
) -> None:
    dtype = _block_dtype(g.dtype)
    params = g.parameters()
    arrays: List[Tuple[str, np.ndarray]] = [(name, t.values) for name, t in params.items()]
    adam_steps: Dict[str, int] = {}
    if optimizer is not None:
        for name in params:
            state = optimizer.moments.get(name)
            if state is not None:
                arrays.append(("adam.m/" + name, state.m))
                arrays.append(("adam.v/" + name, state.v))
                adam_steps[name] = state.step

    header = CheckpointHeader(
        format_version=FORMAT_VERSION,
        arch=g.arch,
        dims=g.dims,
        hierarchy_json=json.dumps(langtree.hierarchy_encoder.write(g.hierarchy), sort_keys=True),
        vocab_hash=vocab_hash,
        seed=g.seed,
        dtype=dtype,
        blocks=[ParameterBlock(name, [int(s) for s in a.shape]) for name, a in arrays],
        step=step,
        adam_steps=adam_steps,
    )
    header_bytes = json.dumps(header_encoder.write(header), sort_keys=True).encode("utf-8")

    tmp_path = "%s.tmp-%d" % (path, os.getpid())
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(np.asarray([len(header_bytes)], dtype="<u8").tobytes())
        f.write(header_bytes)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())
    os.replace(tmp_path, path)
    logger.info("Saved checkpoint %s (%d blocks, step %d).", path, len(arrays), step)


def read_header(path: str) -> Tuple[CheckpointHeader, int]:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointException(path, "not a checkpoint file")
            raw_length = f.read(8)
            if len(raw_length) != 8:
                raise CheckpointException(path, "truncated header length")
            length = int(np.frombuffer(raw_length, dtype="<u8")[0])
            header_bytes = f.read(length)
    except OSError as e:
        raise CheckpointException(path, str(e))
    if len(header_bytes) != length:
        raise CheckpointException(path, "truncated header")
    try:
        header = header_decoder.read(json.loads(header_bytes.decode("utf-8")))
    except (JsDecodeException, ValueError) as e:
        raise CheckpointException(path, "unreadable header: %s" % str(e))
    if header.format_version != FORMAT_VERSION:
        raise CheckpointException(path, "unsupported format version %d" % header.format_version)
    return header, len(MAGIC) + 8 + length


def load_checkpoint(path: str, vocab_hash: Optional[str] = None) -> Checkpoint:
    """
        Rebuilds the graph from the header and overwrites every parameter from its block. When `vocab_hash` is
        given it must equal the hash recorded at save time.
    """
    header, offset = read_header(path)
    if vocab_hash is not None and vocab_hash != header.vocab_hash:
        raise CheckpointException(
            path, "vocabulary hash %s does not match the checkpoint's %s" % (vocab_hash, header.vocab_hash)
        )
    hierarchy = langtree.parse_hierarchy(json.loads(header.hierarchy_json))
    dtype = np.dtype(header.dtype)
    g = langtree.build_variant(hierarchy, header.arch, header.dims, header.seed, dtype.newbyteorder("="))

    with open(path, "rb") as f:
        f.seek(offset)
        payload = f.read()
    blocks: Dict[str, np.ndarray] = {}
    position = 0
    for block in header.blocks:
        count = int(np.prod(block.shape)) if block.shape else 1
        size = count * dtype.itemsize
        if position + size > len(payload):
            raise CheckpointException(path, "truncated block %s" % block.name)
        blocks[block.name] = np.frombuffer(payload, dtype=dtype, count=count, offset=position).reshape(block.shape)
        position += size
    if position != len(payload):
        raise CheckpointException(path, "%d trailing bytes after the last block" % (len(payload) - position))

    params = g.parameters()
    missing = sorted(set(params) - set(blocks))
    if missing:
        raise CheckpointException(path, "missing parameter blocks %s" % ", ".join(missing[:5]))
    for name, tensor in params.items():
        values = blocks[name]
        if tuple(values.shape) != tensor.shape:
            raise CheckpointException(
                path, "block %s has shape %s, expected %s" % (name, str(values.shape), str(tensor.shape))
            )
        tensor.values = values.astype(tensor.dtype)

    optimizer: Optional[OptimizerState] = None
    if header.adam_steps:
        optimizer = OptimizerState()
        for name, step in header.adam_steps.items():
            m = blocks.get("adam.m/" + name)
            v = blocks.get("adam.v/" + name)
            if m is None or v is None:
                raise CheckpointException(path, "optimizer moments for %s are incomplete" % name)
            optimizer.moments[name] = MomentState(m.astype(params[name].dtype), v.astype(params[name].dtype), step)
    return Checkpoint(g, header, optimizer)
