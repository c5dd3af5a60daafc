"""
Run manifests.

A manifest records everything a command's outputs depend on: the command line, the fully resolved config, the
sha256 of every input file, the seeds and the versions of the toolkit, numpy and Python. It carries no
timestamps, so two runs of the same command line over the same inputs produce the same manifest, the same hash
and therefore the same output directory.
"""
import hashlib
import logging
import os
import platform
from dataclasses import dataclass
from typing import Dict
from typing import List
from typing import Optional

import numpy as np

from tetree import codec
from tetree.config import RunConfig
from tetree.corpus import corpus_hash
from tetree.errors import DataException

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
MANIFEST_FILE = "manifest.json"
HASH_PREFIX = 12


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: RunConfig
    inputs: Dict[str, str]  # input path -> sha256 of its bytes
    seeds: Dict[str, int]
    versions: Dict[str, str]


manifest_encoder = codec.encoder_for(RunManifest)
manifest_decoder = codec.decoder_for(RunManifest)


def build_versions() -> Dict[str, str]:
    return {"tetree": VERSION, "numpy": np.__version__, "python": platform.python_version()}


def make_manifest(
    command: str, argv: List[str], config: RunConfig, input_paths: List[str], seeds: Dict[str, int]
) -> RunManifest:
    inputs = {path: corpus_hash(path) for path in sorted(set(input_paths)) if os.path.isfile(path)}
    return RunManifest(command, list(argv), config, inputs, dict(seeds), build_versions())


def manifest_hash(manifest: RunManifest) -> str:
    return hashlib.sha256(codec.dumps(manifest, manifest_encoder).encode("utf-8")).hexdigest()


def run_dir(out: str, manifest: RunManifest) -> str:
    """
        Creates (if needed) and returns the output subdirectory owned by this manifest.
    """
    path = os.path.join(out, "%s-%s" % (manifest.command, manifest_hash(manifest)[:HASH_PREFIX]))
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(directory: str, manifest: RunManifest) -> str:
    path = os.path.join(directory, MANIFEST_FILE)
    codec.write_json(path, manifest, manifest_encoder)
    return path


def read_manifest(path: str) -> RunManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_FILE)
    return codec.read_json(path, manifest_decoder)


def check_inputs(manifest: RunManifest, strict: bool = True) -> List[str]:
    """
        Lists the recorded inputs whose current bytes differ from the manifest. With `strict` any difference
        raises `DataException`.
    """
    changed: List[str] = []
    for path, digest in sorted(manifest.inputs.items()):
        current: Optional[str] = corpus_hash(path) if os.path.isfile(path) else None
        if current != digest:
            changed.append(path)
    if changed and strict:
        raise DataException("Inputs changed since the manifest was written: %s" % ", ".join(changed))
    for path in changed:
        logger.warning("Input %s changed since the manifest was written.", path)
    return changed
