"""
Typed run configuration.

Every knob lives in a dataclass below; a HOCON file is parsed straight into `RunConfig` by a parser extracted
with `AutoHoconParser`. Missing keys fall back to the dataclass defaults, and command-line flags are applied on
top of the parsed value (flag > config file > default).
"""
import os
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from enum import Enum
from typing import Dict
from typing import List
from typing import Optional

from pytyped.hocon.parser import AutoHoconParser
from pytyped.hocon.parser import HoconMappedParser
from pytyped.hocon.parser import HoconParser
from pytyped.hocon.parser import hocon_number_parser

from tetree.errors import ContractException


class Arch(Enum):
    TET = "tet"
    TET_RND = "tet-rnd"
    TENC_LANG = "tenc-lang"
    TENC_ALL = "tenc-all"


@dataclass
class ModelDims:
    d_model: int = 128
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 0  # Filled in from the vocabulary when a graph is built.
    learned_positions: bool = False
    max_positions: int = 1024
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_ff <= 0 or self.n_heads <= 0:
            raise ContractException("Model dimensions must be positive: %s" % str(self))
        if self.d_model % self.n_heads != 0:
            raise ContractException("d_model=%d is not divisible by n_heads=%d." % (self.d_model, self.n_heads))


@dataclass
class TrainConfig:
    arch: Arch = Arch.TET
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    pad_margin: int = 50
    precision: int = 32
    language_order: Optional[List[str]] = None  # None means alphabetical by language code.
    joint_accumulation: bool = False
    warmup_steps: int = 0
    clip_norm: Optional[float] = None
    shared_lr_scale: float = 1.0
    eval_every: int = 100
    eval_examples: int = 200
    checkpoint_every: int = 0  # 0 writes only the final checkpoint.
    max_aborted_steps: int = 10
    progress: bool = False

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ContractException("learning_rate must be non-negative but received %g." % self.learning_rate)
        if self.pad_margin < 0:
            raise ContractException("pad_margin must be non-negative but received %d." % self.pad_margin)
        if self.batch_size <= 0:
            raise ContractException("batch_size must be positive but received %d." % self.batch_size)
        if self.precision not in (32, 64):
            raise ContractException("precision must be 32 or 64 but received %d." % self.precision)


@dataclass
class CorpusConfig:
    punctuation_filter: bool = True
    filtered_characters: str = ",.?!\""
    allowed_scripts: List[str] = field(default_factory=lambda: ["LATIN", "CYRILLIC"])
    split_ratio: float = 0.8
    split_seed: int = 0


@dataclass
class SynthConfig:
    families: int = 2
    leaves_per_family: int = 2
    overlap: float = 0.9
    examples: int = 1000
    seed: int = 0
    alphabet: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    min_words: int = 1
    max_words: int = 4
    max_word_length: int = 6
    resources: Dict[str, float] = field(default_factory=dict)
    copy_task: bool = False
    root_layers: int = 1
    family_layers: int = 1
    leaf_layers: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ContractException("overlap must lie in [0, 1] but received %g." % self.overlap)
        for language, fraction in self.resources.items():
            if not 0.0 <= fraction <= 1.0:
                raise ContractException("Resource fraction for %s must lie in [0, 1]: %g." % (language, fraction))


@dataclass
class BenchConfig:
    repetitions: int = 5
    warmup: int = 1
    threads: int = 1
    blas_threads: int = 1
    batch_size: int = 32


@dataclass
class EvalConfig:
    batch_size: int = 32
    decode_samples: int = 3
    clustering_sentences: int = 320
    clustering_layers: List[int] = field(default_factory=lambda: [-3, -2, -1])


@dataclass
class RunConfig:
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_auto_hocon_parser = AutoHoconParser()
_auto_hocon_parser.add_special(float, HoconMappedParser(hocon_number_parser, float))

run_config_parser: HoconParser[RunConfig] = _auto_hocon_parser.extract(RunConfig)


DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources", "default.conf")


def load_config(path: Optional[str] = None) -> RunConfig:
    """
        Parses `path`, or the shipped defaults when no path is given.
    """
    return run_config_parser.from_file(path or DEFAULT_CONFIG)


def parse_config(conf: str) -> RunConfig:
    return run_config_parser.from_string(conf)


def parse_dims(text: str, base: ModelDims) -> ModelDims:
    """
        Parses the `d_model,d_ff,heads` command-line form.
    """
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ContractException("Expected dims as d_model,d_ff,heads but received '%s'." % text)
    try:
        d_model, d_ff, heads = (int(p) for p in parts)
    except ValueError:
        raise ContractException("Expected integer dims but received '%s'." % text)
    dims = replace(base, d_model=d_model, d_ff=d_ff, n_heads=heads)
    dims.validate()
    return dims
