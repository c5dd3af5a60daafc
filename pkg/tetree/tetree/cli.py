"""
Command-line entry point.

Every artifact-producing command resolves its configuration (flag > config file > default), writes a manifest
into a per-run subdirectory of `--out` named after the manifest hash, and places all of its outputs there.
Failures exit with 2 (configuration), 3 (data) or 4 (numeric) and print a JSON error object on stderr.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

from pyhocon.exceptions import ConfigException
from pytyped.hocon.parser import HoconParseException
from pytyped.json.decoder import JsDecodeException
from pytyped.macros.boxed import Boxed

from tetree import codec
from tetree import manifest as mf
from tetree.autodiff import precision_dtype
from tetree.checkpoint import load_checkpoint
from tetree.config import Arch
from tetree.config import RunConfig
from tetree.config import load_config
from tetree.config import parse_dims
from tetree.corpus import CorpusRecord
from tetree.corpus import ParallelCorpus
from tetree.corpus import Vocab
from tetree.corpus import build_vocab
from tetree.corpus import clean_records
from tetree.corpus import post_process
from tetree.corpus import read_records
from tetree.corpus import record_sentences
from tetree.corpus import split
from tetree.corpus import tokenize
from tetree.corpus import write_records
from tetree.errors import CheckpointException
from tetree.errors import ContractException
from tetree.errors import DataException
from tetree.errors import LookupException
from tetree.errors import NumericException
from tetree.evaluation import BenchReport
from tetree.evaluation import ClusteringReport
from tetree.evaluation import ComparisonReport
from tetree.evaluation import EvalReport
from tetree.evaluation import bench
from tetree.evaluation import compare
from tetree.evaluation import embedding_clustering
from tetree.evaluation import evaluate
from tetree.evaluation import render_table
from tetree.evaluation import translate
from tetree.evaluation import write_distance_csv
from tetree.langtree import CountMode
from tetree.langtree import HierarchyNode
from tetree.langtree import ModelGraph
from tetree.langtree import build_variant
from tetree.langtree import describe
from tetree.langtree import languages_of
from tetree.langtree import layer_count
from tetree.langtree import parameter_count
from tetree.langtree import resolve_hierarchy
from tetree.langtree import save_hierarchy
from tetree.metrics import log_metrics
from tetree.synth import SyntheticLanguage
from tetree.synth import generate_copy_corpus
from tetree.synth import generate_family_corpus
from tetree.trainer import fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

eval_report_encoder = codec.encoder_for(EvalReport)
bench_report_encoder = codec.encoder_for(BenchReport)
clustering_report_encoder = codec.encoder_for(ClusteringReport)
comparison_report_encoder = codec.encoder_for(ComparisonReport)
synthetic_languages_encoder = codec.encoder_for(List[SyntheticLanguage])


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore
        raise ContractException(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="HOCON file; keys missing from it keep their defaults.")
    common.add_argument("--out", help="Directory receiving one subdirectory per run.")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def _model_flags() -> argparse.ArgumentParser:
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch", choices=[a.value for a in Arch])
    model.add_argument("--tree", help="Hierarchy JSON file or the name of a shipped default.")
    model.add_argument("--dims", help="d_model,d_ff,heads")
    model.add_argument("--precision", type=int, choices=[32, 64])
    return model


def _training_flags() -> argparse.ArgumentParser:
    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch", type=int)
    training.add_argument("--steps", type=int)
    training.add_argument("--progress", action="store_true")
    return training


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    model = _model_flags()
    training = _training_flags()
    parser = _ArgumentParser(prog="tetree", description="Encoder-tree non-autoregressive multilingual translation.")
    commands = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    commands.required = True

    p = commands.add_parser("gen-synth", parents=[common], help="Generate a synthetic family-structured corpus.")
    p.add_argument("--families", type=int)
    p.add_argument("--leaves-per-family", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--examples", type=int)
    p.add_argument("--resource", action="append", default=[], metavar="LANG=FRACTION")
    p.add_argument("--copy-task", action="store_true")
    p.set_defaults(handler=cmd_gen_synth)

    p = commands.add_parser("train", parents=[common, model, training], help="Train one model variant.")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", help="Existing vocabulary; built from the cleaned corpus when omitted.")
    p.add_argument("--resume", help="Checkpoint to continue from.")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", parents=[common], help="Word error rate of a checkpoint on a corpus.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--table", action="store_true", help="Also print and save an aligned text table.")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("translate", parents=[common], help="Translate a file into every language at once.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="Source sentences, one per line.")
    p.set_defaults(handler=cmd_translate)

    p = commands.add_parser("bench", parents=[common, model], help="Compare shared and per-language inference.")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--threads", type=int, help="Workers for sibling nodes and for the per-language side alike.")
    p.add_argument("--blas-threads", type=int, help="Thread count BLAS libraries are pinned to while timing.")
    p.add_argument("--batch", type=int)
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("inspect-tree", parents=[common, model], help="Print a variant's topology and counts.")
    p.add_argument("--vocab-size", type=int, default=32)
    p.set_defaults(handler=cmd_inspect_tree)

    p = commands.add_parser("compare", parents=[common, model, training], help="Train and compare variants.")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0", help="Comma-separated seeds.")
    p.add_argument("--variants", default=",".join(a.value for a in Arch))
    p.add_argument("--low-resource", help="Language whose WER is compared seed by seed.")
    p.set_defaults(handler=cmd_compare)

    p = commands.add_parser("rerun", parents=[common], help="Repeat the command recorded in a manifest.")
    p.add_argument("--manifest", required=True, help="manifest.json or the run directory holding it.")
    p.set_defaults(handler=cmd_rerun)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
        Loads `--config` (or the defaults) and applies every flag that was given on top of it.
    """
    cfg = load_config(args.config)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        cfg.train.seed = args.seed
        cfg.synth.seed = args.seed
    if get("arch") is not None:
        cfg.train.arch = Arch(args.arch)
    if get("dims") is not None:
        cfg.model = parse_dims(args.dims, cfg.model)
    if get("precision") is not None:
        cfg.train.precision = args.precision
    if get("lr") is not None:
        cfg.train.learning_rate = args.lr
    if get("batch") is not None:
        cfg.train.batch_size = args.batch
        cfg.bench.batch_size = args.batch
    if get("steps") is not None:
        cfg.train.steps = args.steps
    if get("progress"):
        cfg.train.progress = True
    if get("repetitions") is not None:
        cfg.bench.repetitions = args.repetitions
    if get("threads") is not None:
        cfg.bench.threads = args.threads
    if get("blas_threads") is not None:
        cfg.bench.blas_threads = args.blas_threads
    if get("families") is not None:
        cfg.synth.families = args.families
    if get("leaves_per_family") is not None:
        cfg.synth.leaves_per_family = args.leaves_per_family
    if get("overlap") is not None:
        cfg.synth.overlap = args.overlap
    if get("examples") is not None:
        cfg.synth.examples = args.examples
    if get("copy_task"):
        cfg.synth.copy_task = True
    for language, fraction in parse_resources(get("resource") or []).items():
        cfg.synth.resources[language] = fraction
    return cfg


def parse_resources(flags: Sequence[str]) -> Dict[str, float]:
    resources: Dict[str, float] = {}
    for flag in flags:
        language, sep, value = flag.partition("=")
        if not sep or not language:
            raise ContractException("Expected --resource LANG=FRACTION but received '%s'." % flag)
        try:
            resources[language.strip()] = float(value)
        except ValueError:
            raise ContractException("Resource fraction '%s' for %s is not a number." % (value, language))
    return resources


def _require_out(args: argparse.Namespace) -> str:
    if not args.out:
        raise ContractException("--out is required for the %s command." % args.command)
    return str(args.out)


def _start_run(
    args: argparse.Namespace,
    argv: Sequence[str],
    cfg: RunConfig,
    inputs: Sequence[Optional[str]],
    seeds: Dict[str, int],
) -> str:
    manifest = mf.make_manifest(args.command, list(argv), cfg, [p for p in inputs if p], seeds)
    directory = mf.run_dir(_require_out(args), manifest)
    mf.write_manifest(directory, manifest)
    logger.info("Writing %s outputs to %s.", args.command, directory)
    return directory


def _load_records(path: str, cfg: RunConfig) -> List[CorpusRecord]:
    records, _ = clean_records(read_records(path), cfg.corpus)
    if not records:
        raise DataException("No usable examples in %s." % path)
    return records


def _checked_languages(h: HierarchyNode, corpus: ParallelCorpus) -> None:
    tree = set(languages_of(h))
    extra = sorted(set(corpus.languages) - tree)
    absent = sorted(tree - set(corpus.languages))
    if extra:
        logger.warning("Corpus languages %s are not in the hierarchy and are ignored.", extra)
    if absent:
        logger.warning("Hierarchy languages %s have no examples in the corpus.", absent)
    if not tree & set(corpus.languages):
        raise DataException("The corpus shares no language with the hierarchy.")


def _build_graph(h: HierarchyNode, cfg: RunConfig, vocab: Vocab, arch: Arch, seed: int) -> ModelGraph:
    dims = replace(cfg.model, vocab_size=len(vocab))
    return build_variant(h, arch, dims, seed, precision_dtype(cfg.train.precision))


def _tree_input(tree: Optional[str]) -> Optional[str]:
    return tree if tree and os.path.isfile(tree) else None


def cmd_gen_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    cfg.synth.validate()
    directory = _start_run(args, argv, cfg, [args.config], {"synth": cfg.synth.seed})
    corpus = generate_copy_corpus(cfg.synth) if cfg.synth.copy_task else generate_family_corpus(cfg.synth)
    write_records(os.path.join(directory, "corpus.jsonl"), corpus.records)
    save_hierarchy(os.path.join(directory, "tree.json"), corpus.hierarchy)
    build_vocab(record_sentences(corpus.records)).save(os.path.join(directory, "vocab.txt"))
    codec.write_json(os.path.join(directory, "languages.json"), corpus.languages, synthetic_languages_encoder)
    print(directory)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    cfg.train.validate()
    directory = _start_run(
        args, argv, cfg, [args.config, args.data, args.vocab, args.resume, _tree_input(args.tree)],
        {"train": cfg.train.seed, "split": cfg.corpus.split_seed},
    )
    records = _load_records(args.data, cfg)
    vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(record_sentences(records))
    corpus = tokenize(records, vocab)
    train_set, test_set = split(corpus, cfg.corpus.split_ratio, cfg.corpus.split_seed)
    test_ids = set(test_set.ids())
    write_records(os.path.join(directory, "test.jsonl"), [r for r in records if r.id in test_ids])
    vocab.save(os.path.join(directory, "vocab.txt"))

    optimizer = None
    start_step = 0
    if args.resume:
        checkpoint = load_checkpoint(args.resume, vocab.fingerprint())
        g = checkpoint.graph
        if args.arch is not None and g.arch != cfg.train.arch:
            raise ContractException("--arch %s does not match the checkpoint's %s." % (args.arch, g.arch.value))
        cfg.train.arch = g.arch
        optimizer = checkpoint.optimizer
        start_step = checkpoint.header.step
        logger.info("Resuming %s from step %d.", g.arch.value, start_step)
    else:
        if not args.tree:
            raise ContractException("--tree is required unless --resume is given.")
        g = _build_graph(resolve_hierarchy(args.tree), cfg, vocab, cfg.train.arch, cfg.train.seed)
    _checked_languages(g.hierarchy, corpus)
    save_hierarchy(os.path.join(directory, "tree.json"), g.hierarchy)

    report = fit(
        g, train_set, cfg.train, vocab, test=test_set, out_dir=directory, optimizer=optimizer,
        start_step=start_step, vocab_hash=vocab.fingerprint(),
    )
    result = _evaluate(g, test_set, vocab, cfg)
    codec.write_json(os.path.join(directory, "eval.json"), result, eval_report_encoder)
    logger.info(
        "Trained %s to step %d (%d aborted steps); test WER %.1f.",
        g.arch.value, report.final_step, report.aborted_steps, result.average_wer,
    )
    print(directory)
    return EXIT_OK


def _evaluate(g: ModelGraph, testset: ParallelCorpus, vocab: Vocab, cfg: RunConfig) -> EvalReport:
    return evaluate(
        g, testset, vocab,
        batch_size=cfg.eval.batch_size,
        seed=cfg.train.seed,
        pad_margin=cfg.train.pad_margin,
        decode_samples=cfg.eval.decode_samples,
    )


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    directory = _start_run(
        args, argv, cfg, [args.config, args.checkpoint, args.data, args.vocab], {"eval": cfg.train.seed}
    )
    vocab = Vocab.load(args.vocab)
    g = load_checkpoint(args.checkpoint, vocab.fingerprint()).graph
    testset = tokenize(_load_records(args.data, cfg), vocab)
    report = _evaluate(g, testset, vocab, cfg)
    codec.write_json(os.path.join(directory, "eval.json"), report, eval_report_encoder)
    log_metrics("eval", report, EvalReport)
    if args.table:
        table = render_table({g.arch.value: report.wer_row()}, [l for l in g.languages if l in report.languages])
        codec.write_text_atomically(os.path.join(directory, "table.txt"), table)
        print(table, end="")
    print(directory)
    return EXIT_OK


def source_ids(line: str, cfg: RunConfig, vocab: Vocab) -> List[int]:
    """
        Normalizes one input line the way training text was cleaned. Filtered punctuation is removed instead of
        rejecting the line, and characters outside the vocabulary are dropped. A line that is empty after
        cleaning becomes an empty source.
    """
    stripped = "".join(c for c in line if c not in cfg.corpus.filtered_characters)
    cleaned = post_process(stripped, replace(cfg.corpus, punctuation_filter=False))
    if not isinstance(cleaned, Boxed):
        return []
    unknown = sorted({c for c in cleaned.t if c not in vocab.ids})
    if unknown:
        logger.warning("Dropping characters outside the vocabulary: %s", "".join(unknown))
    return vocab.encode("".join(c for c in cleaned.t if c in vocab.ids))


def cmd_translate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    directory = _start_run(
        args, argv, cfg, [args.config, args.checkpoint, args.vocab, args.input], {"translate": cfg.train.seed}
    )
    vocab = Vocab.load(args.vocab)
    g = load_checkpoint(args.checkpoint, vocab.fingerprint()).graph
    with open(args.input, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    sources = [source_ids(line, cfg, vocab) for line in lines]

    outputs: Dict[str, List[str]] = {l: [] for l in g.languages}
    size = cfg.eval.batch_size
    for start in range(0, len(sources), size):
        chunk = translate(g, sources[start : start + size], vocab, cfg.train.seed + start, cfg.train.pad_margin)
        for language, sentences in chunk.items():
            outputs[language].extend(sentences)
    for language, sentences in outputs.items():
        codec.write_text_atomically(
            os.path.join(directory, "%s.txt" % language), "".join(s + "\n" for s in sentences)
        )
    logger.info("Translated %d sentences into %d languages.", len(sources), len(outputs))
    print(directory)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    directory = _start_run(
        args, argv, cfg, [args.config, args.checkpoint, args.data, args.vocab, _tree_input(args.tree)],
        {"bench": cfg.train.seed},
    )
    records = _load_records(args.data, cfg)
    if args.checkpoint:
        if not args.vocab:
            raise ContractException("--vocab is required together with --checkpoint.")
        vocab = Vocab.load(args.vocab)
        g = load_checkpoint(args.checkpoint, vocab.fingerprint()).graph
    else:
        if not args.tree:
            raise ContractException("bench needs either --checkpoint or --tree.")
        vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(record_sentences(records))
        g = _build_graph(resolve_hierarchy(args.tree), cfg, vocab, cfg.train.arch, cfg.train.seed)
    report = bench(
        g,
        tokenize(records, vocab),
        repetitions=cfg.bench.repetitions,
        threads=cfg.bench.threads,
        batch_size=cfg.bench.batch_size,
        warmup=cfg.bench.warmup,
        seed=cfg.train.seed,
        pad_margin=cfg.train.pad_margin,
        blas_threads=cfg.bench.blas_threads,
    )
    codec.write_json(os.path.join(directory, "bench.json"), report, bench_report_encoder)
    log_metrics("bench", report, BenchReport)
    logger.info(
        "forward_all %.2f ms, per-language loop %.2f ms, speedup %.2f (theoretical %.2f).",
        report.forward_all_ms, report.per_language_ms, report.speedup, report.theoretical_ratio,
    )
    print(directory)
    return EXIT_OK


def inspect_lines(g: ModelGraph) -> List[str]:
    lines = describe(g)
    lines.append("parameters=%d" % parameter_count(g))
    lines.append(
        "shared=%d per_language_sum=%d"
        % (layer_count(g, CountMode.MULTI_TARGET_SHARED), layer_count(g, CountMode.PER_LANGUAGE_SUM))
    )
    return lines


def cmd_inspect_tree(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    dims = replace(cfg.model, vocab_size=args.vocab_size)
    g = build_variant(
        resolve_hierarchy(args.tree or "indo-european"), cfg.train.arch, dims, cfg.train.seed,
        precision_dtype(cfg.train.precision),
    )
    for line in inspect_lines(g):
        print(line)
    return EXIT_OK


def _parse_variants(text: str) -> List[Arch]:
    variants: List[Arch] = []
    for name in (v.strip() for v in text.split(",")):
        if not name:
            continue
        try:
            variants.append(Arch(name))
        except ValueError:
            raise LookupException("variant", name, [a.value for a in Arch])
    if not variants:
        raise ContractException("--variants names no model variant.")
    return variants


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ContractException("--seeds expects comma-separated integers but received '%s'." % text)
    if not seeds:
        raise ContractException("--seeds names no seed.")
    return seeds


def cmd_compare(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = resolve_config(args)
    cfg.train.validate()
    variants = _parse_variants(args.variants)
    seeds = _parse_seeds(args.seeds)
    if Arch.TET not in variants:
        raise ContractException("compare needs the tet variant as its reference.")
    if not args.tree:
        raise ContractException("compare needs --tree.")
    directory = _start_run(
        args, argv, cfg, [args.config, args.data, _tree_input(args.tree)],
        {"seed%d" % i: s for i, s in enumerate(seeds)},
    )
    records = _load_records(args.data, cfg)
    vocab = build_vocab(record_sentences(records))
    vocab.save(os.path.join(directory, "vocab.txt"))
    corpus = tokenize(records, vocab)
    train_set, test_set = split(corpus, cfg.corpus.split_ratio, cfg.corpus.split_seed)
    h = resolve_hierarchy(args.tree)
    _checked_languages(h, corpus)

    reports: Dict[str, List[EvalReport]] = {}
    parameters: Dict[str, int] = {}
    for variant in variants:
        for seed in seeds:
            run = os.path.join(directory, "%s-seed%d" % (variant.value, seed))
            os.makedirs(run, exist_ok=True)
            train_cfg = replace(cfg.train, arch=variant, seed=seed)
            g = _build_graph(h, cfg, vocab, variant, seed)
            parameters[variant.value] = parameter_count(g)
            fit(g, train_set, train_cfg, vocab, test=test_set, out_dir=run, vocab_hash=vocab.fingerprint())
            report = _evaluate(g, test_set, vocab, replace(cfg, train=train_cfg))
            codec.write_json(os.path.join(run, "eval.json"), report, eval_report_encoder)
            reports.setdefault(variant.value, []).append(report)
            if variant == Arch.TENC_ALL:
                _write_clustering(g, test_set, cfg, seed, run)

    comparison = compare(reports, parameters, Arch.TET.value, args.low_resource)
    codec.write_json(os.path.join(directory, "comparison.json"), comparison, comparison_report_encoder)
    table = render_table({v: s.wer for v, s in comparison.variants.items()}, languages_of(h), title="WER (%)")
    codec.write_text_atomically(os.path.join(directory, "table.txt"), table)
    log_metrics("compare", comparison, ComparisonReport)
    print(table, end="")
    print(directory)
    return EXIT_OK


def _write_clustering(g: ModelGraph, testset: ParallelCorpus, cfg: RunConfig, seed: int, run: str) -> None:
    sentences = [list(e.source) for e in testset.examples[: cfg.eval.clustering_sentences]]
    report = embedding_clustering(
        g, sentences, cfg.eval.clustering_layers, seed=seed, pad_margin=cfg.train.pad_margin
    )
    codec.write_json(os.path.join(run, "clustering.json"), report, clustering_report_encoder)
    for layer in report.layers:
        write_distance_csv(os.path.join(run, "distances-layer%d.csv" % layer.layer), layer)
        if layer.ratio is None:
            continue
        if layer is report.layers[-1] and layer.ratio >= 1.0:
            logger.warning(
                "Last reported layer %d does not group languages by family (distance ratio %.3f).",
                layer.layer, layer.ratio,
            )
        else:
            logger.info("Layer %d within/cross family distance ratio %.3f.", layer.layer, layer.ratio)


def cmd_rerun(args: argparse.Namespace, argv: Sequence[str]) -> int:
    recorded = mf.read_manifest(args.manifest)
    mf.check_inputs(recorded)
    logger.info("Re-running: tetree %s", " ".join(recorded.argv))
    return main(recorded.argv)


Handler = Callable[[argparse.Namespace, Sequence[str]], int]

_FAILURES: List[Tuple[Tuple[type, ...], int, str]] = [
    ((NumericException,), EXIT_NUMERIC, "numeric"),
    ((HoconParseException, ConfigException, ContractException, LookupException), EXIT_CONFIG, "config"),
    ((DataException, CheckpointException, JsDecodeException, OSError, UnicodeDecodeError), EXIT_DATA, "data"),
]


def _fail(code: int, kind: str, e: Exception) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": e.__class__.__name__, "message": str(e)}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(arguments)
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        handler: Handler = args.handler
        return handler(args, arguments)
    except Exception as e:
        for types, code, kind in _FAILURES:
            if isinstance(e, types):
                logger.debug("Command failed.", exc_info=True)
                return _fail(code, kind, e)
        raise


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
