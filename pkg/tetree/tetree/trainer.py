"""
Training loop.

Within one step the languages present in the batch are visited one after another (alphabetically unless
`language_order` says otherwise). Each visit runs a forward pass along that language's path, back-propagates its
CTC loss, and immediately applies Adam to the parameters on that path, so shared nodes see several updates per
step. With `joint_accumulation` the gradients of all languages are summed first and every parameter is updated
once at the end of the step instead.

A non-finite loss aborts the step and restores the parameters and optimizer state it started from.
"""
import logging
import math
import os
import time
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import Optional
from typing import Set
from typing import Tuple

import numpy as np
from tqdm import tqdm

from tetree import autodiff as ad
from tetree import codec
from tetree.autodiff import Tensor
from tetree.checkpoint import save_checkpoint
from tetree.config import TrainConfig
from tetree.corpus import Batch
from tetree.corpus import BatchSampler
from tetree.corpus import ParallelCorpus
from tetree.corpus import Vocab
from tetree.ctc import CtcBatchResult
from tetree.ctc import ctc_batch_loss
from tetree.encoder import forward_path
from tetree.errors import NumericException
from tetree.evaluation import evaluate
from tetree.langtree import ModelGraph
from tetree.metrics import log_metrics
from tetree.optim import OptimizerState
from tetree.optim import adam_update

logger = logging.getLogger(__name__)


@dataclass
class StepResult:
    step: int
    losses: Dict[str, float]
    aborted: bool = False
    failed_languages: List[str] = field(default_factory=list)


@dataclass
class LanguageScore:
    loss: float
    wer: Optional[float] = None


@dataclass
class TrainRecord:
    step: int
    languages: Dict[str, LanguageScore]
    wall_ms: float
    aborted_steps: int = 0


train_record_encoder = codec.encoder_for(TrainRecord)
train_record_decoder = codec.decoder_for(TrainRecord)


@dataclass
class TrainingReport:
    records: List[TrainRecord]
    final_step: int
    aborted_steps: int
    checkpoint: Optional[str] = None


def language_order(g: ModelGraph, batch: Batch, cfg: TrainConfig) -> List[str]:
    present = {l for l in g.languages if l in batch.targets and batch.targets[l].present > 0}
    preferred = [l for l in (cfg.language_order or []) if l in present]
    return preferred + sorted(present - set(preferred))


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, (step + 1) / cfg.warmup_steps)


def shared_parameter_names(g: ModelGraph) -> Set[str]:
    """
        Parameters that lie on the paths of more than one language.
    """
    seen: Dict[str, int] = {}
    for l in g.languages:
        for name in g.path_parameters(l):
            seen[name] = seen.get(name, 0) + 1
    return {name for name, count in seen.items() if count > 1}


def _clip(params: Dict[str, Tensor], max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float(np.sum(p.ensure_grad().astype(np.float64) ** 2)) for p in params.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params.values():
            p.grad *= scale  # type: ignore


def _apply_updates(
    params: Dict[str, Tensor], opt: OptimizerState, cfg: TrainConfig, lr: float, shared: Set[str]
) -> None:
    _clip(params, cfg.clip_norm)
    for name, p in params.items():
        rate = lr * cfg.shared_lr_scale if name in shared else lr
        adam_update(p, p.ensure_grad(), opt.for_parameter(name, p), cfg, rate)


def _language_loss(g: ModelGraph, language: str, batch: Batch) -> Tuple[ad.Tape, CtcBatchResult]:
    with ad.Tape() as tape:
        log_probs = ad.log_softmax_rows(forward_path(g, language, batch))
        result = ctc_batch_loss(log_probs, batch.targets[language])
    return tape, result


def train_step(g: ModelGraph, batch: Batch, cfg: TrainConfig, opt: OptimizerState, step: int = 0) -> StepResult:
    all_params = g.parameters()
    saved_values = {name: p.values.copy() for name, p in all_params.items()}
    saved_optimizer = opt.snapshot()
    shared = shared_parameter_names(g) if cfg.shared_lr_scale != 1.0 else set()
    lr = learning_rate_at(cfg, step)

    for p in all_params.values():
        p.zero_grad()

    losses: Dict[str, float] = {}
    touched: Dict[str, Tensor] = {}
    for language in language_order(g, batch, cfg):
        params = g.path_parameters(language)
        if not cfg.joint_accumulation:
            for p in params.values():
                p.zero_grad()
        tape, result = _language_loss(g, language, batch)
        loss = result.loss.item()
        losses[language] = loss
        if not math.isfinite(loss):
            for name, p in all_params.items():
                p.values = saved_values[name]
                p.zero_grad()
            opt.moments = saved_optimizer.moments
            logger.warning("Aborting step %d: non-finite loss %s for language %s.", step, loss, language)
            return StepResult(step, losses, aborted=True, failed_languages=[language])
        ad.backward(result.loss, tape)
        if cfg.joint_accumulation:
            touched.update(params)
        else:
            _apply_updates(params, opt, cfg, lr, shared)

    if cfg.joint_accumulation and touched:
        _apply_updates(touched, opt, cfg, lr, shared)
    for p in all_params.values():
        p.zero_grad()
    return StepResult(step, losses)


def fit(
    g: ModelGraph,
    train: ParallelCorpus,
    cfg: TrainConfig,
    vocab: Vocab,
    test: Optional[ParallelCorpus] = None,
    out_dir: Optional[str] = None,
    optimizer: Optional[OptimizerState] = None,
    start_step: int = 0,
    vocab_hash: str = "",
) -> TrainingReport:
    """
    Trains for `cfg.steps` total steps, starting at `start_step` when resuming.

    :param test: Held-out examples scored with WER at every record; the first `cfg.eval_examples` are used.
    :param out_dir: Receives `train.jsonl`, periodic checkpoints and `final.tet`.
    """
    cfg.validate()
    opt = optimizer if optimizer is not None else OptimizerState()
    sampler = BatchSampler(train, g.languages, cfg.batch_size, cfg.seed, cfg.pad_margin, g.language_tokens or None)
    eval_set = ParallelCorpus(test.examples[: cfg.eval_examples], test.languages) if test is not None else None
    log_path = os.path.join(out_dir, "train.jsonl") if out_dir else None
    if log_path is not None and os.path.exists(log_path):
        os.remove(log_path)

    records: List[TrainRecord] = []
    interval: Dict[str, List[float]] = {}
    aborted_total = 0
    consecutive = 0
    started = time.perf_counter()

    for step in tqdm(range(start_step, cfg.steps), disable=not cfg.progress, desc="train", unit="step"):
        result = train_step(g, sampler.batch(step), cfg, opt, step)
        if result.aborted:
            aborted_total += 1
            consecutive += 1
            if consecutive > cfg.max_aborted_steps:
                raise NumericException(step, result.failed_languages)
            continue
        consecutive = 0
        for language, loss in result.losses.items():
            interval.setdefault(language, []).append(loss)

        done = step + 1
        if done == cfg.steps or (cfg.eval_every > 0 and done % cfg.eval_every == 0):
            record = _record(g, done, interval, eval_set, vocab, cfg, started, aborted_total)
            interval = {}
            records.append(record)
            log_metrics("train", record, TrainRecord)
            if log_path is not None:
                codec.append_jsonl(log_path, record, train_record_encoder)
        if out_dir and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done != cfg.steps:
            save_checkpoint(os.path.join(out_dir, "checkpoint-%06d.tet" % done), g, vocab_hash, opt, done)

    final_path: Optional[str] = None
    if out_dir:
        final_path = os.path.join(out_dir, "final.tet")
        save_checkpoint(final_path, g, vocab_hash, opt, max(cfg.steps, start_step))
    return TrainingReport(records, max(cfg.steps, start_step), aborted_total, final_path)


def _record(
    g: ModelGraph,
    step: int,
    interval: Dict[str, List[float]],
    eval_set: Optional[ParallelCorpus],
    vocab: Vocab,
    cfg: TrainConfig,
    started: float,
    aborted: int,
) -> TrainRecord:
    scores = {l: LanguageScore(float(np.mean(v))) for l, v in sorted(interval.items())}
    if eval_set is not None and len(eval_set) > 0:
        report = evaluate(g, eval_set, vocab, batch_size=cfg.batch_size, seed=cfg.seed, pad_margin=cfg.pad_margin)
        for language, result in report.languages.items():
            score = scores.setdefault(language, LanguageScore(float("nan")))
            score.wer = result.wer
    return TrainRecord(step, scores, (time.perf_counter() - started) * 1000.0, aborted)
