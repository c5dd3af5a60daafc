"""
Connectionist temporal classification in log space.

The target y_1..y_U is extended with blanks to z = (b, y_1, b, ..., y_U, b) of length S = 2U + 1. alpha[t, s]
is the log-probability of all partial alignments ending in z_s at frame t and beta[t, s] of all completions from
z_s at frame t; both include the emission at t. The loss is -log P(y | x) and its gradient with respect to the
frame log-probabilities is minus the state occupation, summed over the states that emit each symbol.

Log-zero is a large negative sentinel rather than -inf so that sums of impossible paths stay finite.
"""
from dataclasses import dataclass
from typing import List
from typing import Optional
from typing import Sequence
from typing import TypeVar

import numpy as np

from tetree import autodiff as ad
from tetree.autodiff import Tensor
from tetree.corpus import BLANK_ID
from tetree.corpus import LanguageTargets
from tetree.corpus import required_frames
from tetree.errors import ContractException

LOG_ZERO = -1e30

T = TypeVar("T")


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    return np.maximum(m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m)), LOG_ZERO)


def _shift_right(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, LOG_ZERO)
    out[:, k:] = x[:, :-k]
    return out


def _shift_left(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, LOG_ZERO)
    out[:, :-k] = x[:, k:]
    return out


@dataclass
class AlignmentLattice:
    """
        Forward and backward variables for a batch of rows sharing T frames. Arrays are indexed [t, b, s].
    """
    log_probs: np.ndarray  # [B x T x V]
    extended: np.ndarray  # [B x S]
    lengths: np.ndarray  # [B]
    valid: np.ndarray  # [B x S]
    skip: np.ndarray  # [B x S]
    emissions: np.ndarray  # [T x B x S]
    alpha: np.ndarray  # [T x B x S]
    log_likelihood: np.ndarray  # [B]
    feasible: np.ndarray  # [B]
    beta: Optional[np.ndarray] = None

    @property
    def frames(self) -> int:
        return int(self.log_probs.shape[1])

    def losses(self) -> np.ndarray:
        return np.where(self.feasible, -self.log_likelihood, np.inf)


def extend_target(target: Sequence[int], blank_id: int = BLANK_ID) -> List[int]:
    extended = [blank_id]
    for token in target:
        extended.extend([token, blank_id])
    return extended


def build_lattice(
    log_probs: np.ndarray, targets: np.ndarray, lengths: np.ndarray, blank_id: int = BLANK_ID
) -> AlignmentLattice:
    """
    Runs the forward recursion for every row.

    :param log_probs: Frame log-probabilities of shape [B x T x V]; -inf entries are clamped to log-zero.
    :param targets: Target ids [B x U_max]; entries at or beyond a row's length are ignored.
    """
    lp = np.maximum(np.asarray(log_probs, dtype=np.float64), LOG_ZERO)
    if lp.ndim != 3:
        raise ContractException("CTC expects [B x T x V] log-probabilities but received %s." % str(lp.shape))
    batch, frames, vocab = lp.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(batch, -1)
    lengths = np.asarray(lengths, dtype=np.int64).reshape(batch)
    if frames == 0:
        raise ContractException("CTC requires at least one frame.")
    if not 0 <= blank_id < vocab:
        raise ContractException("Blank id %d lies outside the vocabulary of size %d." % (blank_id, vocab))
    if (lengths > targets.shape[1]).any() or (lengths < 0).any():
        raise ContractException("Target lengths exceed the target matrix width %d." % targets.shape[1])

    states = 2 * targets.shape[1] + 1
    positions = np.arange(states)
    valid = positions[None, :] < (2 * lengths[:, None] + 1)
    extended = np.full((batch, states), blank_id, dtype=np.int64)
    extended[:, 1::2] = np.where(np.arange(targets.shape[1])[None, :] < lengths[:, None], targets, blank_id)
    if ((extended < 0) | (extended >= vocab)).any():
        raise ContractException("Target ids must lie in [0, %d)." % vocab)
    if (extended[:, 1::2][np.arange(targets.shape[1])[None, :] < lengths[:, None]] == blank_id).any():
        raise ContractException("Targets must not contain the blank id %d." % blank_id)

    skip = np.zeros((batch, states), dtype=bool)
    skip[:, 2:] = (extended[:, 2:] != blank_id) & (extended[:, 2:] != extended[:, :-2])
    skip &= valid

    emissions = np.take_along_axis(lp, np.broadcast_to(extended[:, None, :], (batch, frames, states)), axis=2)
    emissions = np.where(valid[:, None, :], emissions, LOG_ZERO).transpose(1, 0, 2)

    alpha = np.full((frames, batch, states), LOG_ZERO)
    alpha[0, :, 0] = emissions[0, :, 0]
    if states > 1:
        alpha[0, :, 1] = np.where(lengths > 0, emissions[0, :, 1], LOG_ZERO)
    for t in range(1, frames):
        prev = alpha[t - 1]
        from_skip = np.where(skip, _shift_right(prev, 2), LOG_ZERO) if states > 2 else np.full_like(prev, LOG_ZERO)
        stay_or_step = _shift_right(prev, 1) if states > 1 else np.full_like(prev, LOG_ZERO)
        alpha[t] = np.maximum(_lse3(prev, stay_or_step, from_skip) + emissions[t], LOG_ZERO)

    rows = np.arange(batch)
    last = alpha[frames - 1]
    end_blank = last[rows, 2 * lengths]
    end_token = np.where(lengths > 0, last[rows, np.maximum(2 * lengths - 1, 0)], LOG_ZERO)
    log_likelihood = np.logaddexp(end_blank, end_token)

    minimum = np.asarray(
        [required_frames(targets[b, : lengths[b]].tolist()) for b in range(batch)], dtype=np.int64
    )
    return AlignmentLattice(
        log_probs=lp,
        extended=extended,
        lengths=lengths,
        valid=valid,
        skip=skip,
        emissions=emissions,
        alpha=alpha,
        log_likelihood=log_likelihood,
        feasible=minimum <= frames,
    )


def _backward_variables(lattice: AlignmentLattice) -> np.ndarray:
    frames = lattice.frames
    batch, states = lattice.extended.shape
    rows = np.arange(batch)
    e = lattice.emissions
    beta = np.full((frames, batch, states), LOG_ZERO)
    beta[frames - 1, rows, 2 * lattice.lengths] = e[frames - 1, rows, 2 * lattice.lengths]
    has_token = lattice.lengths > 0
    token_end = np.maximum(2 * lattice.lengths - 1, 0)
    beta[frames - 1, rows[has_token], token_end[has_token]] = e[frames - 1, rows[has_token], token_end[has_token]]
    skip_ahead = np.zeros_like(lattice.skip)
    if states > 2:
        skip_ahead[:, :-2] = lattice.skip[:, 2:]
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1]
        from_skip = np.where(skip_ahead, _shift_left(nxt, 2), LOG_ZERO) if states > 2 else np.full_like(nxt, LOG_ZERO)
        step = _shift_left(nxt, 1) if states > 1 else np.full_like(nxt, LOG_ZERO)
        beta[t] = np.maximum(_lse3(nxt, step, from_skip) + e[t], LOG_ZERO)
    return beta


def lattice_grad(lattice: AlignmentLattice) -> np.ndarray:
    """
        d(-log P)/d(log_probs) for every row, shape [B x T x V]. Infeasible rows get a zero gradient.
    """
    if lattice.beta is None:
        lattice.beta = _backward_variables(lattice)
    batch, frames, vocab = lattice.log_probs.shape
    log_occupation = lattice.alpha + lattice.beta - lattice.emissions - lattice.log_likelihood[None, :, None]
    occupation = np.where(lattice.valid[None, :, :], np.exp(np.minimum(log_occupation, 0.0)), 0.0)
    occupation = np.where(lattice.feasible[None, :, None], occupation, 0.0)
    grad = np.zeros((batch, frames, vocab))
    b_idx = np.arange(batch)[:, None, None]
    t_idx = np.arange(frames)[None, :, None]
    s_idx = lattice.extended[:, None, :]
    np.add.at(grad, (b_idx, t_idx, s_idx), -occupation.transpose(1, 0, 2))
    return grad


@dataclass
class CtcResult:
    loss: Tensor
    feasible: bool
    lattice: AlignmentLattice


def _as_tensor(log_probs: object) -> Tensor:
    return log_probs if isinstance(log_probs, Tensor) else Tensor(np.asarray(log_probs))


def ctc_loss(log_probs: object, target: Sequence[int], blank_id: int = BLANK_ID) -> CtcResult:
    """
        -log P(target | frames) for one sequence of [T x V] log-probabilities. An infeasible target
        (T shorter than the target plus its repeats) yields +inf with `feasible` False and a zero gradient.
    """
    lp = _as_tensor(log_probs)
    if len(lp.shape) != 2:
        raise ContractException("ctc_loss expects [T x V] log-probabilities but received %s." % str(lp.shape))
    target_row = np.asarray([list(target)], dtype=np.int64).reshape(1, len(target))
    lattice = build_lattice(lp.values[None, :, :], target_row, np.asarray([len(target)]), blank_id)
    value = lattice.losses()[0]
    dtype = lp.dtype

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return ((g * lattice_grad(lattice)[0]).astype(dtype),)

    loss = ad.apply("ctc_loss", (lp,), np.asarray(value, dtype=dtype), backward)
    return CtcResult(loss, bool(lattice.feasible[0]), lattice)


def ctc_grad(lattice: AlignmentLattice) -> np.ndarray:
    """
        Gradient of a single-row lattice with respect to its [T x V] log-probabilities.
    """
    return lattice_grad(lattice)[0]


@dataclass
class CtcBatchResult:
    loss: Tensor  # mean over unmasked rows
    per_row: np.ndarray  # [B], +inf for infeasible rows, nan for masked rows
    feasible: np.ndarray  # [B]
    mask: np.ndarray  # [B]

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.loss.item()))


def ctc_batch_loss(log_probs: Tensor, targets: LanguageTargets, blank_id: int = BLANK_ID) -> CtcBatchResult:
    """
        Mean CTC loss over the rows whose mask is set. Masked rows contribute neither loss nor gradient.
        The mean is +inf if any unmasked row is infeasible.
    """
    if len(log_probs.shape) != 3 or log_probs.shape[0] != targets.mask.shape[0]:
        raise ContractException("ctc_batch_loss expects [B x T x V] log-probabilities matching the target rows.")
    mask = np.asarray(targets.mask, dtype=bool)
    lengths = np.where(mask, targets.lengths, 0)
    tokens = targets.tokens if targets.tokens.shape[1] > 0 else np.zeros((mask.shape[0], 0), dtype=np.int64)
    lattice = build_lattice(log_probs.values, tokens, lengths, blank_id)
    per_row = np.where(mask, lattice.losses(), np.nan)
    count = int(mask.sum())
    if count == 0:
        raise ContractException("ctc_batch_loss needs at least one unmasked row.")
    value = float(np.sum(per_row[mask]) / count)
    dtype = log_probs.dtype

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        rows = np.where(mask & lattice.feasible, 1.0 / count, 0.0)
        return ((g * lattice_grad(lattice) * rows[:, None, None]).astype(dtype),)

    loss = ad.apply("ctc_loss", (log_probs,), np.asarray(value, dtype=dtype), backward)
    return CtcBatchResult(loss, per_row, lattice.feasible & mask, mask)


def greedy_decode(log_probs: np.ndarray) -> List[int]:
    """
        Frame-wise argmax of a [T x V] matrix; ties resolve to the lowest id.
    """
    return [int(i) for i in np.argmax(np.asarray(log_probs), axis=-1)]


def collapse(raw: Sequence[T], blank: T) -> List[T]:
    """
        Merges runs of equal symbols, then drops blanks.
    """
    out: List[T] = []
    previous: Optional[T] = None
    for i, symbol in enumerate(raw):
        if (i == 0 or symbol != previous) and symbol != blank:
            out.append(symbol)
        previous = symbol
    return out


def decode_rows(log_probs: np.ndarray, blank_id: int = BLANK_ID) -> List[List[int]]:
    return [collapse(greedy_decode(row), blank_id) for row in np.asarray(log_probs)]
