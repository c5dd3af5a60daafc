import itertools
from typing import List
from typing import Sequence

import numpy as np
import pytest

from tests.tetree import common
from tetree import autodiff as ad
from tetree.autodiff import Tensor
from tetree.corpus import LanguageTargets
from tetree.ctc import collapse
from tetree.ctc import ctc_batch_loss
from tetree.ctc import ctc_grad
from tetree.ctc import ctc_loss
from tetree.ctc import decode_rows
from tetree.ctc import greedy_decode
from tetree.errors import ContractException


def _oracle(log_probs: np.ndarray, target: Sequence[int]) -> float:
    frames, vocab = log_probs.shape
    scores: List[float] = []
    for path in itertools.product(range(vocab), repeat=frames):
        if collapse(list(path), 0) == list(target):
            scores.append(float(sum(log_probs[t, s] for t, s in enumerate(path))))
    return -float(np.logaddexp.reduce(scores)) if scores else float("inf")


def _random_log_probs(rng: np.random.Generator, frames: int, vocab: int) -> np.ndarray:
    logits = rng.normal(size=(frames, vocab)) * 2.0
    return logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)


def test_certain_path_has_zero_loss_and_unit_gradient() -> None:
    log_probs = np.log(np.asarray([[0.0, 1.0, 0.0]]))
    result = ctc_loss(log_probs, [1])
    assert result.feasible
    assert abs(result.loss.item()) < 1e-12
    grad = ctc_grad(result.lattice)
    assert grad.shape == (1, 3)
    np.testing.assert_allclose(grad, [[0.0, -1.0, 0.0]], atol=1e-12)


def test_empty_target_uses_the_blank_path_only() -> None:
    result = ctc_loss(common.uniform_log_probs(2, 2), [])
    assert abs(result.loss.item() + np.log(0.25)) < 1e-12
    grad = ctc_grad(ctc_loss(common.uniform_log_probs(2, 3), []).lattice)
    np.testing.assert_allclose(grad[:, 1], grad[:, 2])
    np.testing.assert_allclose(grad[:, 0], [-1.0, -1.0])


def test_matches_path_enumeration() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        frames = int(rng.integers(1, 7))
        vocab = int(rng.integers(2, 4))
        target = [int(x) for x in rng.integers(1, vocab, size=int(rng.integers(0, 4)))]
        log_probs = _random_log_probs(rng, frames, vocab)
        expected = _oracle(log_probs, target)
        result = ctc_loss(log_probs, target)
        if np.isinf(expected):
            assert not result.feasible
            assert np.isinf(result.loss.item())
        else:
            assert result.feasible
            assert abs(result.loss.item() - expected) < 1e-10


def test_infeasible_target_is_infinite_with_zero_gradient() -> None:
    result = ctc_loss(common.uniform_log_probs(2, 3), [1, 1])
    assert not result.feasible
    assert result.loss.item() == float("inf")
    np.testing.assert_array_equal(ctc_grad(result.lattice), np.zeros((2, 3)))


def test_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True, name="logits")
    report = ad.finite_diff_check(
        lambda: ctc_loss(ad.log_softmax_rows(logits), [1, 2]).loss, [logits], tol=1e-6, floor=1e-3
    )
    assert report.passed, report


def test_rejects_blank_in_target() -> None:
    with pytest.raises(ContractException):
        ctc_loss(common.uniform_log_probs(3, 3), [0])
    with pytest.raises(ContractException):
        ctc_loss(common.uniform_log_probs(3, 3), [3])


def test_batch_loss_averages_unmasked_rows() -> None:
    rng = np.random.default_rng(5)
    log_probs = np.stack([_random_log_probs(rng, 4, 3) for _ in range(3)])
    targets = LanguageTargets(
        tokens=np.asarray([[1, 2], [2, 1], [1, 1]]),
        lengths=np.asarray([2, 1, 2]),
        mask=np.asarray([True, True, False]),
    )
    result = ctc_batch_loss(Tensor(log_probs), targets)
    expected = [ctc_loss(log_probs[0], [1, 2]).loss.item(), ctc_loss(log_probs[1], [2]).loss.item()]
    assert abs(result.loss.item() - np.mean(expected)) < 1e-12
    assert np.isnan(result.per_row[2])
    assert result.finite

    infeasible = LanguageTargets(np.asarray([[1, 1, 1]]), np.asarray([3]), np.asarray([True]))
    bad = ctc_batch_loss(Tensor(log_probs[:1]), infeasible)
    assert not bad.finite
    with pytest.raises(ContractException):
        ctc_batch_loss(Tensor(log_probs[:1]), LanguageTargets(np.asarray([[1]]), np.asarray([1]), np.asarray([False])))


def test_batch_loss_gradient_ignores_masked_rows() -> None:
    rng = np.random.default_rng(6)
    logits = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    targets = LanguageTargets(np.asarray([[1, 2], [2, 2]]), np.asarray([2, 2]), np.asarray([True, False]))
    with ad.Tape() as tape:
        loss = ctc_batch_loss(ad.log_softmax_rows(logits), targets).loss
    ad.backward(loss, tape)
    np.testing.assert_array_equal(logits.grad[1], np.zeros((4, 3)))
    assert np.abs(logits.grad[0]).sum() > 0


def test_collapse_reproduces_table_examples() -> None:
    assert "".join(collapse(list("BB-O-NN---JO-UUR"), "-")) == "BONJOUR"
    assert "".join(collapse(list("C-OM-E-T ÇA VVA-"), "-")) == "COMET ÇA VA"
    assert collapse([], 0) == []
    assert collapse([1, 1, 1], 0) == [1]
    assert collapse([1, 0, 1], 0) == [1, 1]


def test_greedy_decode() -> None:
    raw = "BB-O-NN---JO-UUR"
    symbols = sorted(set(raw) - {"-"})
    ids = {"-": 0, **{s: i + 1 for i, s in enumerate(symbols)}}
    log_probs = np.log(np.full((len(raw), len(ids)), 0.05))
    for t, c in enumerate(raw):
        log_probs[t, ids[c]] = np.log(0.6)
    decoded = greedy_decode(log_probs)
    back = {i: s for s, i in ids.items()}
    assert "".join(back[i] for i in decoded) == raw
    assert greedy_decode(np.log(np.asarray([[0.5, 0.5]]))) == [0]
    assert decode_rows(log_probs[None, :, :])[0] == [ids[c] for c in "BONJOUR"]


def test_probabilities_are_bounded_and_sum_to_one_over_targets() -> None:
    rng = np.random.default_rng(11)
    for _ in range(50):
        frames = int(rng.integers(1, 6))
        vocab = int(rng.integers(2, 5))
        target = [int(x) for x in rng.integers(1, vocab, size=int(rng.integers(0, 4)))]
        result = ctc_loss(_random_log_probs(rng, frames, vocab), target)
        assert result.loss.item() >= -1e-12

    log_probs = _random_log_probs(rng, 3, 3)
    total = 0.0
    for length in range(4):
        for target in itertools.product([1, 2], repeat=length):
            result = ctc_loss(log_probs, list(target))
            if result.feasible:
                total += float(np.exp(-result.loss.item()))
    assert abs(total - 1.0) < 1e-10


def test_collapse_is_idempotent() -> None:
    rng = np.random.default_rng(12)
    for _ in range(200):
        raw = [int(x) for x in rng.integers(0, 4, size=int(rng.integers(0, 12)))]
        once = collapse(raw, 0)
        assert collapse(once, 0) == once
        assert 0 not in once


def test_frame_gradients_sum_to_zero_over_logits() -> None:
    rng = np.random.default_rng(13)
    for target in ([1, 2], [2, 2], [], [3, 1, 3]):
        logits = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        with ad.Tape() as tape:
            result = ctc_loss(ad.log_softmax_rows(logits), target)
        assert result.feasible
        np.testing.assert_allclose(ctc_grad(result.lattice).sum(axis=1), -1.0, rtol=0, atol=1e-10)
        ad.backward(result.loss, tape)
        np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, rtol=0, atol=1e-10)
