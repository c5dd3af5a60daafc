"""
Adam with bias correction and decoupled weight decay, with per-parameter step counters.

A parameter shared by several languages is stepped once per language that updates it, so its counter runs ahead
of the counters of a single language's leaf head.
"""
import copy
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import Optional

import numpy as np

from tetree.autodiff import Tensor
from tetree.config import TrainConfig
from tetree.errors import DimensionException


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class OptimizerState:
    moments: Dict[str, MomentState] = field(default_factory=dict)

    def for_parameter(self, name: str, param: Tensor) -> MomentState:
        state = self.moments.get(name)
        if state is None:
            state = MomentState(np.zeros_like(param.values), np.zeros_like(param.values))
            self.moments[name] = state
        return state

    def step_of(self, name: str) -> int:
        state = self.moments.get(name)
        return 0 if state is None else state.step

    def snapshot(self) -> "OptimizerState":
        return copy.deepcopy(self)


def adam_update(
    param: Tensor, grad: np.ndarray, state: MomentState, cfg: TrainConfig, lr: Optional[float] = None
) -> None:
    """
        In-place update:
            t += 1; m = b1 m + (1 - b1) g; v = b2 v + (1 - b2) g^2
            p -= lr * wd * p
            p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    if grad.shape != param.values.shape:
        raise DimensionException("Gradient does not match its parameter", grad.shape, param.shape)
    rate = cfg.learning_rate if lr is None else lr
    state.step += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.step)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.step)
    if cfg.weight_decay:
        param.values -= (rate * cfg.weight_decay * param.values).astype(param.dtype)
    param.values -= (rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(param.dtype)
