from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from temde.errors import DimensionError
from temde.tensor import Tensor


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float) -> None:
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        p -= (lr * g).astype(p.dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(self.state.t)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.t = int(arrays["adam.t"])
        n = len(self.params)
        if "adam.m.0" in arrays:
            self.state.m = [arrays[f"adam.m.{i}"].copy() for i in range(n)]
            self.state.v = [arrays[f"adam.v.{i}"].copy() for i in range(n)]
