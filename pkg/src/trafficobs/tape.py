"""Minimal reverse-mode tape for the chain-structured operator networks.

Every network op here has exactly one differentiable input and one output,
so the tape is a list of backward closures replayed in reverse. Parameter
gradients are accumulated into a dict keyed by canonical parameter names.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

Backward = Callable[[np.ndarray], np.ndarray]


class GradTape:
    def __init__(self, params: dict[str, np.ndarray]):
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.records: list[tuple[str, Backward]] = []
        self.visits: list[str] = []

    def push(self, name: str, backward: Backward) -> None:
        self.records.append((name, backward))

    def backward(self, grad_out) -> dict[str, np.ndarray]:
        g = grad_out
        for name, fn in reversed(self.records):
            self.visits.append(name)
            g = fn(g)
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient after {name}")
        self.records.clear()
        return self.grads
