"""Cosine noise schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import RejectedInput


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 100
    offset: float = 0.008
    max_beta: float = 0.999

    def __post_init__(self):
        if self.T < 2:
            raise RejectedInput("schedule needs at least 2 steps")

    @property
    def betas(self) -> np.ndarray:
        def f(u):
            return math.cos((u + self.offset) / (1 + self.offset) * math.pi / 2) ** 2

        b = [min(1 - f((i + 1) / self.T) / f(i / self.T), self.max_beta) for i in range(self.T)]
        return np.array(b)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative signal fraction; index t is the state after t + 1 noising steps."""
        return np.cumprod(self.alphas)

    def check(self) -> None:
        ab = self.alpha_bar
        if not (ab[0] >= 0.999 and ab[-1] <= 0.01 and np.all(np.diff(ab) < 0) and np.all(ab > 0)):
            raise RejectedInput(f"invalid schedule for T={self.T}")
