"""Seeded samplers for the benchmark distributions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

Sampler = Callable[[np.random.Generator, int], np.ndarray]

SAMPLERS: Dict[str, Sampler] = {
    "uniform": lambda rng, n: rng.uniform(-1.0, 1.0, n),
    "normal": lambda rng, n: rng.standard_normal(n),
    "logistic": lambda rng, n: rng.logistic(0.0, 1.0, n),
    "exponential": lambda rng, n: rng.exponential(1.0, n),
    "lognormal": lambda rng, n: rng.lognormal(0.0, 1.0, n),
}


def get_sampler(kind: str) -> Sampler:
    try:
        return SAMPLERS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown distribution {kind!r}; choose from {sorted(SAMPLERS)}") from None


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    n: int = 100_000
    seed: int = 0
    params: Dict[str, float] = field(default_factory=dict)

    def sample(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        kind = self.kind.lower()
        if self.params:
            p = self.params
            if kind == "uniform":
                return rng.uniform(p.get("low", -1.0), p.get("high", 1.0), self.n)
            if kind == "normal":
                return rng.normal(p.get("loc", 0.0), p.get("scale", 1.0), self.n)
            if kind == "logistic":
                return rng.logistic(p.get("loc", 0.0), p.get("scale", 1.0), self.n)
            if kind == "exponential":
                return rng.exponential(p.get("scale", 1.0), self.n)
            if kind == "lognormal":
                return rng.lognormal(p.get("mean", 0.0), p.get("sigma", 1.0), self.n)
        return get_sampler(kind)(rng, self.n)
