"""Poisson batch sampler: per-step batches by independent inclusion."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplerConfig:
    """Parameters for the Poisson sampler.

    n: number of available datapoints, d: target (expected) batch size,
    T: number of batches to draw.
    """

    n: int
    d: int
    T: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        if not (0 <= self.d <= self.n):
            raise ValueError(f"d must satisfy 0 <= d <= n, got d={self.d}, n={self.n}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")


@dataclass(frozen=True)
class BatchSequence:
    """Ordered sequence of index batches. Indices are 1-based, ascending within a batch."""

    config: SamplerConfig
    batches: tuple

    def __post_init__(self):
        if len(self.batches) != self.config.T:
            raise ValueError("batch count must equal T")

    def __len__(self):
        return len(self.batches)

    def __getitem__(self, t):
        return self.batches[t]

    def to_json(self) -> str:
        cfg = self.config
        return json.dumps(
            {
                "seed": cfg.seed,
                "n": cfg.n,
                "d": cfg.d,
                "T": cfg.T,
                "batches": [list(b) for b in self.batches],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "BatchSequence":
        obj = json.loads(text)
        cfg = SamplerConfig(n=obj["n"], d=obj["d"], T=obj["T"], seed=obj["seed"])
        return cls(config=cfg, batches=tuple(tuple(b) for b in obj["batches"]))


def poisson_sample(config: SamplerConfig) -> BatchSequence:
    """Draw T batches; each index i in {1..n} joins batch t independently with
    probability d/n. Deterministic given the seed; per-batch draws use a child
    RNG keyed by (seed, t) so batches are decoupled from one another.
    """
    if config.n == 0:
        if config.d != 0:
            raise ValueError("d must be 0 when n is 0")
        return BatchSequence(config, tuple(() for _ in range(config.T)))

    p = config.d / config.n
    batches = []
    for t in range(1, config.T + 1):
        rng = np.random.default_rng([config.seed, t])
        mask = rng.random(config.n) < p
        idx = np.flatnonzero(mask) + 1  # 1-based
        batches.append(tuple(int(i) for i in idx))
    return BatchSequence(config, tuple(batches))
