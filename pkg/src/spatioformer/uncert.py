"""Monte Carlo dropout uncertainty: coefficient of variation of stochastic predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ChipBatch
from .errors import ConfigError
from .model import _as_batch, predict_batch
from .numerics import RngStream


@dataclass(frozen=True)
class UncertaintyConfig:
    n: int = 100
    mc_dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"MC dropout needs n >= 2 repetitions, got {self.n}")
        if not 0.0 < self.mc_dropout_rate < 1.0:
            raise ConfigError(f"MC dropout rate must lie in (0, 1), got {self.mc_dropout_rate}")


@dataclass
class McResult:
    deterministic: float
    mean: float
    epsilon: float  # NaN when the mean is zero
    undefined: bool = False


def coefficient_of_variation(preds) -> tuple[float, float, bool]:
    """(mean, sample std / mean, undefined flag). Sums are compensated, so order does not matter."""
    preds = [float(p) for p in preds]
    n = len(preds)
    if n < 2:
        raise ConfigError("need at least two predictions")
    mean = math.fsum(preds) / n
    std = math.sqrt(math.fsum((p - mean) ** 2 for p in preds) / (n - 1))
    if mean == 0.0:
        return mean, float("nan"), True
    return mean, std / mean, False


def mc_predictions(params, cfg, batch: ChipBatch, ucfg: UncertaintyConfig):
    """(deterministic (N,), MC predictions (N, n)). Each chip gets its own seeded stream."""
    det = predict_batch(params, cfg, batch).values
    reps = np.empty((len(batch), ucfg.n))
    for i in range(len(batch)):
        rows = batch.subset(np.zeros(ucfg.n, dtype=int) + i)
        rng = RngStream(ucfg.seed, 0x3C)
        reps[i] = predict_batch(params, cfg, rows, rng=rng, dropout_rate=ucfg.mc_dropout_rate).values
    return det, reps


def mc_uncertainty(params, cfg, chip, ucfg: UncertaintyConfig = UncertaintyConfig()) -> McResult:
    """Run ``ucfg.n`` forwards with dropout active at ``ucfg.mc_dropout_rate``.

    Batch norm (CNN) stays in inference mode; only the dropout sites go stochastic.
    The n repetitions run as one batch of copies, each row drawing its own masks.
    """
    det, reps = mc_predictions(params, cfg, _as_batch(chip), ucfg)
    mean, eps, bad = coefficient_of_variation(reps[0])
    return McResult(float(det[0]), mean, eps, bad)


def mc_uncertainty_many(params, cfg, chips, ucfg: UncertaintyConfig = UncertaintyConfig()) -> list[McResult]:
    det, reps = mc_predictions(params, cfg, _as_batch(chips), ucfg)
    out = []
    for d, row in zip(det, reps):
        mean, eps, bad = coefficient_of_variation(row)
        out.append(McResult(float(d), mean, eps, bad))
    return out
