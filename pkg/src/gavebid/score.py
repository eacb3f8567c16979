"""CPA-penalized scores and score-based return-to-go."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class Variant(str, enum.Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"


_VARIANT_GAMMA = {Variant.S2: 2.0, Variant.S3: 5.0}


@dataclass(frozen=True)
class ScoreConfig:
    """CPA limit, penalty exponent and score variant.

    ``gamma`` is pinned by the variant (S2 -> 2, S3 -> 5); for S1 it is kept
    only for bookkeeping since the penalty factor is identically 1.
    """

    cpa_limit: float
    variant: Variant = Variant.S2
    gamma: float | None = None

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        if not self.cpa_limit > 0:
            raise ValueError(f"cpa_limit must be positive, got {self.cpa_limit}")
        gamma = self.gamma
        if variant in _VARIANT_GAMMA:
            expected = _VARIANT_GAMMA[variant]
            if gamma is not None and gamma != expected:
                raise ValueError(f"variant {variant.value} requires gamma={expected}, got {gamma}")
            gamma = expected
        elif gamma is None:
            gamma = 2.0
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        object.__setattr__(self, "gamma", float(gamma))

    @classmethod
    def for_variant(cls, variant: Variant | str, cpa_limit: float) -> "ScoreConfig":
        return cls(cpa_limit=cpa_limit, variant=Variant(variant))

    def to_dict(self) -> dict:
        return {"cpa_limit": self.cpa_limit, "variant": self.variant.value, "gamma": self.gamma}


@dataclass(frozen=True)
class PrefixStats:
    cum_cost: float
    cum_value: float


def compute_cpa(stats: PrefixStats) -> float:
    cost, value = stats.cum_cost, stats.cum_value
    if value == 0:
        return math.inf if cost > 0 else 0.0
    return cost / value


def penalty(cpa: float, config: ScoreConfig) -> float:
    """``min((C / cpa) ** gamma, 1)``; S1 has no penalty."""
    if config.variant is Variant.S1:
        return 1.0
    if cpa <= config.cpa_limit:
        return 1.0
    if math.isinf(cpa):
        return 0.0
    return min((config.cpa_limit / cpa) ** config.gamma, 1.0)


def score_at(stats: PrefixStats, config: ScoreConfig) -> float:
    if config.variant is Variant.S1:
        return float(stats.cum_value)
    if stats.cum_value == 0:
        return 0.0
    return penalty(compute_cpa(stats), config) * float(stats.cum_value)


def score_arrays(cum_cost, cum_value, config: ScoreConfig) -> np.ndarray:
    """Vectorized ``score_at`` over matching arrays of prefix sums."""
    cost = np.asarray(cum_cost, dtype=np.float64)
    value = np.asarray(cum_value, dtype=np.float64)
    if config.variant is Variant.S1:
        return value.copy()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(cost > 0, config.cpa_limit * value / np.where(cost > 0, cost, 1.0), np.inf)
        factor = np.minimum(np.power(ratio, config.gamma), 1.0)
    return np.where(value > 0, factor * value, 0.0)


def rtg_from_scores(scores: Sequence[float]) -> np.ndarray:
    """``r_t = S_T - S_{t-1}`` with ``S_0 = 0``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty episode has no return-to-go")
    previous = np.concatenate(([0.0], s[:-1]))
    return s[-1] - previous


def rtg_sequence(step_stats: Sequence[PrefixStats], config: ScoreConfig) -> np.ndarray:
    if len(step_stats) == 0:
        raise ValueError("empty episode has no return-to-go")
    scores = [score_at(s, config) for s in step_stats]
    return rtg_from_scores(scores)
