"""Replacing runs of standard tokens with adaptive tokens.

Positions are selected independently with probability ``rate``; every
selected position opens a window whose width is uniform on ``1..L``.
Windows are clipped to the sequence and overlapping windows merge, so the
mixed sequence always has the same length as the original.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

IGNORE = -100


@dataclass(frozen=True)
class MaskPlan:
    n: int
    L: int
    rate: float
    replacements: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for start, width in self.replacements:
            if not (0 <= start < self.n and 1 <= width <= self.L and start + width <= self.n):
                raise ValueError(f"window ({start}, {width}) outside sequence of length {self.n}")

    def covered(self) -> np.ndarray:
        cov = np.zeros(self.n, dtype=bool)
        for start, width in self.replacements:
            cov[start : start + width] = True
        return cov

    def runs(self) -> list[tuple[int, int]]:
        """Merged (start, length) runs of replaced positions."""
        cov = np.concatenate([[False], self.covered(), [False]])
        edges = np.flatnonzero(np.diff(cov.astype(np.int8)))
        return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]

    @property
    def replaced_count(self) -> int:
        return int(self.covered().sum())


def plan_masks(n: int, L: int, rate: float, rng: np.random.Generator) -> MaskPlan:
    if n < 1 or L < 1:
        raise ValueError("n and L must be >= 1")
    if not 0 < rate < 1:
        raise ValueError("rate must lie in (0, 1)")
    starts = np.flatnonzero(rng.random(n) < rate)
    widths = rng.integers(1, L + 1, size=len(starts))
    widths = np.minimum(widths, n - starts)
    return MaskPlan(n, L, rate, tuple((int(s), int(w)) for s, w in zip(starts, widths)))


def coverage_probability(L: int, rate: float) -> float:
    """Closed-form probability that an interior position ends up replaced."""
    miss = 1.0
    for d in range(L):
        miss *= 1.0 - rate * (L - d) / L
    return 1.0 - miss


@dataclass
class MixedSeq:
    m: list[int]
    labels: list[int]
    m_mask: list[int]


def apply_masks(y: Sequence[int], plan: MaskPlan, adaptive_ids: Sequence[int],
                diverse: bool = False) -> MixedSeq:
    """Swap covered inputs for adaptive ids; labels stay the original next tokens.

    Identical mode uses ``adaptive_ids[0]`` everywhere. Diverse mode fills each
    merged run with ``adaptive_ids[0], adaptive_ids[1], ...``; a merged run
    longer than the id list repeats the last id.
    """
    if plan.n != len(y):
        raise ValueError(f"plan for length {plan.n} applied to sequence of length {len(y)}")
    if not adaptive_ids:
        raise ValueError("need at least one adaptive id")
    if diverse and plan.L > len(adaptive_ids):
        raise ValueError(
            f"diverse mode needs at least L={plan.L} adaptive ids, got {len(adaptive_ids)}"
        )
    m = list(y)
    mask = [0] * len(y)
    for start, length in plan.runs():
        for j in range(length):
            tok = adaptive_ids[min(j, len(adaptive_ids) - 1)] if diverse else adaptive_ids[0]
            m[start + j] = tok
            mask[start + j] = 1
    labels = list(y[1:]) + [IGNORE]
    return MixedSeq(m, labels, mask)
