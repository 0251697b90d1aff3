"""Two-step-draft-then-verify greedy decoding with adaptive tokens.

One loop is two forward passes:

1. ``pending`` tokens followed by ``k`` adaptive tokens. The last pending
   position gives the next token; each adaptive position gives a draft for
   one more token ahead.
2. The next token followed by the ``k`` drafts. Position 0 gives the token
   after next from fully verified context; each draft position re-drafts the
   token after it.

Verification walks the drafts as a chain and stops at the first mismatch, so
the committed tokens are exactly what vanilla greedy decoding would produce.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch

from .model import DecoderLM, KvCache, forward, greedy_token

IDENTICAL = "identical"
DIVERSE = "diverse"


def adaptive_block(model: DecoderLM, k: int, mode: str = IDENTICAL) -> list[int]:
    """Adaptive ids to append for ``k`` drafts.

    Identical mode repeats the first adaptive id and works for any ``k``;
    diverse mode uses the j-th id for the j-th draft and needs ``k <= n_adaptive``.
    """
    ids = model.config.adaptive_ids
    if mode == IDENTICAL:
        return [ids[0]] * k
    if mode == DIVERSE:
        if k > len(ids):
            raise ValueError(f"diverse adaptive tokens support k <= {len(ids)}, got k={k}")
        return ids[:k]
    raise ValueError(f"unknown adaptive-token mode {mode!r}")


@dataclass
class DraftState:
    accepted: list[int]
    step1_next: int
    step1_drafts: list[int]
    step2_next: int
    step2_drafts: list[int]

    def __post_init__(self):
        if len(self.step1_drafts) != len(self.step2_drafts):
            raise ValueError("step-1 and step-2 draft lists must have equal length")

    @property
    def k(self) -> int:
        return len(self.step1_drafts)


@dataclass
class GenStats:
    k: int
    loops: int = 0
    forward_passes: int = 0
    new_tokens: int = 0
    wall_time: float = 0.0
    accepted_per_loop: list[int] = field(default_factory=list)
    drafts_per_loop: list[int] = field(default_factory=list)
    accepted_drafts_per_loop: list[int] = field(default_factory=list)
    accept_count_per_index: list[int] = field(default_factory=list)
    loop_times: list[float] = field(default_factory=list)
    trace: Optional[list] = None

    def __post_init__(self):
        if not self.accept_count_per_index:
            self.accept_count_per_index = [0] * self.k

    def record_loop(self, committed: int, n_drafts: int, n_accepted: int, seconds: float,
                    passes: int = 2) -> None:
        self.loops += 1
        self.forward_passes += passes
        self.new_tokens += committed
        self.accepted_per_loop.append(committed)
        self.drafts_per_loop.append(n_drafts)
        self.accepted_drafts_per_loop.append(n_accepted)
        for j in range(n_accepted):
            self.accept_count_per_index[j] += 1
        self.loop_times.append(seconds)

    @property
    def accept_rate(self) -> Optional[float]:
        """Mean over loops of accepted drafts / drafts offered; None when no drafts were offered."""
        rates = [a / d for a, d in zip(self.accepted_drafts_per_loop, self.drafts_per_loop) if d]
        return sum(rates) / len(rates) if rates else None

    @property
    def accept_rate_by_index(self) -> list[float]:
        offered = [sum(1 for d in self.drafts_per_loop if d > j) for j in range(self.k)]
        return [c / o if o else 0.0 for c, o in zip(self.accept_count_per_index, offered)]

    @property
    def tokens_per_loop(self) -> float:
        return self.new_tokens / self.loops if self.loops else 0.0


def draft_step1(model: DecoderLM, cache: KvCache, pending: Sequence[int], k: int,
                mode: str = IDENTICAL) -> tuple[int, list[int]]:
    """Forward ``pending + k adaptive tokens``; keep KV for ``pending`` only."""
    if not pending:
        raise ValueError("draft step 1 needs at least one pending token")
    start = cache.len
    if start + len(pending) + k > model.config.max_seq:
        raise ValueError(
            f"{len(pending)} pending + {k} adaptive tokens overflow max_seq={model.config.max_seq}"
        )
    logits = forward(model, list(pending) + adaptive_block(model, k, mode), cache=cache)
    p = len(pending)
    next_token = greedy_token(logits[p - 1])
    drafts = [greedy_token(logits[p + j]) for j in range(k)]
    cache.rollback(start + p)
    return next_token, drafts


def draft_step2(model: DecoderLM, cache: KvCache, next_token: int,
                drafts: Sequence[int]) -> tuple[int, list[int]]:
    """Forward ``[next_token] + drafts``; every written KV entry stays until verification."""
    if cache.len + 1 + len(drafts) > model.config.max_seq:
        raise ValueError(f"draft step 2 overflows max_seq={model.config.max_seq}")
    logits = forward(model, [next_token, *drafts], cache=cache)
    return greedy_token(logits[0]), [greedy_token(logits[j + 1]) for j in range(len(drafts))]


def verify_greedy(state: DraftState) -> tuple[list[int], int]:
    """Accept ``[y_{n+1}, y_{n+2}]`` then extend the chain while each step-1 draft matches.

    Draft j (0-based) from step 1 is compared against the token accepted just
    before it; on a match the step-2 output at that draft's position is accepted.
    Returns the new tokens and the cache length whose KV entries were computed
    from inputs that all agree with the accepted sequence.
    """
    accepted = [state.step1_next, state.step2_next]
    prev = state.step2_next
    matched = 0
    for d1, d2 in zip(state.step1_drafts, state.step2_drafts):
        if d1 != prev:
            break
        accepted.append(d2)
        prev = d2
        matched += 1
    return accepted, len(state.accepted) + 1 + matched


def _truncate(block: list[int], remaining: int, stop_ids: frozenset) -> tuple[list[int], bool]:
    block = block[:remaining]
    for i, t in enumerate(block):
        if t in stop_ids:
            return block[: i + 1], True
    return block, len(block) == remaining


def generate_greedy(
    model: DecoderLM,
    prompt: Sequence[int],
    k: int,
    max_new: int,
    stop_ids: Iterable[int] = (),
    mode: str = IDENTICAL,
    trace: bool = False,
) -> tuple[list[int], GenStats]:
    """Generate up to ``max_new`` tokens; output equals vanilla greedy decoding.

    Returns the continuation (prompt excluded) and per-loop accounting.
    """
    cfg = model.config
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if k < 0:
        raise ValueError("k must be non-negative")
    if len(prompt) + max_new > cfg.max_seq:
        raise ValueError(f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq={cfg.max_seq}")
    if mode == DIVERSE:
        adaptive_block(model, k, mode)
    stops = frozenset(stop_ids)
    stats = GenStats(k=k, trace=[] if trace else None)
    verify = globals()["verify_greedy"]  # looked up per call so tests can swap it

    committed = list(prompt)
    out: list[int] = []
    pending = list(prompt)
    cache = model.new_cache()
    t_start = time.perf_counter()
    done = max_new == 0
    while not done:
        t0 = time.perf_counter()
        k_eff = max(0, min(k, cfg.max_seq - len(committed) - 1))
        y1, drafts1 = draft_step1(model, cache, pending, k_eff, mode)
        y2, drafts2 = draft_step2(model, cache, y1, drafts1)
        state = DraftState(committed.copy() if trace else committed, y1, drafts1, y2, drafts2)
        new, rollback_len = verify(state)
        cache.rollback(rollback_len)
        n_matched = len(new) - 2
        new, done = _truncate(new, max_new - len(out), stops)
        out.extend(new)
        committed.extend(new)
        pending = [new[-1]]
        stats.record_loop(len(new), k_eff, n_matched, time.perf_counter() - t0)
        if trace:
            stats.trace.append((state, list(new)))
    stats.wall_time = time.perf_counter() - t_start
    return out, stats
