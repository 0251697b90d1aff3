"""Reference implementations used as ground truth.

Nothing here imports the decoders. The only shared pieces are the model
forward and ``truncate_dist`` (the sampling distribution being checked).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch

from .model import DecoderLM, causal_mask
from .tree import SamplingConfig, truncate_dist


def _full_logits(model: DecoderLM, tokens: Sequence[int]) -> torch.Tensor:
    ids = torch.tensor([list(tokens)], dtype=torch.long)
    with torch.inference_mode():
        return model(ids, torch.arange(len(tokens)), causal_mask(len(tokens)), None)[0]


def _argmax(row: torch.Tensor) -> int:
    values = row.tolist()
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def generate_vanilla_greedy(
    model: DecoderLM,
    prompt: Sequence[int],
    max_new: int,
    stop_ids: Iterable[int] = (),
    recompute: bool = False,
) -> list[int]:
    """One token per forward pass. ``recompute=True`` re-runs the whole sequence without a cache."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) + max_new > model.config.max_seq:
        raise ValueError("prompt + max_new exceeds max_seq")
    stops = set(stop_ids)
    seq = list(prompt)
    out: list[int] = []
    cache = None if recompute else model.new_cache()
    feed = list(prompt)
    while len(out) < max_new:
        if recompute:
            row = _full_logits(model, seq)[-1]
        else:
            ids = torch.tensor([feed], dtype=torch.long)
            with torch.inference_mode():
                row = model(ids, cache=cache)[0, -1]
        tok = _argmax(row)
        out.append(tok)
        seq.append(tok)
        feed = [tok]
        if tok in stops:
            break
    return out


def generate_vanilla_nucleus(
    model: DecoderLM,
    prompt: Sequence[int],
    config: SamplingConfig,
    max_new: int,
    stop_ids: Iterable[int] = (),
) -> list[int]:
    """Plain nucleus sampling, one token per pass, RNG keyed by (seed, token index)."""
    if len(prompt) + max_new > model.config.max_seq:
        raise ValueError("prompt + max_new exceeds max_seq")
    stops = set(stop_ids)
    out: list[int] = []
    cache = model.new_cache()
    feed = list(prompt)
    for i in range(max_new):
        ids = torch.tensor([feed], dtype=torch.long)
        with torch.inference_mode():
            row = model(ids, cache=cache)[0, -1]
        dist = truncate_dist(row, config)
        rng = np.random.default_rng([config.seed, i])
        tok = int(rng.choice(len(dist), p=dist))
        out.append(tok)
        feed = [tok]
        if tok in stops:
            break
    return out


def branch_logits(model: DecoderLM, prefix: Sequence[int], branch: Sequence[int]) -> torch.Tensor:
    """Logits at the last prefix position and after each branch token, from one causal pass."""
    tokens = list(prefix) + list(branch)
    if len(tokens) > model.config.max_seq:
        raise ValueError("prefix + branch exceeds max_seq")
    return _full_logits(model, tokens)[len(prefix) - 1 :]


def nucleus_marginals(
    model: DecoderLM,
    prompt: Sequence[int],
    config: SamplingConfig,
    n_positions: int,
) -> list[np.ndarray]:
    """Exact marginal distribution of each of the first ``n_positions`` sampled tokens.

    Enumerates every continuation with non-zero probability, which stays small
    because ``truncate_dist`` keeps at most ``top_k`` tokens per step.
    """
    vocab = model.config.vocab_size
    marginals = [np.zeros(vocab) for _ in range(n_positions)]
    frontier = [((), 1.0)]
    for pos in range(n_positions):
        nxt = []
        for prefix, mass in frontier:
            dist = truncate_dist(branch_logits(model, prompt, prefix)[-1], config)
            for tok in np.flatnonzero(dist):
                p = mass * float(dist[tok])
                marginals[pos][tok] += p
                nxt.append((prefix + (int(tok),), p))
        frontier = nxt
    return marginals

