"""Nucleus-sampling variant: adaptive-token drafts organized as a tree.

Each loop:

1. ``pending + k adaptive tokens`` in one pass. The last pending position is
   sampled for the next token; adaptive position d ranks candidates for tree
   depth d.
2. The next token and the flattened tree in one pass under a tree attention
   mask, so every node sees only the committed prefix, its ancestors and
   itself.
3. Walk from the root sampling from the target distribution at each step and
   descend while the sample matches a child. The first unmatched sample is
   committed as a correction, so each loop commits at least two tokens and
   every committed token is drawn from the target's own nucleus distribution.

Candidates at a given depth are the same for every parent: step 1 conditions
only on the adaptive tokens, never on sibling choices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .greedy import IDENTICAL, GenStats, adaptive_block
from .model import DecoderLM, KvCache, forward

DEFAULT_NODE_BUDGET = 256


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_k: int = 10
    top_p: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 disables it)")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0


def truncate_dist(logits, config: SamplingConfig) -> np.ndarray:
    """Temperature, then top-k, then top-p on the renormalized top-k mass.

    Returns a float64 distribution over the full vocabulary with zeros outside
    the kept set. Ties are ordered by lowest id; temperature 0 is a point mass
    on the argmax.
    """
    z = logits.detach().double().cpu().numpy() if torch.is_tensor(logits) else np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any() or np.isposinf(z).any():
        raise ValueError("logits must be finite (or -inf for excluded tokens)")
    if not np.isfinite(z).any():
        raise ValueError("all logits are -inf")
    out = np.zeros_like(z)
    if config.temperature == 0:
        out[int(np.argmax(z))] = 1.0
        return out
    z = z / config.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    if config.top_k:
        order = order[: config.top_k]
    kept = p[order] / p[order].sum()
    if config.top_p < 1:
        cum = np.cumsum(kept)
        n = int(np.searchsorted(cum, config.top_p - 1e-12)) + 1
        order, kept = order[:n], kept[:n]
    out[order] = kept / kept.sum()
    return out


def session_rng(seed: int, loop: int, step: int) -> np.random.Generator:
    """Counter-keyed generator: sampling is reproducible and independent of tree size."""
    return np.random.default_rng([seed, loop, step])


def sample_from(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw restricted to the support, one uniform per call."""
    nz = np.flatnonzero(dist)
    cum = np.cumsum(dist[nz])
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return int(nz[min(i, len(nz) - 1)])


@dataclass(frozen=True)
class BranchProfile:
    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w < 1 for w in self.widths):
            raise ValueError("every branch width must be >= 1")

    @classmethod
    def default(cls, k: int) -> "BranchProfile":
        return cls(tuple([3, 2, 2] + [1] * max(0, k - 3))[:k])

    @classmethod
    def chain(cls, k: int) -> "BranchProfile":
        return cls((1,) * k)

    @property
    def depth(self) -> int:
        return len(self.widths)

    def node_count(self, depth: Optional[int] = None) -> int:
        total, layer = 0, 1
        for w in self.widths[: self.depth if depth is None else depth]:
            layer *= w
            total += layer
        return total

    def truncated(self, depth: int) -> "BranchProfile":
        return BranchProfile(self.widths[:depth])


@dataclass
class DraftTree:
    """Flattened candidate tree, parents always listed before their children.

    ``parents[i] == -1`` marks a depth-0 node (child of the token committed in
    draft step 1).
    """

    tokens: list[int] = field(default_factory=list)
    parents: list[int] = field(default_factory=list)
    depths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def add(self, token: int, parent: int) -> int:
        if parent >= len(self.tokens):
            raise ValueError("parent must precede child")
        self.tokens.append(int(token))
        self.parents.append(parent)
        self.depths.append(0 if parent < 0 else self.depths[parent] + 1)
        return len(self.tokens) - 1

    def children(self, node: int) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == node]

    def ancestors(self, node: int) -> list[int]:
        chain = []
        p = self.parents[node]
        while p >= 0:
            chain.append(p)
            p = self.parents[p]
        return chain[::-1]

    def branch(self, node: int) -> list[int]:
        """Tokens from the depth-0 ancestor down to ``node`` inclusive."""
        return [self.tokens[i] for i in self.ancestors(node)] + [self.tokens[node]]

    @property
    def max_depth(self) -> int:
        return max(self.depths) + 1 if self.depths else 0


def top_candidates(dist: np.ndarray, width: int) -> list[int]:
    return [int(i) for i in np.argsort(-np.asarray(dist), kind="stable")[:width]]


def build_tree(step1_dists: Sequence[np.ndarray], profile: BranchProfile,
               node_budget: int = DEFAULT_NODE_BUDGET) -> DraftTree:
    if len(step1_dists) != profile.depth:
        raise ValueError(f"{len(step1_dists)} distributions for a depth-{profile.depth} profile")
    if profile.node_count() > node_budget:
        raise ValueError(f"profile needs {profile.node_count()} nodes, budget is {node_budget}")
    tree = DraftTree()
    layer = [-1]
    for dist, width in zip(step1_dists, profile.widths):
        cands = top_candidates(dist, width)
        layer = [tree.add(tok, parent) for parent in layer for tok in cands]
    return tree


def build_tree_mask(tree: DraftTree, prefix_len: int) -> tuple[torch.Tensor, list[int]]:
    """Mask of shape (len(tree), prefix_len + len(tree)) and per-node position ids."""
    n = len(tree)
    mask = torch.zeros((n, prefix_len + n), dtype=torch.bool)
    mask[:, :prefix_len] = True
    for i in range(n):
        mask[i, prefix_len + i] = True
        for a in tree.ancestors(i):
            mask[i, prefix_len + a] = True
    return mask, [prefix_len + d for d in tree.depths]


def tree_forward(model: DecoderLM, cache: KvCache, root_token: int,
                 tree: DraftTree) -> torch.Tensor:
    """One pass over ``[root_token] + tree`` with the root at the next free position.

    Row 0 holds the logits after the root; row ``1 + i`` those after node ``i``.
    """
    n = cache.len
    node_mask, node_pos = build_tree_mask(tree, n + 1)
    mask = torch.zeros((1 + len(tree), n + 1 + len(tree)), dtype=torch.bool)
    mask[0, : n + 1] = True
    mask[1:] = node_mask
    return forward(model, [root_token, *tree.tokens], [n, *node_pos], mask, cache)


def verify_tree(
    model: DecoderLM,
    cache: KvCache,
    tree: DraftTree,
    step2_logits: torch.Tensor,
    accepted_root_token: int,
    config: SamplingConfig,
    loop: int = 0,
) -> tuple[list[int], int, int]:
    """Sample-then-match walk down the tree.

    ``cache`` must hold the prefix, then the root, then every tree node, as
    left by :func:`tree_forward`. KV entries of the accepted branch are packed
    right after the root and everything else is discarded.

    Returns ``(accepted_branch, correction_token, rollback_len)``.
    """
    root_slot = cache.len - len(tree) - 1
    node, row, path = -1, 0, []
    step = 1
    while True:
        dist = truncate_dist(step2_logits[row], config)
        tok = sample_from(dist, session_rng(config.seed, loop, step))
        step += 1
        match = next((c for c in tree.children(node) if tree.tokens[c] == tok), None)
        if match is None:
            break
        path.append(match)
        node, row = match, match + 1
    cache.gather([root_slot + 1 + i for i in path], root_slot + 1)
    return [tree.tokens[i] for i in path], tok, cache.len


def generate_nucleus(
    model: DecoderLM,
    prompt: Sequence[int],
    k: int,
    profile: Optional[BranchProfile],
    config: SamplingConfig,
    max_new: int,
    stop_ids: Iterable[int] = (),
    mode: str = IDENTICAL,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> tuple[list[int], GenStats]:
    """Tree-drafted nucleus sampling; every loop costs two forward passes."""
    cfg = model.config
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) + max_new > cfg.max_seq:
        raise ValueError(f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq={cfg.max_seq}")
    profile = profile or BranchProfile.default(k)
    if profile.depth != k:
        raise ValueError(f"profile depth {profile.depth} != k={k}")
    if profile.node_count() > node_budget:
        raise ValueError(f"profile needs {profile.node_count()} nodes, budget is {node_budget}")
    adaptive_block(model, k, mode)
    stops = frozenset(stop_ids)
    stats = GenStats(k=k)
    scoring = SamplingConfig(temperature=config.temperature or 1.0, top_k=0, top_p=1.0)

    committed = list(prompt)
    out: list[int] = []
    pending = list(prompt)
    cache = model.new_cache(capacity=cfg.max_seq + profile.node_count() + 1)
    t_start = time.perf_counter()
    loop = 0
    while len(out) < max_new:
        t0 = time.perf_counter()
        k_eff = max(0, min(k, cfg.max_seq - len(committed) - 1))
        start = cache.len
        logits = forward(model, pending + adaptive_block(model, k_eff, mode), cache=cache)
        p = len(pending)
        cache.rollback(start + p)
        root = sample_from(truncate_dist(logits[p - 1], config), session_rng(config.seed, loop, 0))
        dists = [truncate_dist(logits[p + d], scoring) for d in range(k_eff)]
        tree = build_tree(dists, profile.truncated(k_eff), node_budget)

        step2 = tree_forward(model, cache, root, tree)
        branch, correction, _ = verify_tree(model, cache, tree, step2, root, config, loop)

        new = [root, *branch, correction]
        n_matched = len(branch)
        new = new[: max_new - len(out)]
        for i, t in enumerate(new):
            if t in stops:
                new = new[: i + 1]
                break
        out.extend(new)
        committed.extend(new)
        pending = [new[-1]]
        stats.record_loop(len(new), k_eff, n_matched, time.perf_counter() - t0)
        loop += 1
        if new[-1] in stops:
            break
    stats.wall_time = time.perf_counter() - t_start
    return out, stats
