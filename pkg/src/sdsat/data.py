"""Synthetic corpora and prompt sets for desk-scale experiments.

All sets are generated from a seed and are synthetic; none of them is drawn
from a real benchmark.
"""

from __future__ import annotations

import string

import numpy as np

_ALPHABET = string.ascii_lowercase + string.digits + "_=+;:(),.*"


def periodic_corpus(n_docs: int = 12, doc_len: int = 96, seed: int = 0) -> list[str]:
    """Each document repeats one short word of distinct characters; continuation is deterministic."""
    rng = np.random.default_rng(seed)
    docs, seen = [], set()
    while len(docs) < n_docs:
        period = int(rng.integers(3, 9))
        word = "".join(rng.choice(list(_ALPHABET), size=period, replace=False))
        if word[:2] in seen:
            continue
        seen.add(word[:2])
        docs.append((word * (doc_len // period + 1))[:doc_len])
    return docs


_NAMES = ["add", "sub", "mul", "scale", "clip", "norm", "step", "mix"]
_VARS = ["a", "b", "x", "y", "n"]
_OPS = ["+", "-", "*"]


def code_corpus(n_docs: int = 400, seed: int = 0) -> list[str]:
    """One-line code snippets: fixed templates with random names, operators and constants."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        funcs = []
        for _ in range(2):
            name = rng.choice(_NAMES)
            a, b = rng.choice(_VARS, size=2, replace=False)
            op = rng.choice(_OPS)
            c = int(rng.integers(0, 10))
            body = [f"{a} = {a} {op} {c}"]
            if rng.random() < 0.5:
                body.append(f"{b} = {b} {rng.choice(_OPS)} {a}")
            body.append(f"return {a} {op} {b}")
            funcs.append(f"def {name}({a}, {b}): " + "; ".join(body))
        docs.append(" ".join(funcs))
    return docs


def prompts_from(docs: list[str], n_chars: int, count: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(docs), size=count)
    return [docs[int(i)][:n_chars] for i in picks]


def markov_corpus(vocab: int, n_seqs: int = 200, length: int = 24, seed: int = 0,
                  concentration: float = 0.3) -> list[list[int]]:
    """Token sequences from a random sparse first-order Markov chain over ``vocab`` ids."""
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet([concentration] * vocab, size=vocab)
    seqs = []
    for _ in range(n_seqs):
        s = [int(rng.integers(vocab))]
        for _ in range(length - 1):
            s.append(int(rng.choice(vocab, p=trans[s[-1]])))
        seqs.append(s)
    return seqs
