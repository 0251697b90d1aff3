"""Prefix/suffix/middle rearrangement of training documents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tokenizer import EOS, MID, PRE, SUF, ByteTokenizer

PLAIN = "plain"
PSM = "psm"
SPM = "spm"


@dataclass(frozen=True)
class InfillSample:
    doc: str
    format: str
    prefix_end: int = 0
    middle_end: int = 0

    def __post_init__(self):
        if self.format == PLAIN:
            if (self.prefix_end, self.middle_end) != (0, 0):
                raise ValueError("plain samples have no split")
        elif self.format in (PSM, SPM):
            if not 0 <= self.prefix_end <= self.middle_end <= len(self.doc):
                raise ValueError("split offsets must be ordered within the document")
        else:
            raise ValueError(f"unknown infill format {self.format!r}")

    @property
    def segments(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        """(start, end) character offsets of prefix, middle and suffix."""
        if self.format == PLAIN:
            return (0, len(self.doc)), (len(self.doc), len(self.doc)), (len(self.doc), len(self.doc))
        n = len(self.doc)
        return (0, self.prefix_end), (self.prefix_end, self.middle_end), (self.middle_end, n)

    def pieces(self) -> tuple[str, str, str]:
        return tuple(self.doc[a:b] for a, b in self.segments)

    def to_tokens(self, tokenizer: ByteTokenizer) -> list[int]:
        prefix, middle, suffix = (tokenizer.encode(s) for s in self.pieces())
        if self.format == PLAIN:
            return prefix
        if self.format == PSM:
            return [PRE, *prefix, SUF, *suffix, MID, *middle]
        return [PRE, SUF, *suffix, MID, *prefix, *middle]


def make_infill(doc: str, rng: np.random.Generator, fim_rate: float = 0.5) -> InfillSample:
    """Plain with probability ``1 - fim_rate``; otherwise PSM or SPM with equal odds.

    Two distinct split points are drawn uniformly from the interior character
    offsets, so all three segments are non-empty.
    """
    if len(doc) < 3:
        raise ValueError(f"document needs at least 3 characters, got {len(doc)}")
    if rng.random() >= fim_rate:
        return InfillSample(doc, PLAIN)
    fmt = PSM if rng.random() < 0.5 else SPM
    i, j = sorted(int(x) for x in rng.choice(np.arange(1, len(doc)), size=2, replace=False))
    return InfillSample(doc, fmt, i, j)


def reassemble(tokens, tokenizer: ByteTokenizer) -> str:
    """Recover the original document from an emitted token sequence."""
    toks = list(tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    if not toks or toks[0] != PRE:
        return tokenizer.decode(toks, show_special=False)
    if toks[1] == SUF:
        mid = toks.index(MID)
        suffix, rest = toks[2:mid], toks[mid + 1 :]
        return tokenizer.decode(rest + suffix, show_special=False)
    suf = toks.index(SUF)
    mid = toks.index(MID)
    prefix, suffix, middle = toks[1:suf], toks[suf + 1 : mid], toks[mid + 1 :]
    return tokenizer.decode(prefix + middle + suffix, show_special=False)
