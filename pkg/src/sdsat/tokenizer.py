"""Fixed byte-level tokenizer used by the toy corpora and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

N_BYTES = 256
EOS = 256
PRE = 257
MID = 258
SUF = 259
N_SPECIAL = 4

_SPECIAL_NAMES = {EOS: "<EOS>", PRE: "<PRE>", MID: "<MID>", SUF: "<SUF>"}


@dataclass(frozen=True)
class ByteTokenizer:
    """UTF-8 bytes map to ids 0..255, followed by four specials; adaptive ids sit on top."""

    n_adaptive: int = 4

    @property
    def vocab_size(self) -> int:
        return N_BYTES + N_SPECIAL + self.n_adaptive

    @property
    def adaptive_ids(self) -> list[int]:
        base = N_BYTES + N_SPECIAL
        return list(range(base, base + self.n_adaptive))

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids, show_special: bool = True) -> str:
        out = bytearray()
        parts: list[str] = []
        for i in ids:
            if i < N_BYTES:
                out.append(i)
                continue
            parts.append(out.decode("utf-8", errors="replace"))
            out.clear()
            if show_special:
                parts.append(_SPECIAL_NAMES.get(i, f"<A{i - N_BYTES - N_SPECIAL}>"))
        parts.append(out.decode("utf-8", errors="replace"))
        return "".join(parts)
