"""Small decoder-only transformer with an external, rollback-capable KV cache.

The model knows nothing about adaptive tokens: they are ordinary rows in the
embedding table, reserved at the top of the vocabulary. Everything that gives
them meaning lives in the decoders and the trainer.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 264
    n_adaptive: int = 4
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    max_seq: int = 256
    d_ff: int = 0  # 0 -> 4 * d_model
    seed: int = 0
    init_std: float = 0.02
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if not 1 <= self.n_adaptive < self.vocab_size:
            raise ConfigError(f"n_adaptive must be in [1, vocab_size), got {self.n_adaptive}")
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.max_seq < 1:
            raise ConfigError("n_layers, n_heads, d_model and max_seq must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.d_ff < 0:
            raise ConfigError("d_ff must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def adaptive_ids(self) -> list[int]:
        return list(range(self.vocab_size - self.n_adaptive, self.vocab_size))

    @property
    def n_standard(self) -> int:
        return self.vocab_size - self.n_adaptive


class KvCache:
    """Per-layer key/value storage for one decoding session.

    Slots are preallocated and grown by doubling. ``rollback`` only moves the
    length marker, so retained entries are never touched.
    """

    def __init__(self, config: ModelConfig, batch: int = 1, capacity: Optional[int] = None,
                 dtype: torch.dtype = torch.float32):
        self.n_layers = config.n_layers
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.batch = batch
        self.dtype = dtype
        cap = capacity or config.max_seq
        shape = (batch, self.n_heads, cap, self.head_dim)
        self.keys = [torch.zeros(shape, dtype=dtype) for _ in range(self.n_layers)]
        self.values = [torch.zeros(shape, dtype=dtype) for _ in range(self.n_layers)]
        self.len = 0

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[2]

    def __len__(self) -> int:
        return self.len

    def reserve(self, extra: int) -> None:
        need = self.len + extra
        if need <= self.capacity:
            return
        cap = self.capacity
        while cap < need:
            cap *= 2
        for store in (self.keys, self.values):
            for i, t in enumerate(store):
                grown = torch.zeros((*t.shape[:2], cap, t.shape[3]), dtype=t.dtype)
                grown[:, :, : self.len] = t[:, :, : self.len]
                store[i] = grown

    def write(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Store new entries after the current length and return the full key/value view.

        The length marker is advanced by :meth:`commit`, once every layer is written.
        """
        t = k.shape[2]
        self.keys[layer][:, :, self.len : self.len + t] = k
        self.values[layer][:, :, self.len : self.len + t] = v
        end = self.len + t
        return self.keys[layer][:, :, :end], self.values[layer][:, :, :end]

    def commit(self, n: int) -> None:
        self.len += n

    def rollback(self, new_len: int) -> "KvCache":
        if new_len < 0 or new_len > self.len:
            raise ValueError(f"cannot roll back cache of length {self.len} to {new_len}")
        self.len = new_len
        return self

    def gather(self, src: Sequence[int], dst_start: int) -> "KvCache":
        """Move entries at ``src`` slots to ``dst_start, dst_start + 1, ...`` and truncate there.

        Used after tree verification to pack the accepted branch contiguously.
        """
        src = list(src)
        if dst_start > self.len or any(s < dst_start or s >= self.len for s in src):
            raise ValueError("gather sources must lie in [dst_start, len)")
        if src:
            idx = torch.tensor(src, dtype=torch.long)
            for store in (self.keys, self.values):
                for t in store:
                    t[:, :, dst_start : dst_start + len(src)] = t[:, :, idx]
        self.len = dst_start + len(src)
        return self

    def clone(self) -> "KvCache":
        other = object.__new__(KvCache)
        other.__dict__.update(self.__dict__)
        other.keys = [t.clone() for t in self.keys]
        other.values = [t.clone() for t in self.values]
        return other


def rollback(cache: KvCache, new_len: int) -> KvCache:
    return cache.rollback(new_len)


def causal_mask(n_new: int, past: int = 0) -> torch.Tensor:
    """Boolean (n_new, past + n_new) mask: query i sees every cached key and new keys <= i."""
    cols = torch.arange(past + n_new)
    rows = torch.arange(n_new).unsqueeze(1) + past
    return cols.unsqueeze(0) <= rows


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, x, mask, cache: Optional[KvCache], layer: int):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        if cache is not None:
            k, v = cache.write(layer, k, v)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = Attention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.fc = nn.Linear(config.d_model, config.ff_width)
        self.out = nn.Linear(config.ff_width, config.d_model)

    def forward(self, x, mask, cache, layer):
        x = x + self.attn(self.ln1(x), mask, cache, layer)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class DecoderLM(nn.Module):
    """Pre-norm GPT-style decoder with learned absolute positions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        if config.tie_embeddings:
            self.lm_head = None
        else:
            self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def new_cache(self, batch: int = 1, capacity: Optional[int] = None) -> KvCache:
        return KvCache(self.config, batch=batch, capacity=capacity, dtype=self.dtype)

    def forward(
        self,
        tokens: torch.Tensor,
        positions: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        cache: Optional[KvCache] = None,
    ) -> torch.Tensor:
        """Logits of shape (B, T, vocab_size) for ``tokens`` of shape (B, T).

        ``mask`` is boolean with shape (T, past + T) or (B, T, past + T), where
        ``past`` is the cache length (0 without a cache). Defaults to causal.
        ``positions`` defaults to ``past, past + 1, ...``.
        """
        cfg = self.config
        b, t = tokens.shape
        past = cache.len if cache is not None else 0
        if positions is None:
            positions = torch.arange(past, past + t)
        positions = torch.as_tensor(positions, dtype=torch.long)
        if positions.shape[-1] != t:
            raise ValueError(f"{positions.shape[-1]} positions for {t} tokens")
        if t and (int(positions.max()) >= cfg.max_seq or int(positions.min()) < 0):
            raise ValueError(f"positions must lie in [0, {cfg.max_seq})")
        if t and (int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        if mask is None:
            mask = causal_mask(t, past)
        else:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if tuple(mask.shape[-2:]) != (t, past + t):
                raise ValueError(
                    f"mask shape {tuple(mask.shape)} does not match ({t}, {past + t})"
                )
            if not bool(torch.diagonal(mask[..., past:], dim1=-2, dim2=-1).all()):
                raise ValueError("every query row must attend to its own position")
        if cache is not None:
            if cache.batch != b:
                raise ValueError(f"cache batch {cache.batch} != input batch {b}")
            cache.reserve(t)

        x = self.tok_emb(tokens) + self.pos_emb(positions)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, cache, i)
        x = self.ln_f(x)
        if cache is not None:
            cache.commit(t)
        weight = self.tok_emb.weight if self.lm_head is None else self.lm_head.weight
        return x @ weight.t()


ModelParams = DecoderLM


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> DecoderLM:
    """Build a model whose parameters depend only on ``(config, config.seed)``.

    Every weight matrix, the whole embedding table included, is drawn from one
    generator in declaration order, so adaptive rows get the same scheme and
    stream as standard rows.
    """
    model = DecoderLM(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * config.init_std)
    model.eval()
    return model.to(dtype)


def forward(
    model: DecoderLM,
    tokens: Union[Sequence[int], torch.Tensor],
    positions: Optional[Sequence[int]] = None,
    mask: Optional[torch.Tensor] = None,
    cache: Optional[KvCache] = None,
) -> torch.Tensor:
    """Single-sequence inference forward. Returns logits of shape (len(tokens), vocab)."""
    ids = torch.as_tensor(list(tokens) if not torch.is_tensor(tokens) else tokens,
                          dtype=torch.long).reshape(1, -1)
    pos = None if positions is None else torch.as_tensor(list(positions), dtype=torch.long)
    with torch.inference_mode():
        return model(ids, pos, mask, cache)[0]


def greedy_token(logits_row: torch.Tensor) -> int:
    """Argmax with ties broken toward the lowest id."""
    # torch.argmax returns the first maximal index on CPU
    return int(torch.argmax(logits_row))


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"SDSATCKP"
_VERSION = 1
_HEADER = struct.Struct("<8sI7IQd?")


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def param_checksum(model: DecoderLM) -> int:
    """64-bit checksum over float32 little-endian parameter bytes in declaration order."""
    h = hashlib.blake2b(digest_size=8)
    for p in model.parameters():
        h.update(_tensor_bytes(p))
    return int.from_bytes(h.digest(), "little")


def save_checkpoint(model: DecoderLM, path: Union[str, Path]) -> None:
    cfg = model.config
    body = bytearray(
        _HEADER.pack(
            _MAGIC, _VERSION, cfg.vocab_size, cfg.n_adaptive, cfg.n_layers, cfg.n_heads,
            cfg.d_model, cfg.max_seq, cfg.d_ff, cfg.seed, cfg.init_std, cfg.tie_embeddings,
        )
    )
    params = list(model.parameters())
    body += struct.pack("<I", len(params))
    for p in params:
        body += struct.pack("<I", p.dim())
        body += struct.pack(f"<{p.dim()}I", *p.shape)
        body += _tensor_bytes(p)
    digest = hashlib.blake2b(bytes(body), digest_size=8).digest()
    Path(path).write_bytes(bytes(body) + digest)


def load_checkpoint(path: Union[str, Path]) -> DecoderLM:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 12:
        raise ValueError(f"{path}: truncated checkpoint")
    body, trailer = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != trailer:
        raise ValueError(f"{path}: checksum mismatch")
    magic, version, *fields = _HEADER.unpack_from(body, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    names = ["vocab_size", "n_adaptive", "n_layers", "n_heads", "d_model", "max_seq",
             "d_ff", "seed", "init_std", "tie_embeddings"]
    config = ModelConfig(**dict(zip(names, fields)))
    model = DecoderLM(config)
    off = _HEADER.size
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = list(model.parameters())
    if count != len(params):
        raise ValueError(f"{path}: expected {len(params)} tensors, found {count}")
    with torch.no_grad():
        for p in params:
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            if tuple(shape) != tuple(p.shape):
                raise ValueError(f"{path}: tensor shape {shape} != {tuple(p.shape)}")
            n = p.numel()
            data = np.frombuffer(body, dtype="<f4", count=n, offset=off).astype(np.float32)
            off += 4 * n
            p.copy_(torch.from_numpy(data).reshape(p.shape))
    model.eval()
    return model


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
