"""Toy-scale training with adaptive-token masking.

Each step draws one batch of corpus windows ``Y`` and its masked copy ``M``.
``improved`` mode trains on both streams with the two-stream loss; ``basic``
mode trains on ``M`` alone with plain cross-entropy over every position;
``plain`` mode is ordinary language-model training on ``Y``.
The sample stream depends only on ``(seed, step, row)``, so both modes see
identical data for the same seed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..model import DecoderLM
from ..tokenizer import EOS, ByteTokenizer
from .infill import make_infill
from .losses import LossReport, loss_basic, loss_improved
from .masking import IGNORE, apply_masks, plan_masks

log = logging.getLogger(__name__)

BASIC = "basic"
IMPROVED = "improved"
PLAIN = "plain"  # standard next-token loss on the pure stream; used for pretraining


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    seq_len: int = 128
    L: int = 5
    rate: float = 0.1
    w: float = 1.0
    mode: str = IMPROVED
    adaptive: str = "identical"
    lr: float = 3e-3
    final_lr_ratio: float = 0.2  # 5e-5 -> 1e-5 in the full-scale recipe
    warmup_frac: float = 0.2
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in (BASIC, IMPROVED, PLAIN):
            raise ValueError(f"mode must be one of {BASIC!r}, {IMPROVED!r}, {PLAIN!r}")
        if self.adaptive not in ("identical", "diverse"):
            raise ValueError("adaptive must be 'identical' or 'diverse'")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("steps >= 0, batch_size >= 1 and seq_len >= 2 required")


class Corpus:
    """Documents to sample training windows from.

    Text documents go through the byte tokenizer and, with probability
    ``fim_rate``, through infilling rearrangement; each gets a trailing EOS.
    Pre-tokenized sequences are used as they are.
    """

    def __init__(self, sequences: Optional[Sequence[Sequence[int]]] = None,
                 texts: Optional[Sequence[str]] = None,
                 tokenizer: Optional[ByteTokenizer] = None,
                 fim_rate: float = 0.0, pad_id: int = 0):
        if (sequences is None) == (texts is None):
            raise ValueError("give exactly one of sequences or texts")
        if texts is not None and tokenizer is None:
            raise ValueError("text corpora need a tokenizer")
        self.sequences = [list(s) for s in sequences] if sequences is not None else None
        self.texts = list(texts) if texts is not None else None
        self.tokenizer = tokenizer
        self.fim_rate = fim_rate
        self.pad_id = EOS if tokenizer is not None else pad_id
        if len(self) == 0:
            raise ValueError("empty corpus")

    @classmethod
    def from_file(cls, path, tokenizer: ByteTokenizer, fim_rate: float = 0.0) -> "Corpus":
        texts = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return cls(texts=texts, tokenizer=tokenizer, fim_rate=fim_rate)

    def __len__(self) -> int:
        return len(self.sequences if self.sequences is not None else self.texts)

    def sample(self, rng: np.random.Generator, seq_len: int) -> list[int]:
        i = int(rng.integers(len(self)))
        if self.sequences is not None:
            toks = self.sequences[i]
        else:
            doc = self.texts[i]
            if self.fim_rate > 0 and len(doc) >= 3:
                toks = make_infill(doc, rng, self.fim_rate).to_tokens(self.tokenizer) + [EOS]
            else:
                toks = self.tokenizer.encode(doc) + [EOS]
        if len(toks) > seq_len:
            start = int(rng.integers(len(toks) - seq_len + 1))
            toks = toks[start : start + seq_len]
        return list(toks)


@dataclass
class Batch:
    y: torch.Tensor
    labels: torch.Tensor
    m: torch.Tensor
    m_mask: torch.Tensor


def make_batch(corpus: Corpus, cfg: TrainConfig, step: int, adaptive_ids: Sequence[int]) -> Batch:
    b, t = cfg.batch_size, cfg.seq_len
    y = np.full((b, t), corpus.pad_id, dtype=np.int64)
    m = y.copy()
    labels = np.full((b, t), IGNORE, dtype=np.int64)
    m_mask = np.zeros((b, t), dtype=bool)
    for row in range(b):
        rng = np.random.default_rng([cfg.seed, step, row])
        toks = corpus.sample(rng, t)
        plan = plan_masks(len(toks), cfg.L, cfg.rate, rng)
        mixed = apply_masks(toks, plan, adaptive_ids, diverse=cfg.adaptive == "diverse")
        n = len(toks)
        y[row, :n] = toks
        m[row, :n] = mixed.m
        labels[row, :n] = mixed.labels
        m_mask[row, :n] = mixed.m_mask
    return Batch(torch.from_numpy(y), torch.from_numpy(labels), torch.from_numpy(m),
                 torch.from_numpy(m_mask))


def compute_loss(model: DecoderLM, batch: Batch, mode: str, w: float = 1.0) -> LossReport:
    if mode == BASIC:
        return loss_basic(model(batch.m), batch.labels, batch.m_mask)
    if mode == PLAIN:
        return loss_basic(model(batch.y), batch.labels)
    return loss_improved(model(batch.y), batch.labels, model(batch.m), batch.labels,
                         batch.m_mask, w)


def lr_lambda(cfg: TrainConfig):
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))

    def fn(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        frac = (step - warm) / max(1, cfg.steps - warm)
        return cfg.final_lr_ratio + (1 - cfg.final_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))

    return fn


@dataclass
class LossRow:
    step: int
    standard_loss: float
    adaptive_loss: float
    mode: str


@dataclass
class TrainResult:
    model: DecoderLM
    curve: list[LossRow] = field(default_factory=list)


def train(model: DecoderLM, corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Train ``model`` in place; returns it with the logged loss curve."""
    adaptive_ids = model.config.adaptive_ids
    if cfg.adaptive == "diverse" and cfg.L > len(adaptive_ids):
        raise ValueError(f"diverse mode needs n_adaptive >= L={cfg.L}")
    result = TrainResult(model)
    if cfg.steps == 0:
        return result
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(cfg))
    model.train()
    recent: list[float] = []
    try:
        for step in range(cfg.steps):
            batch = make_batch(corpus, cfg, step, adaptive_ids)
            report = compute_loss(model, batch, cfg.mode, cfg.w)
            loss = report.combined
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (lr={sched.get_last_lr()[0]:.3g}, "
                    f"recent losses={recent[-5:]})"
                )
            recent.append(float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                result.curve.append(LossRow(step, report.standard_loss, report.adaptive_loss, cfg.mode))
                if step % 100 == 0:
                    log.info("step %d loss %.4f std %.4f ada %.4f", step, recent[-1],
                             report.standard_loss, report.adaptive_loss)
    finally:
        model.eval()
    return result


def write_curve_csv(rows: Sequence[LossRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "standard_loss", "adaptive_loss", "mode"])
        for r in rows:
            writer.writerow([r.step, f"{r.standard_loss:.6f}", f"{r.adaptive_loss:.6f}", r.mode])


def finite_difference_check(
    model: DecoderLM,
    batch: Batch,
    mode: str,
    n_params: int = 100,
    eps: float = 1e-6,
    w: float = 1.0,
    seed: int = 0,
) -> list[tuple[str, int, float, float]]:
    """Compare autograd against central differences on randomly chosen scalars.

    Run it on a float64 model; returns ``(param name, flat index, analytic, numeric)``.
    """
    named = [(n, p) for n, p in model.named_parameters()]
    model.zero_grad(set_to_none=True)
    compute_loss(model, batch, mode, w).combined.backward()
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    with torch.no_grad():
        for flat in sorted(int(x) for x in picks):
            pi = int(np.searchsorted(offsets, flat, side="right")) - 1
            name, p = named[pi]
            idx = flat - int(offsets[pi])
            view = p.view(-1)
            analytic = float(p.grad.view(-1)[idx]) if p.grad is not None else 0.0
            orig = float(view[idx])
            view[idx] = orig + eps
            up = float(compute_loss(model, batch, mode, w).combined)
            view[idx] = orig - eps
            down = float(compute_loss(model, batch, mode, w).combined)
            view[idx] = orig
            out.append((name, idx, analytic, (up - down) / (2 * eps)))
    return out
