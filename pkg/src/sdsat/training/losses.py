"""Basic and two-stream training objectives.

Everything reduces from one per-position NLL tensor so that the reported
numbers recompute exactly from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .masking import IGNORE


@dataclass
class LossReport:
    combined: torch.Tensor
    standard_loss: float
    adaptive_loss: float
    w: float = 1.0
    n_standard: int = 0
    n_adaptive: int = 0


def position_nll(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-position NLL (zero where the label is ignored) and the validity mask."""
    valid = labels != IGNORE
    nll = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        labels.clamp_min(0).reshape(-1),
        reduction="none",
    ).reshape(labels.shape)
    return nll * valid, valid


def _masked_mean(nll: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    count = sel.sum()
    if count == 0:
        return nll.sum() * 0.0
    return (nll * sel).sum() / count


def loss_basic(logits_m: torch.Tensor, labels_m: torch.Tensor,
               m_mask: Optional[torch.Tensor] = None) -> LossReport:
    """Mean NLL over every labelled position, adaptive inputs included."""
    nll, valid = position_nll(logits_m, labels_m)
    combined = _masked_mean(nll, valid)
    if m_mask is None:
        m_mask = torch.zeros_like(valid)
    ada = valid & m_mask.bool()
    std = valid & ~m_mask.bool()
    return LossReport(
        combined=combined,
        standard_loss=float(_masked_mean(nll.detach(), std)),
        adaptive_loss=float(_masked_mean(nll.detach(), ada)),
        n_standard=int(std.sum()),
        n_adaptive=int(ada.sum()),
    )


def loss_improved(
    logits_y: Optional[torch.Tensor],
    labels_y: Optional[torch.Tensor],
    logits_m: torch.Tensor,
    labels_m: torch.Tensor,
    m_mask: torch.Tensor,
    w: float = 1.0,
) -> LossReport:
    """``0.5 * (pure-stream NLL + w * mixed-stream NLL averaged over adaptive inputs only)``.

    Standard-input positions of the mixed stream get no gradient.
    """
    nll_m, valid_m = position_nll(logits_m, labels_m)
    ada = valid_m & m_mask.bool()
    if logits_y is None:
        if ada.sum() == 0:
            raise ValueError("no pure stream and no adaptive positions: nothing to train on")
        pure_count = 0
        pure_term = nll_m.sum() * 0.0
    else:
        pure, valid_y = position_nll(logits_y, labels_y)
        pure_count = int(valid_y.sum())
        pure_term = _masked_mean(pure, valid_y)
    ada_term = _masked_mean(nll_m, ada)
    combined = 0.5 * (pure_term + w * ada_term)
    return LossReport(
        combined=combined,
        standard_loss=float(pure_term.detach()),
        adaptive_loss=float(ada_term.detach()),
        w=w,
        n_standard=pure_count,
        n_adaptive=int(ada.sum()),
    )
