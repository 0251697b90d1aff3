"""Sweeps, equivalence reports and distribution checks behind the CLI.

Speedups at toy scale are reported through forward-pass counts; tokens per
second is recorded too but depends on the machine.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chisquare

from .greedy import IDENTICAL, generate_greedy
from .model import DecoderLM
from .oracle import generate_vanilla_greedy, generate_vanilla_nucleus, nucleus_marginals
from .tree import BranchProfile, SamplingConfig, generate_nucleus

BENCH_FIELDS = ["model_tag", "k", "temperature", "dataset_tag", "accept_rate",
                "tokens_per_second", "tokens_per_loop", "forward_passes"]
SERIES_FIELDS = ["model_tag", "k", "temperature", "dataset_tag", "series", "index", "value"]


@dataclass
class BenchRow:
    model_tag: str
    k: int
    temperature: float
    dataset_tag: str
    accept_rate: Optional[float]
    tokens_per_second: Optional[float]
    tokens_per_loop: float
    forward_passes: int
    # not written to the main CSV
    accept_rate_by_index: list[float] = field(default_factory=list)
    mean_loop_seconds: Optional[float] = None

    def csv_values(self) -> list[str]:
        return [
            self.model_tag,
            str(self.k),
            f"{self.temperature:g}",
            self.dataset_tag,
            "" if self.accept_rate is None else f"{self.accept_rate:.6f}",
            "" if self.tokens_per_second is None else f"{self.tokens_per_second:.2f}",
            f"{self.tokens_per_loop:.6f}",
            str(self.forward_passes),
        ]


@dataclass
class BenchPoint:
    k: int
    temperature: float
    max_new: int
    top_k: int = 10
    top_p: float = 0.95
    seed: int = 0
    repeats: int = 1
    mode: str = IDENTICAL


def run_point(model: DecoderLM, prompts: Sequence[Sequence[int]], point: BenchPoint,
              model_tag: str = "model", dataset_tag: str = "prompts",
              walltime: bool = True) -> BenchRow:
    """Decode every prompt ``repeats`` times and pool the per-loop accounting.

    ``k = 0`` is the vanilla baseline: one token per forward pass, no drafts.
    """
    max_seq = model.config.max_seq
    rates: list[float] = []
    idx_hits = np.zeros(point.k)
    idx_offered = np.zeros(point.k)
    loops = passes = tokens = 0
    seconds = 0.0
    loop_seconds: list[float] = []
    for rep in range(point.repeats):
        for i, prompt in enumerate(prompts):
            max_new = min(point.max_new, max_seq - len(prompt))
            seed = point.seed + rep * len(prompts) + i
            cfg = SamplingConfig(point.temperature, point.top_k, point.top_p, seed)
            if point.k == 0:
                t0 = time.perf_counter()
                if point.temperature == 0:
                    out = generate_vanilla_greedy(model, prompt, max_new)
                else:
                    out = generate_vanilla_nucleus(model, prompt, cfg, max_new)
                dt = time.perf_counter() - t0
                loops += len(out)
                passes += len(out)
                tokens += len(out)
                seconds += dt
                if out:
                    loop_seconds.append(dt / len(out))
                continue
            if point.temperature == 0:
                out, stats = generate_greedy(model, prompt, point.k, max_new, mode=point.mode)
            else:
                out, stats = generate_nucleus(model, prompt, point.k, BranchProfile.default(point.k),
                                              cfg, max_new, mode=point.mode)
            loops += stats.loops
            passes += stats.forward_passes
            tokens += stats.new_tokens
            seconds += stats.wall_time
            loop_seconds.extend(stats.loop_times)
            rates.extend(a / d for a, d in zip(stats.accepted_drafts_per_loop, stats.drafts_per_loop) if d)
            idx_hits += stats.accept_count_per_index
            for d in stats.drafts_per_loop:
                idx_offered[:d] += 1
    by_index = [float(h / o) if o else 0.0 for h, o in zip(idx_hits, idx_offered)]
    return BenchRow(
        model_tag=model_tag,
        k=point.k,
        temperature=point.temperature,
        dataset_tag=dataset_tag,
        accept_rate=float(np.mean(rates)) if rates else None,
        tokens_per_second=(tokens / seconds if seconds > 0 else None) if walltime else None,
        tokens_per_loop=tokens / loops if loops else 0.0,
        forward_passes=passes,
        accept_rate_by_index=by_index,
        mean_loop_seconds=float(np.mean(loop_seconds)) if (walltime and loop_seconds) else None,
    )


def sweep(model: DecoderLM, prompts, ks: Sequence[int], temperatures: Sequence[float],
          workers: int = 1, model_tag: str = "model", dataset_tag: str = "prompts",
          walltime: bool = True, **point_kw) -> list[BenchRow]:
    """Rows come back in (k, temperature) order whatever the worker count."""
    points = [BenchPoint(k=k, temperature=t, **point_kw) for k in ks for t in temperatures]

    def job(p):
        return run_point(model, prompts, p, model_tag, dataset_tag, walltime)

    if workers <= 1:
        return [job(p) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, points))


def bench_csv(rows: Sequence[BenchRow], timestamp: bool = True) -> str:
    buf = io.StringIO()
    if timestamp:
        buf.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_FIELDS)
    for r in rows:
        writer.writerow(r.csv_values())
    return buf.getvalue()


def series_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SERIES_FIELDS)
    for r in rows:
        head = [r.model_tag, r.k, f"{r.temperature:g}", r.dataset_tag]
        for j, v in enumerate(r.accept_rate_by_index):
            writer.writerow(head + ["accept_rate_by_index", j, f"{v:.6f}"])
        if r.mean_loop_seconds is not None:
            writer.writerow(head + ["mean_loop_ms", 0, f"{1000 * r.mean_loop_seconds:.4f}"])
    return buf.getvalue()


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plot_sweep(rows: Sequence[BenchRow], path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # optional extra
        raise RuntimeError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for t in sorted({r.temperature for r in rows}):
        sel = sorted((r for r in rows if r.temperature == t), key=lambda r: r.k)
        drafted = [r for r in sel if r.accept_rate is not None]
        ax1.plot([r.k for r in drafted], [r.accept_rate for r in drafted], marker="o", label=f"T={t:g}")
        ax2.plot([r.k for r in sel], [r.tokens_per_loop for r in sel], marker="o", label=f"T={t:g}")
    ax1.set_xlabel("k")
    ax1.set_ylabel("accept rate")
    ax2.set_xlabel("k")
    ax2.set_ylabel("tokens per loop")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


@dataclass
class Divergence:
    prompt_index: int
    k: int
    position: int
    loop: int
    expected: int
    got: Optional[int]
    step1_drafts: list[int]
    step2_drafts: list[int]

    def describe(self) -> str:
        return (f"prompt {self.prompt_index}, k={self.k}: first divergence at position {self.position} "
                f"(loop {self.loop}): expected {self.expected}, got {self.got}; "
                f"step-1 drafts {self.step1_drafts}, step-2 drafts {self.step2_drafts}")


def check_greedy_equivalence(model: DecoderLM, prompts, ks: Sequence[int],
                             max_new: int) -> tuple[int, list[Divergence]]:
    """Compare ``generate_greedy`` with the vanilla oracle; returns (cases run, failures)."""
    failures = []
    cases = 0
    for i, prompt in enumerate(prompts):
        n = min(max_new, model.config.max_seq - len(prompt))
        ref = generate_vanilla_greedy(model, prompt, n)
        for k in ks:
            cases += 1
            out, stats = generate_greedy(model, prompt, k, n, trace=True)
            if out == ref:
                continue
            pos = next((j for j in range(max(len(out), len(ref)))
                        if j >= len(out) or j >= len(ref) or out[j] != ref[j]))
            bounds = np.cumsum(stats.accepted_per_loop)
            loop = int(np.searchsorted(bounds, pos, side="right"))
            loop = min(loop, len(stats.trace) - 1)
            state = stats.trace[loop][0]
            failures.append(Divergence(i, k, pos, loop, ref[pos] if pos < len(ref) else None,
                                       out[pos] if pos < len(out) else None,
                                       list(state.step1_drafts), list(state.step2_drafts)))
    return cases, failures


@dataclass
class ChiSquareResult:
    position: int
    statistic: float
    pvalue: float
    outside_support: int


def pooled_chisquare(counts: np.ndarray, probs: np.ndarray, min_expected: float = 5.0):
    """Chi-square over the support, pooling cells whose expected count is small."""
    n = counts.sum()
    support = probs > 0
    obs, exp = counts[support], probs[support] * n
    small = exp < min_expected
    if small.any() and (~small).sum() >= 1:
        obs = np.append(obs[~small], obs[small].sum())
        exp = np.append(exp[~small], exp[small].sum())
    if len(obs) < 2:
        return 0.0, 1.0
    res = chisquare(obs, exp * obs.sum() / exp.sum())
    return float(res.statistic), float(res.pvalue)


def nucleus_distribution_check(model: DecoderLM, prompt: Sequence[int], config: SamplingConfig,
                               k: int, trials: int, positions: int = 3,
                               profile: Optional[BranchProfile] = None) -> list[ChiSquareResult]:
    """Empirical per-position token frequencies of the tree decoder vs the exact marginals."""
    marg = nucleus_marginals(model, prompt, config, positions)
    vocab = model.config.vocab_size
    counts = np.zeros((positions, vocab))
    for t in range(trials):
        cfg = SamplingConfig(config.temperature, config.top_k, config.top_p, config.seed + t)
        out, _ = generate_nucleus(model, prompt, k, profile, cfg, positions)
        for pos, tok in enumerate(out):
            counts[pos, tok] += 1
    results = []
    for pos in range(positions):
        stat, p = pooled_chisquare(counts[pos], marg[pos])
        outside = int(counts[pos, marg[pos] == 0].sum())
        results.append(ChiSquareResult(pos + 1, stat, p, outside))
    return results
