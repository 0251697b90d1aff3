"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the printed lines show
up even without ``-s``.
"""

import copy
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from sdsat.data import code_corpus, periodic_corpus, prompts_from
from sdsat.greedy import generate_greedy
from sdsat.model import ModelConfig, forward, init_model
from sdsat.oracle import branch_logits, generate_vanilla_greedy, nucleus_marginals
from sdsat.training import (
    BASIC,
    IMPROVED,
    PLAIN,
    Corpus,
    TrainConfig,
    coverage_probability,
    finite_difference_check,
    make_batch,
    make_infill,
    plan_masks,
    reassemble,
    train,
)
from sdsat.tree import BranchProfile, DraftTree, SamplingConfig, generate_nucleus, tree_forward

from conftest import TOKENIZER, byte_config

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")
        return passed

    return emit


def test_criterion_1_greedy_exact_equivalence(report, untrained_model, periodic_model, code_model):
    t0 = time.perf_counter()
    code_prompts = [TOKENIZER.encode(p) for p in prompts_from(code_corpus(60, seed=1), 24, 50, seed=2)]
    periodic_prompts = [TOKENIZER.encode(d[i % 9 : i % 9 + 10 + i % 7])
                        for i, d in enumerate(periodic_corpus() * 5)][:50]
    models = [("untrained", untrained_model, code_prompts), ("periodic", periodic_model, periodic_prompts),
              ("code", code_model, code_prompts)]
    cases = mismatches = 0
    for _, model, prompts in models:
        for prompt in prompts:
            ref = generate_vanilla_greedy(model, prompt, 64)
            for k in (0, 1, 3, 5, 9, 13):
                out, _ = generate_greedy(model, prompt, k, 64)
                cases += 1
                mismatches += out != ref
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 180
    report(1, ok, f"{cases - mismatches}/{cases} generations identical to vanilla greedy "
                  f"(3 models x 50 prompts x 6 k, 64 tokens) in {elapsed:.0f}s")
    assert mismatches == 0
    assert elapsed < 180


def test_criterion_2_loop_economics(report, periodic_model, periodic_docs):
    k, max_new = 5, 64
    bound = math.ceil(2 * max_new / (k + 2)) + 2
    worst = 0
    structural = True
    for doc in periodic_docs:
        out, stats = generate_greedy(periodic_model, TOKENIZER.encode(doc[:8]), k, max_new)
        worst = max(worst, stats.forward_passes)
        structural &= stats.forward_passes == 2 * stats.loops
        structural &= all(2 <= c <= k + 2 for c in stats.accepted_per_loop[:-1])
        structural &= 1 <= stats.accepted_per_loop[-1] <= k + 2
        structural &= len(out) == max_new
    ok = structural and worst <= bound
    report(2, ok, f"2 passes per loop, 2..k+2 tokens per loop: {structural}; "
                  f"max passes for 64 tokens at k=5 = {worst} (bound {bound})")
    assert structural
    assert worst <= bound


def _random_tree(rng, vocab):
    depth = int(rng.integers(1, 7))
    tree = DraftTree()
    layer = [-1]
    for _ in range(depth):
        nxt = []
        for parent in layer:
            for _ in range(int(rng.integers(1, 5))):
                nxt.append(tree.add(int(rng.integers(vocab)), parent))
        # keep trees small enough for a 128-position model while staying deep
        layer = nxt if len(tree) < 48 else nxt[:1]
    return tree


def test_criterion_3_tree_attention_fidelity(report, code_model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    nodes = 0
    depths = set()
    for _ in range(200):
        prefix = [int(t) for t in rng.integers(32, 127, size=int(rng.integers(1, 16)))]
        root = int(rng.integers(32, 127))
        tree = _random_tree(rng, 256)
        depths.add(tree.max_depth)
        cache = code_model.new_cache()
        forward(code_model, prefix, cache=cache)
        rows = tree_forward(code_model, cache, root, tree)
        leaves = [i for i in range(len(tree)) if not tree.children(i)]
        covered = set()
        for leaf in leaves:
            chain = tree.ancestors(leaf) + [leaf]
            ref = branch_logits(code_model, prefix + [root], tree.branch(leaf))
            for j, node in enumerate(chain):
                if node in covered:
                    continue
                covered.add(node)
                err = float((rows[1 + node] - ref[1 + j]).abs().max() / ref[1 + j].abs().max())
                worst = max(worst, err)
        root_ref = branch_logits(code_model, prefix + [root], [])[0]
        worst = max(worst, float((rows[0] - root_ref).abs().max() / root_ref.abs().max()))
        assert covered == set(range(len(tree)))
        nodes += len(tree)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 120
    report(3, ok, f"200 random trees ({nodes} nodes, depths {min(depths)}..{max(depths)}, width <= 4): "
                  f"max relative deviation {worst:.2e} (tol 1e-5) in {elapsed:.0f}s")
    assert worst <= 1e-5
    assert elapsed < 120


def _pooled_chisquare(counts, probs):
    n = counts.sum()
    support = probs > 0
    obs, exp = counts[support], probs[support] * n
    small = exp < 5
    if small.any():
        obs = np.append(obs[~small], obs[small].sum())
        exp = np.append(exp[~small], exp[small].sum())
    return chisquare(obs, exp).pvalue, int(counts[~support].sum())


def test_criterion_4_nucleus_distribution(report, markov8_model):
    prompt, trials, k = [0, 3], 10_000, 3
    base = SamplingConfig(1.0, 4, 0.95)
    marg = nucleus_marginals(markov8_model, prompt, base, 3)
    counts = np.zeros((3, markov8_model.config.vocab_size))
    for seed in range(trials):
        cfg = SamplingConfig(base.temperature, base.top_k, base.top_p, seed)
        out, _ = generate_nucleus(markov8_model, prompt, k, BranchProfile.default(k), cfg, 3)
        for pos, tok in enumerate(out):
            counts[pos, tok] += 1
    results = [_pooled_chisquare(counts[pos], marg[pos]) for pos in range(3)]
    ok = all(p > 0.01 and outside == 0 for p, outside in results)
    detail = ", ".join(f"pos {i + 1}: p={p:.3f}" for i, (p, _) in enumerate(results))
    report(4, ok, f"8-id vocab, {trials} trials, k={k} tree drafts vs exact nucleus marginals: {detail}")
    assert ok


def test_criterion_5_training_loss_ordering(report):
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    corpus = Corpus(texts=code_corpus(), tokenizer=TOKENIZER, fim_rate=0.5)
    base = init_model(byte_config(seed=3))
    # continued-training setup: a plainly pretrained model is fine-tuned both ways
    train(base, corpus, TrainConfig(steps=800, batch_size=8, seq_len=112, mode=PLAIN, seed=11))
    steps = 2000
    curves = {}
    for mode in (BASIC, IMPROVED):
        model = copy.deepcopy(base)
        result = train(model, corpus, TrainConfig(steps=steps, batch_size=8, seq_len=112, L=5,
                                                  mode=mode, seed=5, lr=1e-3))
        curves[mode] = np.array([(r.step, r.standard_loss) for r in result.curve])
    assert np.array_equal(curves[BASIC][:, 0], curves[IMPROVED][:, 0])
    after = curves[BASIC][:, 0] >= 0.1 * steps
    frac = float(np.mean(curves[BASIC][after, 1] >= curves[IMPROVED][after, 1]))
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.95 and elapsed < 600
    report(5, ok, f"basic >= improved standard-token loss at {100 * frac:.1f}% of {after.sum()} logged "
                  f"steps after warmup (need 95%), {elapsed:.0f}s")
    assert frac >= 0.95
    assert elapsed < 600


def _per_position_monte_carlo(L, rate, trials, rng):
    """A position is covered if some start d = 0..L-1 places behind it opens a window wider than d."""
    hit = np.zeros(trials, dtype=bool)
    for d in range(L):
        starts = rng.random(trials) < rate
        widths = rng.integers(1, L + 1, size=trials)
        hit |= starts & (widths > d)
    return hit.mean()


def test_criterion_6_mask_plan_statistics(report):
    rng = np.random.default_rng(6)
    n, rate = 10_000, 0.1
    lines, ok = [], True
    for L in (1, 3, 5, 7):
        mc = _per_position_monte_carlo(L, rate, 1_000_000, rng)
        counts = np.array([plan_masks(n, L, rate, rng).replaced_count for _ in range(200)])
        frac = counts.mean() / n
        rel = abs(frac - mc) / mc
        ok &= rel <= 0.01
        closed = coverage_probability(L, rate)
        # recorded only: shape of the replaced-count histogram over more draws
        shape = np.array([plan_masks(n, L, rate, rng).replaced_count for _ in range(2000)])
        mu, sd = shape.mean(), shape.std()
        hist, _ = np.histogram(shape, bins=9, range=(mu - 3 * sd, mu + 3 * sd))
        peak = int(np.argmax(hist))
        unimodal = all(np.diff(hist[: peak + 1]) >= 0) and all(np.diff(hist[peak:]) <= 0)
        lines.append(f"L={L}: plan {frac:.4f} vs MC {mc:.4f} (rel {rel:.2%}, closed form {closed:.4f}, "
                     f"var/mean {shape.var() / shape.mean():.2f}, unimodal histogram {unimodal})")
    report(6, ok, "; ".join(lines))
    assert ok


def test_criterion_7_accept_rate_trends(report, code_model):
    prompts = [TOKENIZER.encode(p) for p in prompts_from(code_corpus(200, seed=7), 20, 100, seed=8)]
    k = 5

    def pooled(temperature):
        hits = np.zeros(k)
        offered = np.zeros(k)
        rates = []
        for i, prompt in enumerate(prompts):
            if temperature == 0:
                _, stats = generate_greedy(code_model, prompt, k, 64)
            else:
                cfg = SamplingConfig(temperature, 10, 0.95, seed=i)
                _, stats = generate_nucleus(code_model, prompt, k, None, cfg, 64)
            hits += stats.accept_count_per_index
            for d in stats.drafts_per_loop:
                offered[:d] += 1
            rates.extend(a / d for a, d in zip(stats.accepted_drafts_per_loop, stats.drafts_per_loop) if d)
        return hits / offered, float(np.mean(rates))

    by_index = {}
    rate = {}
    for t in (0.0, 0.2, 1.0):
        by_index[t], rate[t] = pooled(t)
    monotone = all(np.all(np.diff(by_index[t]) <= 1e-12) for t in by_index)
    ordered = rate[0.2] >= rate[1.0]
    ok = monotone and ordered
    series = " | ".join(f"T={t:g}: " + ",".join(f"{v:.3f}" for v in by_index[t]) for t in by_index)
    report(7, ok, f"(a) accept rate by index non-increasing: {monotone} [{series}]; "
                  f"(b) accept rate T=0.2 {rate[0.2]:.3f} >= T=1.0 {rate[1.0]:.3f}: {ordered} "
                  f"({len(prompts)} generations each)")
    assert monotone
    assert ordered


def test_criterion_8_gradient_check(report):
    cfg = ModelConfig(vocab_size=TOKENIZER.vocab_size, n_adaptive=4, n_layers=2, n_heads=2,
                      d_model=16, max_seq=64, seed=8, init_std=0.1)
    corpus = Corpus(texts=code_corpus(20, seed=3), tokenizer=TOKENIZER)
    worst = {}
    for mode in (BASIC, IMPROVED):
        model = init_model(cfg, dtype=torch.float64)
        tc = TrainConfig(batch_size=2, seq_len=48, L=5, rate=0.2, mode=mode)
        batch = make_batch(corpus, tc, 0, cfg.adaptive_ids)
        rows = finite_difference_check(model, batch, mode, n_params=100, eps=1e-6, seed=8)
        # relative error with a small absolute floor for parameters whose gradient is ~0
        worst[mode] = max(abs(a - n) / max(abs(a), abs(n), 1e-5) for _, _, a, n in rows)
    ok = all(v < 1e-3 for v in worst.values())
    report(8, ok, "max relative error over 100 random parameters (float64, central differences): "
                  + ", ".join(f"{m} {v:.2e}" for m, v in worst.items()) + " (tol 1e-3)")
    assert ok


def test_criterion_9_infill_frequencies(report):
    rng = np.random.default_rng(9)
    docs = code_corpus(50, seed=9)
    n = 100_000
    tally = {"plain": 0, "psm": 0, "spm": 0}
    identity = True
    for i in range(n):
        sample = make_infill(docs[i % len(docs)], rng, fim_rate=0.5)
        tally[sample.format] += 1
        identity &= reassemble(sample.to_tokens(TOKENIZER), TOKENIZER) == sample.doc
    freq = {f: c / n for f, c in tally.items()}
    target = {"plain": 0.5, "psm": 0.25, "spm": 0.25}
    within = all(abs(freq[f] - target[f]) <= 0.01 for f in target)
    ok = within and identity
    report(9, ok, "frequencies " + ", ".join(f"{f} {freq[f]:.4f}" for f in target)
                  + f" (target 0.50/0.25/0.25 +-0.01); reassembly identity on all draws: {identity}")
    assert ok
