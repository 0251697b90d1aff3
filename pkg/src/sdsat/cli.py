"""Command line: ``sdsat {train,generate,bench,verify}``.

Every command takes ``--config FILE`` with flat ``key = value`` lines whose
keys are the long flag names (dashes or underscores); flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .bench import (
    bench_csv,
    check_greedy_equivalence,
    nucleus_distribution_check,
    plot_sweep,
    series_csv,
    sweep,
)
from .greedy import generate_greedy
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .tokenizer import EOS, ByteTokenizer
from .training import BASIC, IMPROVED, PLAIN, Corpus, TrainConfig, TrainingDiverged, train, write_curve_csv
from .tree import SamplingConfig, generate_nucleus

log = logging.getLogger("sdsat")

TEXT = "text"
IDS = "ids"


class UsageError(Exception):
    pass


def int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


def float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(" ", "").split(",") if x]


def read_config(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def sidecar_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".json")


def read_prompts(path, fmt: str, tokenizer: ByteTokenizer) -> list[list[int]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if fmt == IDS:
        return [[int(t) for t in ln.split()] for ln in lines]
    return [tokenizer.encode(ln) for ln in lines]


def tokenizer_for(config: ModelConfig) -> ByteTokenizer:
    return ByteTokenizer(n_adaptive=config.n_adaptive)


def guess_format(config: ModelConfig, fmt: Optional[str]) -> str:
    if fmt:
        return fmt
    return TEXT if config.vocab_size == tokenizer_for(config).vocab_size else IDS


def load_model(args) -> torch.nn.Module:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    corpus_path = Path(args.corpus) if args.corpus else None
    if corpus_path is None or not corpus_path.exists():
        raise UsageError(f"corpus not found: {args.corpus}")
    if not args.checkpoint:
        raise UsageError("--checkpoint (output path) is required")
    if args.format == IDS:
        seqs = [[int(t) for t in ln.split()]
                for ln in corpus_path.read_text().splitlines() if ln.strip()]
        corpus = Corpus(sequences=seqs)
        vocab = args.vocab_size or max(max(s) for s in seqs) + 1 + args.n_adaptive
    else:
        tok = ByteTokenizer(args.n_adaptive)
        corpus = Corpus.from_file(corpus_path, tok, fim_rate=args.fim_rate)
        vocab = tok.vocab_size
    if args.init_checkpoint:
        model = load_checkpoint(args.init_checkpoint)
        if model.config.vocab_size != vocab:
            raise UsageError("init checkpoint vocabulary does not match the corpus format")
    else:
        model = init_model(ModelConfig(vocab_size=vocab, n_adaptive=args.n_adaptive,
                                       n_layers=args.layers, n_heads=args.heads,
                                       d_model=args.d_model, max_seq=args.max_seq,
                                       seed=args.model_seed))
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, seq_len=args.seq_len,
                      L=args.mask_window, rate=args.rate, w=args.w, mode=args.mode,
                      adaptive=args.adaptive_tokens, lr=args.lr, warmup_frac=args.warmup_frac,
                      seed=args.seed, log_every=args.log_every)
    if cfg.seq_len > model.config.max_seq:
        raise UsageError(f"seq-len {cfg.seq_len} exceeds the model's max_seq {model.config.max_seq}")
    try:
        result = train(model, corpus, cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(model, args.checkpoint)
    sidecar_path(args.checkpoint).write_text(json.dumps(
        {"mode": cfg.mode, "L": cfg.L, "adaptive": cfg.adaptive, "steps": cfg.steps,
         "seed": cfg.seed, "format": args.format}, indent=2) + "\n")
    if args.out_csv:
        write_curve_csv(result.curve, args.out_csv)
    last = result.curve[-1] if result.curve else None
    msg = f"saved {args.checkpoint}"
    if last:
        msg += f" (step {last.step}: standard {last.standard_loss:.4f}, adaptive {last.adaptive_loss:.4f})"
    print(msg)
    return 0


def cmd_generate(args) -> int:
    model = load_model(args)
    fmt = guess_format(model.config, args.format)
    tok = tokenizer_for(model.config)
    if args.prompt is not None:
        prompts = [[int(t) for t in args.prompt.split()] if fmt == IDS else tok.encode(args.prompt)]
    elif args.prompts:
        prompts = read_prompts(args.prompts, fmt, tok)
    else:
        raise UsageError("give --prompt or --prompts")
    ks = int_list(args.k)
    if len(ks) != 1:
        raise UsageError("generate takes a single --k")
    k = ks[0]
    temperature = float_list(args.temperature)[0]
    stops = () if (args.no_stop or fmt == IDS) else (EOS,)
    for i, prompt in enumerate(prompts):
        max_new = min(args.max_new, model.config.max_seq - len(prompt))
        if temperature == 0:
            out, stats = generate_greedy(model, prompt, k, max_new, stops, mode=args.adaptive_tokens)
        else:
            cfg = SamplingConfig(temperature, args.top_k, args.top_p, args.seed + i)
            out, stats = generate_nucleus(model, prompt, k, None, cfg, max_new, stops,
                                          mode=args.adaptive_tokens)
        print(" ".join(map(str, out)) if fmt == IDS else tok.decode(out))
        rate = "n/a" if stats.accept_rate is None else f"{stats.accept_rate:.3f}"
        print(f"[{len(out)} tokens, {stats.loops} loops, {stats.forward_passes} passes, "
              f"accept rate {rate}]", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    model = load_model(args)
    if not args.prompts or not Path(args.prompts).exists():
        raise UsageError(f"prompts file not found: {args.prompts}")
    fmt = guess_format(model.config, args.format)
    prompts = read_prompts(args.prompts, fmt, tokenizer_for(model.config))
    ks = int_list(args.k)
    temps = float_list(args.temperature)
    side = sidecar_path(args.checkpoint)
    if side.exists():
        trained = json.loads(side.read_text())
        over = [k for k in ks if k > trained.get("L", max(ks))]
        if over:
            print(f"warning: k={over} exceeds the mask window L={trained['L']} used in training; "
                  "drafts past L rely on extrapolation", file=sys.stderr)
    rows = sweep(model, prompts, ks, temps, workers=args.workers,
                 model_tag=args.model_tag or Path(args.checkpoint).stem,
                 dataset_tag=args.dataset_tag or Path(args.prompts).stem,
                 walltime=not args.no_walltime, max_new=args.max_new, top_k=args.top_k,
                 top_p=args.top_p, seed=args.seed, repeats=args.repeats, mode=args.adaptive_tokens)
    text = bench_csv(rows, timestamp=not args.no_walltime)
    if args.out_csv:
        Path(args.out_csv).write_text(text)
    else:
        sys.stdout.write(text)
    if args.series_csv:
        Path(args.series_csv).write_text(series_csv(rows))
    if args.plot_svg:
        plot_sweep(rows, args.plot_svg)
    return 0


def cmd_verify(args) -> int:
    if args.random_init:
        tok = ByteTokenizer(args.n_adaptive)
        model = init_model(ModelConfig(vocab_size=args.vocab_size or tok.vocab_size,
                                       n_adaptive=args.n_adaptive, n_layers=args.layers,
                                       n_heads=args.heads, d_model=args.d_model,
                                       max_seq=args.max_seq, seed=args.model_seed))
    else:
        model = load_model(args)
    fmt = guess_format(model.config, args.format)
    if not args.prompts or not Path(args.prompts).exists():
        raise UsageError(f"prompts file not found: {args.prompts}")
    prompts = read_prompts(args.prompts, fmt, tokenizer_for(model.config))
    ok = True

    cases, failures = check_greedy_equivalence(model, prompts, int_list(args.k), args.max_new)
    for f in failures:
        print("FAIL greedy " + f.describe())
    print(f"{'PASS' if not failures else 'FAIL'} greedy equivalence: "
          f"{cases - len(failures)}/{cases} cases match vanilla decoding")
    ok &= not failures

    if args.nucleus_trials > 0:
        temperature = float_list(args.temperature)[0] or 1.0
        cfg = SamplingConfig(temperature, args.top_k, args.top_p, args.seed)
        k_nuc = max(int_list(args.k)[0], 1)
        for i, prompt in enumerate(prompts[: args.nucleus_prompts]):
            results = nucleus_distribution_check(model, prompt, cfg, k_nuc, args.nucleus_trials,
                                                 args.nucleus_positions)
            for r in results:
                passed = r.pvalue > args.alpha and r.outside_support == 0
                ok &= passed
                print(f"{'PASS' if passed else 'FAIL'} nucleus prompt {i} position {r.position}: "
                      f"chi2={r.statistic:.2f} p={r.pvalue:.4f} outside-support={r.outside_support}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def _model_flags(p):
    g = p.add_argument_group("model shape (new models only)")
    g.add_argument("--n-adaptive", type=int, default=4)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--max-seq", type=int, default=128)
    g.add_argument("--model-seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=None,
                   help="only for --format ids; defaults to max id + 1 + n_adaptive")


def _sampling_flags(p, k_default="5", temp_default="0"):
    p.add_argument("--k", default=k_default, help="number of adaptive tokens (comma list where allowed)")
    p.add_argument("--temperature", default=temp_default, help="0 selects greedy decoding")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adaptive-tokens", choices=["identical", "diverse"], default="identical")
    p.add_argument("--format", choices=[TEXT, IDS], default=None,
                   help="prompt format; inferred from the checkpoint vocabulary when omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdsat", description="Adaptive-token speculative decoding toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("train", help="train a toy model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--corpus", help="newline-delimited documents")
    p.add_argument("--format", choices=[TEXT, IDS], default=TEXT)
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--init-checkpoint", help="continue training from this checkpoint")
    p.add_argument("--out-csv", help="loss curve CSV")
    p.add_argument("--mode", choices=[BASIC, IMPROVED, PLAIN], default=IMPROVED)
    p.add_argument("--adaptive-tokens", choices=["identical", "diverse"], default="identical")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=112)
    p.add_argument("--mask-window", type=int, default=5, help="maximum mask window L")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--warmup-frac", type=float, default=0.2)
    p.add_argument("--fim-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode prompts")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--prompt")
    p.add_argument("--prompts")
    p.add_argument("--no-stop", action="store_true", help="do not stop at EOS")
    _sampling_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="sweep k and temperature, write BenchRow CSV")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--prompts")
    _sampling_flags(p, k_default="0,1,3,5", temp_default="0")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out-csv")
    p.add_argument("--series-csv", help="accept rate by index and mean loop time")
    p.add_argument("--plot-svg")
    p.add_argument("--model-tag")
    p.add_argument("--dataset-tag")
    p.add_argument("--no-walltime", action="store_true",
                   help="omit timing columns and the timestamp so the CSV is byte-stable")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="check greedy equivalence and nucleus distributions")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true", help="use an untrained model")
    p.add_argument("--prompts")
    _sampling_flags(p, k_default="1,5,13", temp_default="1.0")
    p.add_argument("--nucleus-trials", type=int, default=2000)
    p.add_argument("--nucleus-positions", type=int, default=3)
    p.add_argument("--nucleus-prompts", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.01)
    _model_flags(p)
    p.set_defaults(func=cmd_verify)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser.commands[args.command]
        try:
            values = read_config(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help", "func"):
                parser.error(f"{args.config}: unknown key {key!r}")
            if action.nargs == 0:
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sdsat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"sdsat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
